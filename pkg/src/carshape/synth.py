"""Synthetic data: a default car prior and seeded instance generators.

Everything here is deterministic given the seed, and serves as the oracle
for the test and acceptance suites.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .category import Category, car_category, car_mean_shape
from .geometry import Intrinsics, Plane, QuatPose, axis_angle_rotation, project_points
from .pose import KeypointObservation, visibility_prior
from .shape_prior import AnnotationSet, ShapePrior, shape_extents

# Camera-from-object rotation at zero azimuth and elevation: object forward
# (+y) looks away from the camera and object up (+z) maps to image up (-y).
_BASE = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])

KITTI_LIKE = Intrinsics(fx=721.5, fy=721.5, cx=609.6, cy=172.9)


class GenerationError(RuntimeError):
    pass


def _rigid_tangents(mean: np.ndarray) -> np.ndarray:
    """Orthonormal (3K, 7) basis of translation, rotation and scale changes."""
    K = len(mean)
    C = mean - mean.mean(axis=0)
    cols = []
    for a in range(3):
        e = np.zeros((K, 3))
        e[:, a] = 1.0
        cols.append(e.ravel())
        w = np.zeros(3)
        w[a] = 1.0
        cols.append(np.cross(w, C).ravel())
    cols.append(C.ravel())
    Q, _ = np.linalg.qr(np.array(cols).T)
    return Q


def _orthogonal_modes(raw, mean, norms):
    Q = _rigid_tangents(mean)
    out = []
    for D, s in zip(raw, norms):
        v = D.ravel() - Q @ (Q.T @ D.ravel())
        for b in out:
            v = v - b * (b @ v)
        nv = np.linalg.norm(v)
        if nv < 1e-6 * np.linalg.norm(D):
            raise ValueError("deformation mode is dependent on rigid motion or earlier modes")
        v = v / nv
        out.append(v)
    return np.array([v * s for v, s in zip(out, norms)]).reshape(len(norms), *mean.shape)


def default_car_prior(n_basis: int = 5) -> ShapePrior:
    """Hand-built car prior with symmetric modes (meters).

    Modes, in order: length stretch, width stretch, cabin height,
    wheelbase, cabin moving forward.  Each is made orthogonal to rigid
    motion, global scale and the preceding modes.
    """
    if not 1 <= n_basis <= 5:
        raise ValueError("the default car prior has 1..5 modes")
    cat = car_category()
    S = car_mean_shape()
    K = len(S)
    cabin = [cat.index(n) for n in ("mirror_left", "mirror_right", "roof_front_left",
                                    "roof_front_right", "roof_back_left", "roof_back_right")]
    wheels = [cat.index(n) for n in ("wheel_front_left", "wheel_front_right",
                                     "wheel_back_left", "wheel_back_right")]
    raw = [np.zeros((K, 3)) for _ in range(5)]
    raw[0][:, 1] = S[:, 1]
    raw[1][:, 0] = S[:, 0]
    raw[2][cabin, 2] = 1.0
    raw[3][wheels, 1] = np.sign(S[wheels, 1])
    raw[4][cabin, 1] = 1.0
    norms = np.array([0.20, 0.12, 0.10, 0.08, 0.06])
    basis = _orthogonal_modes(raw, S, norms)[:n_basis]
    return ShapePrior(mean=S, basis=basis, eigenvalues=norms[:n_basis] ** 2, sigma2=1.0,
                      category=cat, medial_plane=Plane((1.0, 0.0, 0.0), 0.0),
                      dim_priors=shape_extents(S))


def random_symmetric_basis(category: Category, mean, n: int, rng) -> np.ndarray:
    """n random mirror-symmetric unit modes, orthogonal to rigid/scale changes and each other."""
    mean = np.asarray(mean, dtype=float)
    raw = []
    for _ in range(n):
        D = rng.normal(size=mean.shape)
        for l, r in category.symmetry_pairs:
            D[r] = D[l] * np.array([-1.0, 1.0, 1.0])
        for i in category.on_plane:
            D[i, 0] = 0.0
        raw.append(D)
    return _orthogonal_modes(raw, mean, np.ones(n))


def random_rotations(count: int, rng) -> np.ndarray:
    """Uniformly distributed rotations (normalized Gaussian quaternions)."""
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    a, b, c, d = q.T
    return np.stack([
        np.stack([a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)], -1),
        np.stack([2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)], -1),
        np.stack([2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d], -1),
    ], axis=1)


def synth_annotations(category: Category, mean, n_modes: int, count: int,
                      missing_fraction: float = 0.0, seed: int = 0, scale: float = 100.0):
    """Weak-perspective annotation set of a random rank-``n_modes`` shape family.

    Coefficients are drawn from N(0, 1) and centered over the set so the
    ground truth is stated in the gauge the fit recovers.

    Returns:
        (AnnotationSet, ground-truth shapes (count, K, 3), basis (n, K, 3)).
    """
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    V = random_symmetric_basis(category, mean, n_modes, rng) if n_modes else np.zeros((0,) + mean.shape)
    lam = rng.normal(size=(count, n_modes))
    if count:
        lam -= lam.mean(axis=0)
    shapes = mean[None] + np.einsum("mn,nkb->mkb", lam, V)
    R = random_rotations(count, rng)
    Y = scale * np.einsum("mab,mkb->mka", R[:, :2], shapes) + rng.uniform(-50, 50, (count, 1, 2))
    vis = rng.random(Y.shape[:2]) >= missing_fraction
    Y[~vis] = np.nan
    return AnnotationSet(Y, vis, category.keypoint_names), shapes, V


def azimuth_of(R) -> float:
    """Azimuth (degrees, in [0, 360)) of an object-to-camera rotation.

    Zero when the object's forward axis points away from the camera along
    the optical axis; increases as the object turns to its left.
    """
    # Optical axis in object coordinates; its ground-plane heading does not
    # depend on the camera elevation.
    v = np.asarray(R)[2]
    return float(np.degrees(np.arctan2(v[0], v[1])) % 360.0)


def pose_from_angles(azimuth_deg: float, elevation_deg: float, t) -> QuatPose:
    R = (axis_angle_rotation([1.0, 0.0, 0.0], np.radians(elevation_deg)) @ _BASE
         @ axis_angle_rotation([0.0, 0.0, 1.0], np.radians(azimuth_deg)))
    return QuatPose.from_rt(R, t)


@dataclass
class SynthConfig:
    """Generator settings.  Angles in degrees, depths in meters, noise in pixels."""

    instance_count: int = 200
    pixel_noise_sigma: float = 2.0
    outlier_fraction: float = 0.0
    outlier_magnitude: float = 80.0
    occlusion_fraction: float = 0.0
    seed: int = 0
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (0.0, 20.0)
    depth_range: tuple = (6.0, 20.0)
    confidence_range: tuple = (0.6, 1.0)
    occluded_confidence: float = 0.3
    occluded_noise_sigma: float = 8.0
    init_yaw_sigma: float = 20.0
    init_translation_sigma: float = 0.5
    max_retries: int = 20

    def __post_init__(self):
        for name in ("outlier_fraction", "occlusion_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.pixel_noise_sigma < 0 or self.outlier_magnitude < 0:
            raise ValueError("noise magnitudes must be nonnegative")
        if self.instance_count < 0:
            raise ValueError("instance_count must be nonnegative")
        lo, hi = self.depth_range
        if not 0 < lo <= hi:
            raise ValueError("depth_range must be positive and ordered")
        lo, hi = self.confidence_range
        if not 0 <= lo <= hi <= 1:
            raise ValueError("confidence_range must lie in [0, 1] and be ordered")
        for name in ("azimuth_range", "elevation_range", "depth_range", "confidence_range"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synth config fields: {sorted(extra)}")
        return cls(**d)


@dataclass
class SynthInstance:
    id: str
    pose: QuatPose
    init_pose: QuatPose
    lam: np.ndarray
    shape: np.ndarray
    observations: list
    outliers: np.ndarray
    occluded: np.ndarray
    bbox: tuple
    azimuth: float

    @property
    def exact_uv(self) -> np.ndarray:
        return project_points(self.shape, self.pose, self.intrinsics)

    intrinsics: Intrinsics = field(default=KITTI_LIKE)


@dataclass
class SynthDataset:
    config: SynthConfig
    intrinsics: Intrinsics
    instances: list

    def annotations(self, category: Category) -> AnnotationSet:
        """Weak-perspective labels of the visible keypoints of every instance.

        Each instance is projected orthographically with scale fx / depth of
        its centroid, as a clean stand-in for manual 2D annotation.
        """
        K = category.size
        Y = np.full((len(self.instances), K, 2), np.nan)
        vis = np.zeros((len(self.instances), K), dtype=bool)
        for m, inst in enumerate(self.instances):
            Xc = inst.pose.transform(inst.shape)
            z = Xc[:, 2].mean()
            Y[m] = np.stack([self.intrinsics.fx * Xc[:, 0] / z + self.intrinsics.cx,
                             self.intrinsics.fy * Xc[:, 1] / z + self.intrinsics.cy], axis=1)
            vis[m] = ~inst.occluded
        Y[~vis] = np.nan
        return AnnotationSet(Y, vis, category.keypoint_names, tuple(i.id for i in self.instances))


def bbox_of(uv) -> tuple:
    uv = np.asarray(uv, dtype=float)
    uv = uv[np.all(np.isfinite(uv), axis=1)]
    return (float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()))


def _sample_instance(prior: ShapePrior, cfg: SynthConfig, K_cam: Intrinsics, rng, idx: int):
    K = prior.n_keypoints
    lam = rng.normal(size=prior.n_basis)
    shape = prior.mean + np.tensordot(lam, prior.basis, axes=1)
    az = rng.uniform(*cfg.azimuth_range)
    el = rng.uniform(*cfg.elevation_range)
    depth = rng.uniform(*cfg.depth_range)
    t = depth * np.array([rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.1), 1.0])
    # Put the shape centroid at t.
    pose0 = pose_from_angles(az, el, np.zeros(3))
    t = t - pose0.R @ shape.mean(axis=0)
    pose = QuatPose.from_rt(pose0.R, t)
    uv = project_points(shape, pose, K_cam)
    uv_obs = uv + rng.normal(scale=cfg.pixel_noise_sigma, size=uv.shape) if cfg.pixel_noise_sigma else uv.copy()
    conf = rng.uniform(*cfg.confidence_range, size=K)

    n_out = int(np.floor(cfg.outlier_fraction * K + 1e-9))
    outliers = np.zeros(K, dtype=bool)
    if n_out:
        pick = rng.choice(K, size=n_out, replace=False)
        ang = rng.uniform(0.0, 2.0 * np.pi, size=n_out)
        uv_obs[pick] += cfg.outlier_magnitude * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        outliers[pick] = True

    n_occ = int(np.floor(cfg.occlusion_fraction * K + 1e-9))
    occluded = np.zeros(K, dtype=bool)
    if n_occ:
        hidden = visibility_prior(shape, prior.topology, pose) < 1.0
        order = np.concatenate([rng.permutation(np.flatnonzero(hidden)),
                                rng.permutation(np.flatnonzero(~hidden))])
        occluded[order[:n_occ]] = True
    if K - occluded.sum() < 4:
        return None
    # Occluded keypoints keep a rough detector guess at lower confidence.
    uv_obs[occluded] = uv[occluded] + rng.normal(scale=cfg.occluded_noise_sigma, size=(occluded.sum(), 2))
    conf[occluded] *= cfg.occluded_confidence

    yaw = rng.normal(scale=cfg.init_yaw_sigma)
    dt = rng.normal(scale=cfg.init_translation_sigma, size=3)
    # Rotating about the object up axis keeps the centroid fixed.
    c = shape.mean(axis=0)
    R0 = pose.R @ axis_angle_rotation([0.0, 0.0, 1.0], np.radians(yaw))
    init = QuatPose.from_rt(R0, pose.R @ c + pose.translation - R0 @ c + dt)

    obs = [KeypointObservation(i, tuple(uv_obs[i]), float(conf[i]), bool(not occluded[i]))
           for i in range(K)]
    return SynthInstance(f"{idx:05d}", pose.canonical(), init.canonical(), lam, shape, obs,
                         outliers, occluded, bbox_of(uv), azimuth_of(pose.R), K_cam)


def synth_generate(prior: ShapePrior, config: SynthConfig | None = None,
                   intrinsics: Intrinsics | None = None) -> SynthDataset:
    """Seeded dataset of perspective keypoint observations of prior instances.

    Raises:
        GenerationError: an instance kept fewer than 4 visible keypoints
            after ``config.max_retries`` redraws.
    """
    cfg = config or SynthConfig()
    K_cam = intrinsics or KITTI_LIKE
    rng = np.random.default_rng(cfg.seed)
    out = []
    for m in range(cfg.instance_count):
        for _ in range(cfg.max_retries):
            inst = _sample_instance(prior, cfg, K_cam, rng, m)
            if inst is not None:
                out.append(inst)
                break
        else:
            raise GenerationError(
                f"instance {m}: fewer than 4 visible keypoints after {cfg.max_retries} retries")
    return SynthDataset(cfg, K_cam, out)
