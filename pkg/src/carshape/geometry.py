"""Camera models, rotations and mesh types shared by the whole pipeline.

Conventions
-----------
Object (canonical) frame: x points to the vehicle's right, y forward, z up.
Camera frame: x right, y down, z along the optical axis.
A pose maps object points into the camera frame, ``Xc = R @ X + t``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class DegenerateInputError(ValueError):
    """Raised when an input has no well-defined geometric meaning."""


class BehindCameraError(ValueError):
    """Raised when a point has nonpositive depth in the camera frame."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy, "skew": self.skew}

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   float(d.get("skew", 0.0)))


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion ``(a, b, c, d)``.

    Uses the homogeneous form divided by ``|q|^2``, so any nonzero scaling of
    ``q`` yields the same matrix.
    """
    a, b, c, d = (float(v) for v in q)
    n2 = a * a + b * b + c * c + d * d
    if not n2 > 0.0 or not np.isfinite(n2):
        raise DegenerateInputError("quaternion must be nonzero and finite")
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]) / n2


def rotation_to_quat(R) -> np.ndarray:
    """Unit quaternion for a rotation matrix, canonicalized to ``a >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    # Branch on the largest diagonal term for numerical stability.
    if tr > max(R[0, 0], R[1, 1], R[2, 2]):
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = 2.0 * np.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] >= R[2, 2]:
        s = 2.0 * np.sqrt(max(1.0 + R[1, 1] - R[0, 0] - R[2, 2], 0.0))
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(max(1.0 + R[2, 2] - R[0, 0] - R[1, 1], 0.0))
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return canonical_quat(q)


def canonical_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not n > 0:
        raise DegenerateInputError("quaternion must be nonzero")
    q = q / n
    return -q if q[0] < 0 else q


def rotation_angle(R1, R2) -> float:
    """Geodesic distance between two rotations, in radians."""
    D = np.asarray(R1).T @ np.asarray(R2)
    c = (np.trace(D) - 1.0) / 2.0
    # atan2 of sine and cosine stays accurate near 0, where arccos does not.
    s = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    return float(np.arctan2(s, c))


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class QuatPose:
    """Rigid object-to-camera transform with a non-unit quaternion rotation."""

    q: tuple
    t: tuple

    def __post_init__(self):
        q = tuple(float(v) for v in self.q)
        t = tuple(float(v) for v in self.t)
        if len(q) != 4 or len(t) != 3:
            raise ValueError("QuatPose needs a 4-vector q and a 3-vector t")
        if not np.linalg.norm(q) > 0:
            raise DegenerateInputError("quaternion must be nonzero")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_rotation(self.q)

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.t)

    @classmethod
    def from_rt(cls, R, t) -> "QuatPose":
        return cls(tuple(rotation_to_quat(R)), tuple(np.asarray(t, dtype=float)))

    @classmethod
    def identity(cls) -> "QuatPose":
        return cls((1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def canonical(self) -> "QuatPose":
        """Same pose with a unit quaternion whose scalar part is nonnegative."""
        return QuatPose(tuple(canonical_quat(self.q)), self.t)

    def transform(self, X) -> np.ndarray:
        """Map object points (..., 3) into the camera frame."""
        return np.asarray(X, dtype=float) @ self.R.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera center expressed in the object frame."""
        return -self.R.T @ self.translation


def _pinhole(Xc: np.ndarray, K: Intrinsics) -> np.ndarray:
    Z = Xc[..., 2]
    u = (K.fx * Xc[..., 0] + K.skew * Xc[..., 1]) / Z + K.cx
    v = K.fy * Xc[..., 1] / Z + K.cy
    return np.stack([u, v], axis=-1)


def project(X, pose: QuatPose, K: Intrinsics) -> np.ndarray:
    """Pinhole projection of one object point to pixel coordinates."""
    Xc = pose.transform(np.asarray(X, dtype=float).reshape(3))
    if not Xc[2] > 0:
        raise BehindCameraError(f"point has nonpositive depth {Xc[2]:.6g}")
    return _pinhole(Xc, K)


def project_points(X, pose: QuatPose, K: Intrinsics) -> np.ndarray:
    """Vectorized :func:`project` for an (n, 3) array."""
    Xc = pose.transform(X)
    if np.any(Xc[:, 2] <= 0):
        bad = np.flatnonzero(Xc[:, 2] <= 0)
        raise BehindCameraError(f"points {bad.tolist()} have nonpositive depth")
    return _pinhole(Xc, K)


def project_camera_points(Xc, K: Intrinsics) -> np.ndarray:
    """Project points already expressed in the camera frame (no depth check)."""
    return _pinhole(np.asarray(Xc, dtype=float), K)


@dataclass(frozen=True)
class OrthoCam:
    """Scaled orthographic camera ``x = c * R @ (X + t)`` with R a 2x3 row-orthonormal matrix."""

    R: np.ndarray
    t: np.ndarray
    c: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(2, 3)
        if not np.allclose(R @ R.T, np.eye(2), atol=1e-9):
            raise ValueError("OrthoCam.R must have orthonormal rows")
        if not self.c > 0:
            raise ValueError("OrthoCam.c must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "c", float(self.c))


def ortho_project(X, cam: OrthoCam) -> np.ndarray:
    """Scaled orthographic projection; accepts a single point or an (n, 3) array."""
    X = np.asarray(X, dtype=float)
    return cam.c * (X + cam.t) @ cam.R.T


@dataclass(frozen=True)
class Plane:
    """Plane ``n . X + d = 0``; the normal is not forced to unit length."""

    n: tuple
    d: float

    def __post_init__(self):
        object.__setattr__(self, "n", tuple(float(v) for v in self.n))
        object.__setattr__(self, "d", float(self.d))

    @property
    def normal(self) -> np.ndarray:
        return np.array(self.n)

    def to_dict(self) -> dict:
        return {"n": list(self.n), "d": self.d}

    @classmethod
    def from_dict(cls, d: dict) -> "Plane":
        return cls(tuple(d["n"]), d["d"])


def fit_plane(points) -> Plane:
    """Least-squares plane through points, unit normal (smallest principal axis)."""
    P = np.asarray(points, dtype=float)
    centroid = P.mean(axis=0)
    _, _, Vt = np.linalg.svd(P - centroid)
    n = Vt[-1]
    # Sign convention for determinism: largest-magnitude component positive.
    if n[np.argmax(np.abs(n))] < 0:
        n = -n
    return Plane(tuple(n), float(-n @ centroid))


@dataclass(frozen=True)
class QuadMesh:
    """Quad faces over a fixed set of keypoints.

    ``ground_parallel`` and ``rectangular`` are per-face flags consumed by
    the planarity energy.
    """

    vertex_count: int
    faces: tuple
    ground_parallel: tuple = field(default=())
    rectangular: tuple = field(default=())

    def __post_init__(self):
        faces = tuple(tuple(int(i) for i in f) for f in self.faces)
        for f in faces:
            if len(f) != 4:
                raise ValueError(f"face {f} is not a quad")
            if len(set(f)) != 4:
                raise ValueError(f"face {f} repeats a vertex")
            if any(i < 0 or i >= self.vertex_count for i in f):
                raise ValueError(f"face {f} indexes outside 0..{self.vertex_count - 1}")
        if len({tuple(sorted(f)) for f in faces}) != len(faces):
            raise ValueError("faces must be distinct")
        gp = tuple(bool(b) for b in self.ground_parallel) or (False,) * len(faces)
        rect = tuple(bool(b) for b in self.rectangular) or (False,) * len(faces)
        if len(gp) != len(faces) or len(rect) != len(faces):
            raise ValueError("face flag lists must match the face count")
        object.__setattr__(self, "faces", faces)
        object.__setattr__(self, "ground_parallel", gp)
        object.__setattr__(self, "rectangular", rect)

    @cached_property
    def edges(self) -> tuple:
        """Sorted unique undirected edges (i, j), i < j, from face boundaries."""
        out = set()
        for f in self.faces:
            for k in range(4):
                i, j = f[k], f[(k + 1) % 4]
                out.add((min(i, j), max(i, j)))
        return tuple(sorted(out))

    @cached_property
    def neighbors(self) -> tuple:
        nb = [set() for _ in range(self.vertex_count)]
        for i, j in self.edges:
            nb[i].add(j)
            nb[j].add(i)
        return tuple(tuple(sorted(s)) for s in nb)

    def adjacency(self) -> np.ndarray:
        A = np.zeros((self.vertex_count, self.vertex_count), dtype=bool)
        for i, j in self.edges:
            A[i, j] = A[j, i] = True
        return A

    def incident_faces(self, v: int) -> tuple:
        return tuple(k for k, f in enumerate(self.faces) if v in f)

    def triangles(self) -> np.ndarray:
        """Two triangles per quad, (2F, 3) vertex indices; face k -> rows 2k, 2k+1."""
        tris = []
        for a, b, c, d in self.faces:
            tris.append((a, b, c))
            tris.append((a, c, d))
        return np.array(tris, dtype=int).reshape(-1, 3)

    def relabel(self, perm) -> "QuadMesh":
        """Mesh with vertex ``i`` renamed ``perm[i]``."""
        perm = list(perm)
        return QuadMesh(self.vertex_count, tuple(tuple(perm[i] for i in f) for f in self.faces),
                        self.ground_parallel, self.rectangular)


def segments_hit_triangles(origin, targets, tri_vertices, eps: float = 1e-9) -> np.ndarray:
    """Möller–Trumbore test of segments ``origin -> targets[k]`` against triangles.

    Args:
        origin: (3,) segment start shared by all segments.
        targets: (n, 3) segment ends.
        tri_vertices: (m, 3, 3) triangle corners.

    Returns:
        (n, m) boolean array; True where the open segment crosses the triangle.
    """
    o = np.asarray(origin, dtype=float)
    D = np.asarray(targets, dtype=float) - o                       # (n, 3)
    v0 = tri_vertices[:, 0]
    e1 = tri_vertices[:, 1] - v0                                    # (m, 3)
    e2 = tri_vertices[:, 2] - v0
    P = np.cross(D[:, None, :], e2[None, :, :])                      # (n, m, 3)
    det = np.einsum("nmk,mk->nm", P, e1)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    T = o - v0                                                      # (m, 3)
    u = np.einsum("nmk,mk->nm", P, T) * inv
    Q = np.cross(T, e1)                                             # (m, 3)
    v = np.einsum("nk,mk->nm", D, Q) * inv
    s = np.einsum("mk,mk->m", e2, Q)[None, :] * inv
    return ok & (u >= -eps) & (v >= -eps) & (u + v <= 1 + eps) & (s > eps) & (s < 1 - eps)
