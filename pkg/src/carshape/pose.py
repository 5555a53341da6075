"""Robust perspective pose estimation: weighted PnP inside an IRLS loop.

The weighted PnP problem is solved by damped least squares over a non-unit
quaternion and a translation, started from the 24 rotations of the cube
group (plus an optional caller-supplied pose) and keeping the cheapest
result.  All starts are refined together as one batched problem.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import (DegenerateInputError, Intrinsics, QuadMesh, QuatPose,
                       canonical_quat, rotation_to_quat,
                       segments_hit_triangles)

# Depth below which a point is treated as behind the camera, and the slope
# (pixels per meter) of the penalty that pushes it back in front.
MIN_DEPTH = 1e-2
DEPTH_BARRIER = 1e6


class TooFewPointsError(ValueError):
    pass


@dataclass(frozen=True)
class KeypointObservation:
    """One detected keypoint: pixel location, detector confidence, visibility flag."""

    index: int
    uv: tuple
    w_cnn: float = 1.0
    visible: bool = True

    def __post_init__(self):
        if not 0.0 <= self.w_cnn <= 1.0:
            raise ValueError(f"w_cnn must lie in [0, 1], got {self.w_cnn}")
        uv = tuple(float(v) for v in self.uv)
        if len(uv) != 2:
            raise ValueError("uv must have two coordinates")
        if self.visible and not np.all(np.isfinite(uv)):
            raise ValueError("visible keypoints need finite coordinates")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "index", int(self.index))


@dataclass
class IrlsConfig:
    """IRLS hyperparameters.

    ``error_floor`` (pixels) bounds the denominator used to normalize
    reprojection errors so that near-zero residuals do not get amplified.
    ``literal_update`` feeds the normalized error itself into the update
    instead of ``1 - error`` (weights then grow with error).
    """

    mu0: float = 0.7
    mu1: float = 0.2
    mu2: float = 0.7
    max_iters: int = 5
    weight_floor: float = 1e-3
    v_occ: float = 0.1
    error_floor: float = 1.0
    literal_update: bool = False
    recompute_visibility: bool = True

    def __post_init__(self):
        for name in ("mu0", "mu1", "mu2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not 0.0 < self.weight_floor < 1.0:
            raise ValueError("weight_floor must lie in (0, 1)")


@dataclass
class PoseResult:
    pose: QuatPose
    weights: np.ndarray
    residuals: np.ndarray
    iterations: int
    cost: float
    weight_history: list = field(default_factory=list)


def observation_arrays(obs, K: int):
    """Dense (uv, w_cnn, visible, present) arrays indexed by keypoint id."""
    uv = np.full((K, 2), np.nan)
    w = np.zeros(K)
    vis = np.zeros(K, dtype=bool)
    for o in obs:
        if not 0 <= o.index < K:
            raise ValueError(f"keypoint index {o.index} outside 0..{K - 1}")
        uv[o.index] = o.uv
        w[o.index] = o.w_cnn
        vis[o.index] = o.visible
    present = np.all(np.isfinite(uv), axis=1)
    return uv, w, vis, present


# --------------------------------------------------------------------------
# Reprojection residuals shared with the shape energy.

def reprojection_residuals(Xc, uv, w, K: Intrinsics, jacobian: bool = True):
    """Weighted pixel residuals and their derivative w.r.t. camera-frame points.

    Args:
        Xc: (..., n, 3) camera-frame points.
        uv: (n, 2) observed pixels.
        w: (n,) weights.

    Returns:
        r: (..., n, 3); the first two entries are ``w * (proj - uv)``, the
        third is a depth penalty that is zero in front of the camera.
        J: (..., n, 3, 3) derivative of r with respect to Xc, or None when
        ``jacobian`` is False.
    """
    X, Y, Z = Xc[..., 0], Xc[..., 1], Xc[..., 2]
    behind = Z < MIN_DEPTH
    Ze = np.where(behind, MIN_DEPTH, Z)
    pu = (K.fx * X + K.skew * Y) / Ze + K.cx
    pv = K.fy * Y / Ze + K.cy
    r = np.empty(Xc.shape)
    r[..., 0] = w * (pu - uv[:, 0])
    r[..., 1] = w * (pv - uv[:, 1])
    r[..., 2] = w * DEPTH_BARRIER * np.where(behind, MIN_DEPTH - Z, 0.0)
    if not jacobian:
        return r, None
    J = np.zeros(Xc.shape + (3,))
    inv = 1.0 / Ze
    dz = np.where(behind, 0.0, 1.0)
    J[..., 0, 0] = w * K.fx * inv
    J[..., 0, 1] = w * K.skew * inv
    J[..., 0, 2] = -w * (K.fx * X + K.skew * Y) * inv * inv * dz
    J[..., 1, 1] = w * K.fy * inv
    J[..., 1, 2] = -w * K.fy * Y * inv * inv * dz
    J[..., 2, 2] = -w * DEPTH_BARRIER * np.where(behind, 1.0, 0.0)
    return r, J


# --------------------------------------------------------------------------
# Quaternion algebra, batched over starts.

def _rot_unnormalized(q):
    a, b, c, d = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([
        np.stack([a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)], -1),
        np.stack([2 * (b * c + a * d), a * a - b * b + c * c - d * d, 2 * (c * d - a * b)], -1),
        np.stack([2 * (b * d - a * c), 2 * (c * d + a * b), a * a - b * b - c * c + d * d], -1),
    ], axis=1)


def _quat_tensor():
    """Constant C with R~(q)_ab = sum_kl C[a, b, k, l] q_k q_l (symmetric in k, l)."""
    C = np.zeros((3, 3, 4, 4))
    eye = np.eye(4)
    for k in range(4):
        for l in range(4):
            e = eye[k] + eye[l]
            C[:, :, k, l] = 0.5 * (_rot_unnormalized(e[None])[0]
                                   - _rot_unnormalized(eye[k][None])[0]
                                   - _rot_unnormalized(eye[l][None])[0])
            if k == l:
                C[:, :, k, l] = _rot_unnormalized(eye[k][None])[0]
    return C


_QC = _quat_tensor()


def cube_rotations() -> np.ndarray:
    """The 24 proper rotations mapping the coordinate axes onto themselves."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1.0, -1.0), repeat=3):
            R = np.zeros((3, 3))
            for row, (col, s) in enumerate(zip(perm, signs)):
                R[row, col] = s
            if np.linalg.det(R) > 0:
                out.append(R)
    return np.array(out)


def _normalized_coords(uv, K: Intrinsics):
    v = (uv[:, 1] - K.cy) / K.fy
    u = (uv[:, 0] - K.cx - K.skew * v) / K.fx
    return u, v


def _seed_translation(R, X, uv, w, K: Intrinsics):
    """Weighted algebraic least-squares translation for a fixed rotation."""
    u, v = _normalized_coords(uv, K)
    RX = X @ R.T
    A = np.zeros((2 * len(X), 3))
    b = np.zeros(2 * len(X))
    A[0::2, 0] = w
    A[0::2, 2] = -w * u
    b[0::2] = w * (u * RX[:, 2] - RX[:, 0])
    A[1::2, 1] = w
    A[1::2, 2] = -w * v
    b[1::2] = w * (v * RX[:, 2] - RX[:, 1])
    t, *_ = np.linalg.lstsq(A, b, rcond=None)
    if not np.all((RX[:, 2] + t[2])[w > 0] > MIN_DEPTH):
        # Fall back on a depth from the ratio of metric to pixel spread.
        sel = w > 0
        spread3 = np.sqrt(((X[sel] - X[sel].mean(0)) ** 2).sum(1).mean())
        spread2 = np.sqrt(((uv[sel] - uv[sel].mean(0)) ** 2).sum(1).mean())
        z0 = max(K.fx, K.fy) * spread3 / max(spread2, 1e-9)
        z0 = max(z0, spread3 * 2.0 + MIN_DEPTH)
        uc, vc = u[sel].mean(), v[sel].mean()
        t = np.array([uc * z0, vc * z0, z0]) - R @ X[sel].mean(0)
        t[2] = max(t[2], -RX[sel, 2].min() + MIN_DEPTH + spread3)
    return t


def _point_tensor(X):
    # M[n, a, k, l] = sum_b C[a, b, k, l] X[n, b]
    return np.einsum("abkl,nb->nakl", _QC, X)


def _batched_cost(q, t, X, uv, w, K):
    R = _rot_unnormalized(q) / (q * q).sum(1)[:, None, None]
    Xc = np.einsum("sab,nb->sna", R, X) + t[:, None, :]
    r, _ = reprojection_residuals(Xc, uv, w, K, jacobian=False)
    return (r * r).sum(axis=(1, 2))


def _lm_run(q, t, cost, damp, active, M, X, uv, w, K, max_iters, tol=1e-15):
    """Batched damped Gauss-Newton on the rows flagged ``active`` (in place)."""
    eye = np.eye(7)
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        qa, ta = q[idx], t[idx]
        n2 = (qa * qa).sum(1)
        Mq = np.einsum("nakl,sl->snak", M, qa)                      # half of dXc~/dq
        Xn = np.einsum("snak,sk->sna", Mq, qa)                      # R~ X
        Xc = Xn / n2[:, None, None] + ta[:, None, :]
        r, Jx = reprojection_residuals(Xc, uv, w, K)
        dXq = 2.0 * (Mq / n2[:, None, None, None]
                     - Xn[..., None] * qa[:, None, None, :] / (n2 ** 2)[:, None, None, None])
        J = np.concatenate([np.einsum("snij,snjk->snik", Jx, dXq), Jx], axis=3)
        s_ = idx.size
        J = J.reshape(s_, -1, 7)
        rv = r.reshape(s_, -1)
        JtJ = np.einsum("sik,sil->skl", J, J)
        g = np.einsum("sik,si->sk", J, rv)
        diag = np.diagonal(JtJ, axis1=1, axis2=2)
        A = JtJ + damp[idx][:, None, None] * (diag[:, :, None] * eye
                                              + 1e-12 * diag.max(1)[:, None, None] * eye)
        step = -np.linalg.solve(A, g[..., None])[..., 0]
        qn = qa + step[:, :4]
        qn = qn / np.linalg.norm(qn, axis=1, keepdims=True)
        tn = ta + step[:, 4:]
        new = _batched_cost(qn, tn, X, uv, w, K)
        old = cost[idx]
        ok = new < old
        small = np.linalg.norm(step, axis=1) <= 1e-12 * (1.0 + np.linalg.norm(tn, axis=1))
        done = (ok & ((old - new) <= tol * old)) | small | (old <= 1e-30)
        q[idx[ok]] = qn[ok]
        t[idx[ok]] = tn[ok]
        cost[idx[ok]] = new[ok]
        damp[idx] = np.where(ok, np.maximum(damp[idx] * 0.2, 1e-12), damp[idx] * 8.0)
        active[idx[done | (damp[idx] > 1e12)]] = False


def _batched_lm(q, t, X, uv, w, K, explore_iters=8, keep=3, max_iters=100):
    """Refine every start briefly, then finish the ``keep`` cheapest ones."""
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    M = _point_tensor(X)
    cost = _batched_cost(q, t, X, uv, w, K)
    damp = np.full(len(q), 1e-4)
    active = np.ones(len(q), dtype=bool)
    _lm_run(q, t, cost, damp, active, M, X, uv, w, K, explore_iters)
    order = np.lexsort((np.arange(len(cost)), cost))
    finish = np.zeros(len(q), dtype=bool)
    finish[order[:keep]] = True
    active &= finish
    _lm_run(q, t, cost, damp, active, M, X, uv, w, K, max_iters)
    return q, t, cost


def _check_configuration(X, w, weight_floor):
    sel = w > weight_floor
    if sel.sum() < 4:
        raise TooFewPointsError(f"need at least 4 weighted keypoints, got {int(sel.sum())}")
    P = X[sel] - X[sel].mean(axis=0)
    sv = np.linalg.svd(P, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1e-300):
        raise DegenerateInputError("keypoints are collinear")


def pnp_weighted(X, obs, K_cam: Intrinsics, W, init: QuatPose | None = None,
                 weight_floor: float = 1e-3, seeds=None) -> QuatPose:
    """Pose minimizing sum_i W_i^2 |project(X_i) - x_i|^2.

    Args:
        X: (K, 3) object points.
        obs: keypoint observations (index into X).
        K_cam: intrinsics.
        W: (K,) nonnegative weights; keypoints without a finite observation
            are ignored.
        init: optional starting pose, refined alongside the fixed seeds.
        seeds: optional (S, 3, 3) rotation seeds replacing the cube group.

    Raises:
        TooFewPointsError: fewer than 4 weights above ``weight_floor``.
        DegenerateInputError: the weighted points are collinear.
    """
    X = np.asarray(X, dtype=float)
    uv, _, _, present = observation_arrays(obs, len(X))
    w = np.where(present, np.asarray(W, dtype=float), 0.0)
    _check_configuration(X, w, weight_floor)
    sel = w > 0
    Xs, uvs, ws = X[sel], uv[sel], w[sel]
    rots = cube_rotations() if seeds is None else np.asarray(seeds).reshape(-1, 3, 3)
    if len(rots) == 0 and init is None:
        raise ValueError("no starting rotation: give seeds or an init pose")
    qs = [rotation_to_quat(R) for R in rots]
    ts = [_seed_translation(R, Xs, uvs, ws, K_cam) for R in rots]
    if init is not None:
        qs.append(np.asarray(init.q, dtype=float))
        ts.append(np.asarray(init.t, dtype=float))
    # Steps are accepted only on decrease, so the init start never ends worse.
    q, t, cost = _batched_lm(np.array(qs), np.array(ts), Xs, uvs, ws, K_cam)
    best = int(np.lexsort((np.arange(len(cost)), cost))[0])
    return QuatPose(tuple(canonical_quat(q[best])), tuple(t[best]))


def weighted_cost(X, obs, K_cam: Intrinsics, W, pose: QuatPose) -> float:
    X = np.asarray(X, dtype=float)
    uv, _, _, present = observation_arrays(obs, len(X))
    w = np.where(present, np.asarray(W, dtype=float), 0.0)
    sel = w > 0
    return float(_batched_cost(np.asarray(pose.q, dtype=float)[None], np.asarray(pose.t)[None],
                               X[sel], uv[sel], w[sel], K_cam)[0])


# --------------------------------------------------------------------------
# Weights.

def weight_init(w_cnn, w_vis, mu0: float, weight_floor: float = 1e-3):
    """Initial weight ``mu0 * w_cnn + (1 - mu0) * w_vis`` clamped to [floor, 1]."""
    w = mu0 * np.asarray(w_cnn, dtype=float) + (1.0 - mu0) * np.asarray(w_vis, dtype=float)
    w = np.clip(w, weight_floor, 1.0)
    return float(w) if w.ndim == 0 else w


def weight_update(w_prev, e, w_vis, mu1: float, mu2: float, weight_floor: float = 1e-3):
    """``mu1 * w_prev + (1 - mu1) * (mu2 * e + (1 - mu2) * w_vis)`` clamped to [floor, 1].

    ``e`` is whatever per-keypoint score the caller feeds in; the IRLS loop
    passes ``1 - normalized error`` so that weights fall as errors grow.
    """
    w = (mu1 * np.asarray(w_prev, dtype=float)
         + (1.0 - mu1) * (mu2 * np.asarray(e, dtype=float) + (1.0 - mu2) * np.asarray(w_vis, dtype=float)))
    w = np.clip(w, weight_floor, 1.0)
    return float(w) if w.ndim == 0 else w


def visibility_prior(shape, topology: QuadMesh, pose: QuatPose, v_occ: float = 0.1) -> np.ndarray:
    """1 for keypoints whose line of sight crosses no mesh face, ``v_occ`` otherwise.

    Faces incident to the keypoint itself are ignored; keypoints behind the
    camera get ``v_occ``.  The test runs in the camera frame with each quad
    split into two triangles.
    """
    Xc = pose.transform(np.asarray(shape, dtype=float))
    tris = topology.triangles()
    hits = segments_hit_triangles(np.zeros(3), Xc, Xc[tris])          # (K, 2F)
    K = len(Xc)
    incident = np.zeros((K, len(tris)), dtype=bool)
    for f, face in enumerate(topology.faces):
        for v in face:
            incident[v, 2 * f] = incident[v, 2 * f + 1] = True
    occluded = (hits & ~incident).any(axis=1) | (Xc[:, 2] <= 0)
    return np.where(occluded, v_occ, 1.0)


# --------------------------------------------------------------------------
# IRLS.

_NO_SEEDS = np.zeros((0, 3, 3))

def _errors(X, uv, pose: QuatPose, K: Intrinsics, active):
    Xc = pose.transform(X)
    r, _ = reprojection_residuals(Xc, np.where(np.isfinite(uv), uv, 0.0), np.ones(len(X)), K)
    err = np.sqrt((r ** 2).sum(axis=1))
    return np.where(active, err, np.nan)


def normalized_errors(err, active, error_floor: float) -> np.ndarray:
    """Errors divided by the largest active error (at least ``error_floor``), in [0, 1]."""
    e = np.where(active, err, 0.0)
    denom = max(float(e.max(initial=0.0)), error_floor)
    return np.clip(e / denom, 0.0, 1.0)


def irls_pose(prior, obs, K_cam: Intrinsics, config: IrlsConfig | None = None,
              init: QuatPose | None = None) -> PoseResult:
    """Weighted PnP with iteratively re-weighted keypoints.

    Keypoints with a zero detector confidence or no coordinates never enter
    the cost.  Initial weights mix detector confidence with a visibility
    prior ray-cast at ``init`` (all ones without an init).  The first solve
    uses the full multi-start; each of the ``config.max_iters`` rounds then
    re-weights from normalized reprojection errors and the visibility at the
    current pose and re-solves starting from the current pose only.
    """
    config = config or IrlsConfig()
    X = prior.mean
    Kn = len(X)
    uv, w_cnn, _, present = observation_arrays(obs, Kn)
    active = present & (w_cnn > 0)
    if active.sum() < 4:
        raise TooFewPointsError(f"need at least 4 usable keypoints, got {int(active.sum())}")
    topo = prior.topology
    w_vis = visibility_prior(X, topo, init, config.v_occ) if init is not None else np.ones(Kn)
    w = np.where(active, weight_init(w_cnn, w_vis, config.mu0, config.weight_floor), 0.0)
    pose = pnp_weighted(X, obs, K_cam, w, init, config.weight_floor)
    history = [w.copy()]
    for _ in range(config.max_iters):
        err = _errors(X, uv, pose, K_cam, active)
        e = normalized_errors(err, active, config.error_floor)
        if config.recompute_visibility:
            w_vis = visibility_prior(X, topo, pose, config.v_occ)
        score = e if config.literal_update else 1.0 - e
        w = np.where(active, weight_update(w, score, w_vis, config.mu1, config.mu2,
                                           config.weight_floor), 0.0)
        pose = pnp_weighted(X, obs, K_cam, w, pose, config.weight_floor, seeds=_NO_SEEDS)
        history.append(w.copy())
    residuals = _errors(X, uv, pose, K_cam, present)
    cost = weighted_cost(X, obs, K_cam, w, pose)
    return PoseResult(pose.canonical(), w, residuals, config.max_iters, cost, history)
