"""Shape-adjustment energies as stacked least-squares residuals.

Every term is a sum of squared residuals, so each residual block carries
its Jacobian with respect to the keypoints X (flattened, 3K columns) and
the face planes (flattened (n, d) per face, 4F columns).  Gradients are
``2 J^T r``.

Two plane conventions appear: face planes are ``{X : n . X + d = 0}``; the
medial plane used by the symmetry term is ``{X : n . X = d}``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Plane, QuadMesh, QuatPose, fit_plane
from .pose import observation_arrays, reprojection_residuals

TERMS = ("reproj", "planar", "sym", "dim", "lap")


@dataclass
class EnergyConfig:
    """Weights and solver controls for shape adjustment.

    ``eta`` weighs (reproj, planar, sym, dim, lap).  ``irls_rounds`` counts
    the weight-update/re-solve rounds after the first solve.
    """

    eta: tuple = (1.0, 0.1, 0.5, 0.05, 0.05)
    mu_f: float = 1.0
    mu_l: float = 1.0
    mu_w: float = 1.0
    mu_h: float = 1.0
    rect_weight: float = 0.1
    ground_normal: tuple | None = (0.0, 0.0, 1.0)
    irls_rounds: int = 5
    nls_max_iters: int = 100
    nls_tol: float = 1e-10
    normalized_laplacian: bool = True

    def __post_init__(self):
        self.eta = tuple(float(e) for e in self.eta)
        if len(self.eta) != 5:
            raise ValueError("eta needs five weights")
        vals = self.eta + (self.mu_f, self.mu_l, self.mu_w, self.mu_h, self.rect_weight)
        if min(vals) < 0:
            raise ValueError("energy weights must be nonnegative")
        if self.irls_rounds < 0:
            raise ValueError("irls_rounds must be nonnegative")
        if self.ground_normal is not None:
            g = tuple(float(v) for v in self.ground_normal)
            if len(g) != 3 or np.linalg.norm(g) == 0:
                raise ValueError("ground_normal must be a nonzero 3-vector")
            self.ground_normal = g


def planes_array(planes) -> np.ndarray:
    """(F, 4) array of (n, d) rows from Plane objects or an array."""
    if isinstance(planes, np.ndarray):
        return np.asarray(planes, dtype=float).reshape(-1, 4)
    return np.array([list(p.n) + [p.d] for p in planes], dtype=float).reshape(-1, 4)


def mesh_planes(shape, topology: QuadMesh) -> np.ndarray:
    """Least-squares plane of each face, as an (F, 4) array."""
    shape = np.asarray(shape, dtype=float)
    return planes_array([fit_plane(shape[list(f)]) for f in topology.faces])


# --------------------------------------------------------------------------
# Residual blocks.  Each returns r (m,), JX (m, 3K) and JP (m, 4F) or None.

def reproj_block(shape, pose: QuatPose, uv, w, K_cam: Intrinsics, active):
    X = np.asarray(shape, dtype=float)
    Kn = len(X)
    idx = np.flatnonzero(active)
    R = pose.R
    Xc = X[idx] @ R.T + pose.translation
    r, Jx = reprojection_residuals(Xc, uv[idx], w[idx], K_cam)
    JX = np.zeros((3 * idx.size, 3 * Kn))
    blocks = Jx @ R                                                     # (n, 3, 3)
    rows = 3 * np.arange(idx.size)[:, None] + np.arange(3)
    cols = 3 * idx[:, None] + np.arange(3)
    JX[rows[:, :, None], cols[:, None, :]] = blocks
    return r.reshape(-1), JX, None


class _FaceIndex:
    """Precomputed index arrays for the planarity term."""

    def __init__(self, topology: QuadMesh):
        faces = np.array(topology.faces, dtype=int).reshape(-1, 4)
        self.F = len(faces)
        self.K = topology.vertex_count
        self.face_of = np.repeat(np.arange(self.F), 4)
        self.vert = faces.reshape(-1)
        rect = np.flatnonzero(np.asarray(topology.rectangular, dtype=bool))
        f = faces[rect]
        self.corner = f.reshape(-1)
        self.prev = np.roll(f, 1, axis=1).reshape(-1)
        self.next = np.roll(f, -1, axis=1).reshape(-1)
        self.ground = np.flatnonzero(np.asarray(topology.ground_parallel, dtype=bool))


def planar_block(shape, planes, fi: _FaceIndex, mu_f, ground_normal, rect_weight):
    X = np.asarray(shape, dtype=float)
    P = planes_array(planes)
    F, K = fi.F, fi.K
    if len(P) != F:
        raise ValueError(f"expected {F} planes, got {len(P)}")
    n, d = P[:, :3], P[:, 3]
    rs, jx, jp = [], [], []

    # Vertex-on-plane residuals.
    m = fi.vert.size
    nf = n[fi.face_of]
    Xv = X[fi.vert]
    rs.append((nf * Xv).sum(1) + d[fi.face_of])
    JX = np.zeros((m, 3 * K))
    JX[np.arange(m)[:, None], 3 * fi.vert[:, None] + np.arange(3)] = nf
    JP = np.zeros((m, 4 * F))
    JP[np.arange(m)[:, None], 4 * fi.face_of[:, None] + np.arange(3)] = Xv
    JP[np.arange(m), 4 * fi.face_of + 3] = 1.0
    jx.append(JX)
    jp.append(JP)

    # Unit-normal penalty.
    s = np.sqrt(mu_f)
    rs.append(s * (1.0 - (n * n).sum(1)))
    JP = np.zeros((F, 4 * F))
    JP[np.arange(F)[:, None], 4 * np.arange(F)[:, None] + np.arange(3)] = -2.0 * s * n
    jx.append(np.zeros((F, 3 * K)))
    jp.append(JP)

    # Right angles at the corners of rectangular faces.
    if fi.corner.size and rect_weight > 0:
        s = np.sqrt(rect_weight)
        e1 = X[fi.prev] - X[fi.corner]
        e2 = X[fi.next] - X[fi.corner]
        l1 = np.linalg.norm(e1, axis=1)
        l2 = np.linalg.norm(e2, axis=1)
        c = (e1 * e2).sum(1) / (l1 * l2)
        g1 = e2 / (l1 * l2)[:, None] - c[:, None] * e1 / (l1 ** 2)[:, None]
        g2 = e1 / (l1 * l2)[:, None] - c[:, None] * e2 / (l2 ** 2)[:, None]
        mc = c.size
        JX = np.zeros((mc, 3 * K))
        rows = np.arange(mc)[:, None]
        off = np.arange(3)
        JX[rows, 3 * fi.prev[:, None] + off] += s * g1
        JX[rows, 3 * fi.next[:, None] + off] += s * g2
        JX[rows, 3 * fi.corner[:, None] + off] -= s * (g1 + g2)
        rs.append(s * c)
        jx.append(JX)
        jp.append(np.zeros((mc, 4 * F)))

    # Normals parallel to the ground normal: residual (n x g) / |n|.
    if ground_normal is not None and fi.ground.size:
        g = np.asarray(ground_normal, dtype=float)
        g = g / np.linalg.norm(g)
        gx = np.array([[0.0, -g[2], g[1]], [g[2], 0.0, -g[0]], [-g[1], g[0], 0.0]])
        for f in fi.ground:
            nn = n[f]
            ln = np.linalg.norm(nn)
            u = np.cross(nn, g)
            rs.append(u / ln)
            JP = np.zeros((3, 4 * F))
            JP[:, 4 * f:4 * f + 3] = -gx / ln - np.outer(u, nn) / ln ** 3
            jx.append(np.zeros((3, 3 * K)))
            jp.append(JP)
    return np.concatenate(rs), np.vstack(jx), np.vstack(jp)


def sym_block(shape, pairs, medial: Plane):
    X = np.asarray(shape, dtype=float)
    K = len(X)
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    n = np.asarray(medial.n, dtype=float)
    d = float(medial.d)
    H = np.eye(3) - 2.0 * np.outer(n, n)
    L, Rr = pairs[:, 0], pairs[:, 1]
    r = X[Rr] @ H.T + 2.0 * d * n - X[L]
    m = len(pairs)
    JX = np.zeros((3 * m, 3 * K))
    rows = 3 * np.arange(m)[:, None] + np.arange(3)
    JX[rows[:, :, None], (3 * Rr[:, None] + np.arange(3))[:, None, :]] = H
    JX[rows[:, :, None], (3 * L[:, None] + np.arange(3))[:, None, :]] = -np.eye(3)
    return r.reshape(-1), JX, None


def dim_block(shape, dim_priors, mu_l, mu_w, mu_h):
    X = np.asarray(shape, dtype=float)
    K = len(X)
    r = np.zeros(3)
    JX = np.zeros((3, 3 * K))
    for row, (axis, mu, prior) in enumerate(zip((1, 0, 2), (mu_l, mu_w, mu_h), dim_priors)):
        s = np.sqrt(mu)
        c = X[:, axis]
        top, bot = c.max(), c.min()
        r[row] = s * (top - bot - prior)
        # Symmetric shapes tie at the extremes (left/right pairs); splitting
        # the derivative evenly over ties is the central-difference value.
        tol = 1e-12 * max(1.0, top - bot)
        hi = np.flatnonzero(c >= top - tol)
        lo = np.flatnonzero(c <= bot + tol)
        JX[row, 3 * hi + axis] += s / hi.size
        JX[row, 3 * lo + axis] -= s / lo.size
    return r, JX, None


def lap_block(shape, adjacency, normalized: bool = True):
    X = np.asarray(shape, dtype=float)
    K = len(X)
    A = np.asarray(adjacency, dtype=bool)
    diff = X[:, None, :] - X[None, :, :]                                # X_i - X_j
    E = np.exp(-(diff ** 2).sum(-1)) * A
    W = E / E.sum(1, keepdims=True) if normalized else E
    m = W @ X
    r = X - m
    J = np.zeros((K, K, 3, 3))
    if normalized:
        # dr_i/dX_l = -w_il I - 2 w_il (X_l - m_i)(X_i - X_l)^T
        J -= W[:, :, None, None] * np.eye(3)
        J -= 2.0 * W[:, :, None, None] * np.einsum("ila,ilb->ilab", X[None, :, :] - m[:, None, :], diff)
        # dr_i/dX_i = I + 2 (m_i m_i^T - sum_j w_ij X_j X_j^T)
        diag = np.eye(3) + 2.0 * (np.einsum("ia,ib->iab", m, m) - np.einsum("ij,ja,jb->iab", W, X, X))
    else:
        J -= W[:, :, None, None] * np.eye(3)
        J -= 2.0 * W[:, :, None, None] * np.einsum("la,ilb->ilab", X, diff)
        diag = np.eye(3) + 2.0 * np.einsum("ij,ja,ijb->iab", W, X, diff)
    J[np.arange(K), np.arange(K)] = diag
    return r.reshape(-1), J.transpose(0, 2, 1, 3).reshape(3 * K, 3 * K), None


# --------------------------------------------------------------------------
# Standalone term values.

def _sq(block) -> float:
    r = block[0]
    return float(r @ r)


def e_reproj(shape, pose: QuatPose, obs, K_cam: Intrinsics, weights) -> float:
    """sum_i w_i^2 |project(X_i) - x_i|^2 over visible observed keypoints, plus a depth barrier."""
    uv, _, vis, present = observation_arrays(obs, len(shape))
    active = vis & present
    w = np.asarray(weights, dtype=float)
    return _sq(reproj_block(shape, pose, np.where(np.isfinite(uv), uv, 0.0), w, K_cam, active))


def e_planar(shape, topology: QuadMesh, planes, mu_f: float = 1.0,
             ground_normal=(0.0, 0.0, 1.0), rect_weight: float = 0.1) -> float:
    """Point-to-plane, unit-normal, rectangularity and ground-parallel penalties."""
    return _sq(planar_block(shape, planes, _FaceIndex(topology), mu_f, ground_normal, rect_weight))


def e_sym(shape, pairs, medial: Plane) -> float:
    """sum over (left, right) pairs of |reflect(X_r) - X_l|^2 across {n . X = d}."""
    return _sq(sym_block(shape, pairs, medial))


def e_dim(shape, dim_priors, mu_l: float = 1.0, mu_w: float = 1.0, mu_h: float = 1.0) -> float:
    return _sq(dim_block(shape, dim_priors, mu_l, mu_w, mu_h))


def e_lap(shape, topology: QuadMesh, normalized: bool = True) -> float:
    """sum_i |X_i - sum_j w_ij X_j|^2 with Gaussian neighbor weights."""
    return _sq(lap_block(shape, topology.adjacency(), normalized))


# --------------------------------------------------------------------------
# Full objective over (lambda, planes).

@dataclass
class ShapeState:
    lam: np.ndarray
    planes: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=float).reshape(-1)
        self.planes = planes_array(self.planes)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.lam, self.planes.ravel()])

    @classmethod
    def from_vector(cls, v, n_basis: int) -> "ShapeState":
        return cls(v[:n_basis], v[n_basis:].reshape(-1, 4))


@dataclass
class EnergyModel:
    """E_total for one instance with the pose and keypoint weights held fixed."""

    prior: object
    obs: list
    pose: QuatPose
    K_cam: Intrinsics
    weights: np.ndarray
    config: EnergyConfig = field(default_factory=EnergyConfig)

    def __post_init__(self):
        Kn = self.prior.n_keypoints
        uv, _, vis, present = observation_arrays(self.obs, Kn)
        self.uv = np.where(np.isfinite(uv), uv, 0.0)
        self.active = vis & present
        self.weights = np.asarray(self.weights, dtype=float).reshape(Kn)
        self._faces = _FaceIndex(self.prior.topology)
        self._adj = self.prior.topology.adjacency()
        self._B = self.prior.basis_matrix

    def shape(self, lam) -> np.ndarray:
        return self.prior.mean + np.tensordot(np.asarray(lam, dtype=float), self.prior.basis, axes=1)

    def blocks(self, X, planes, which=TERMS):
        """Unscaled residual blocks by term name, evaluated at keypoints X."""
        c = self.config
        out = {}
        if "reproj" in which:
            out["reproj"] = reproj_block(X, self.pose, self.uv, self.weights, self.K_cam, self.active)
        if "planar" in which:
            out["planar"] = planar_block(X, planes, self._faces, c.mu_f, c.ground_normal, c.rect_weight)
        if "sym" in which:
            out["sym"] = sym_block(X, self.prior.symmetry_pairs, self.prior.medial_plane)
        if "dim" in which:
            out["dim"] = dim_block(X, self.prior.dim_priors, c.mu_l, c.mu_w, c.mu_h)
        if "lap" in which:
            out["lap"] = lap_block(X, self._adj, c.normalized_laplacian)
        return out

    def breakdown(self, state: ShapeState) -> dict:
        """Unweighted term values plus the eta-weighted total."""
        X = self.shape(state.lam)
        vals = {k: _sq(b) for k, b in self.blocks(X, state.planes).items()}
        vals["total"] = float(sum(e * vals[k] for e, k in zip(self.config.eta, TERMS)))
        return vals

    def residuals(self, v):
        """Stacked sqrt(eta)-scaled residuals and Jacobian w.r.t. the state vector."""
        N = self.prior.n_basis
        state = ShapeState.from_vector(v, N)
        X = self.shape(state.lam)
        active = tuple(k for e, k in zip(self.config.eta, TERMS) if e > 0)
        if not active:
            return np.zeros(0), np.zeros((0, v.size))
        rs, js = [], []
        for k, (r, JX, JP) in self.blocks(X, state.planes, active).items():
            s = np.sqrt(self.config.eta[TERMS.index(k)])
            J = np.empty((r.size, v.size))
            J[:, :N] = JX @ self._B
            J[:, N:] = 0.0 if JP is None else JP
            rs.append(s * r)
            js.append(s * J)
        return np.concatenate(rs), np.vstack(js)

    def total(self, state: ShapeState):
        """(E_total, gradient w.r.t. (lambda, planes flattened))."""
        r, J = self.residuals(state.vector)
        return float(r @ r), 2.0 * (J.T @ r) if r.size else np.zeros(state.vector.size)


def e_total(model: EnergyModel, state: ShapeState):
    """E_total and its gradient for ``state`` under ``model``."""
    return model.total(state)


def term_gradient(name: str, model: EnergyModel, X, planes):
    """Value and gradient (w.r.t. X (K, 3) and planes (F, 4)) of one unweighted term."""
    r, JX, JP = model.blocks(np.asarray(X, dtype=float), planes_array(planes), (name,))[name]
    gX = (2.0 * JX.T @ r).reshape(-1, 3)
    F = len(planes_array(planes))
    gP = np.zeros((F, 4)) if JP is None else (2.0 * JP.T @ r).reshape(F, 4)
    return float(r @ r), gX, gP
