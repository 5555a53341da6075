"""Learning a low-rank 3D shape prior from 2D keypoint annotations.

Every instance ``m`` is modelled as a scaled orthographic view of a shape
drawn from a linear Gaussian model::

    s_im = c_m R_m (S_i + t_m) + noise,   S = mean + sum_j lambda_jm V_j,
    lambda_jm ~ N(0, 1),  noise ~ N(0, sigma2 I)

and the likelihood of the visible keypoints is maximized with EM.  The
E-step uses only the observed rows of each instance (missing keypoints are
integrated out and can be imputed afterwards from the posterior); the M-step
updates the shape, the cameras and the noise level block by block against
the same expected complete-data log-likelihood, so the observed-data
likelihood never decreases.  Deformation modes are introduced one at a
time, each at a scale that cannot lower the likelihood, so modes the data
do not need stay near zero instead of soaking up depth ambiguity.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .category import Category
from .geometry import OrthoCam, Plane, axis_angle_rotation

logger = logging.getLogger(__name__)


class RankDeficiencyWarning(UserWarning):
    """The annotations do not constrain the 3D structure well."""


@dataclass
class AnnotationSet:
    """2D keypoint annotations of M instances over the same K keypoints.

    ``coords`` is (M, K, 2) pixels, NaN where a keypoint is missing;
    ``visible`` is the (M, K) mask of annotated keypoints.
    """

    coords: np.ndarray
    visible: np.ndarray
    keypoint_names: tuple
    ids: tuple = ()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        self.visible = np.asarray(self.visible, dtype=bool)
        M, K = self.visible.shape
        if self.coords.shape != (M, K, 2):
            raise ValueError(f"coords has shape {self.coords.shape}, expected {(M, K, 2)}")
        if len(self.keypoint_names) != K:
            raise ValueError("keypoint_names does not match the keypoint count")
        if not np.all(np.isfinite(self.coords[self.visible])):
            raise ValueError("visible keypoints must have finite coordinates")
        self.ids = tuple(self.ids) if self.ids else tuple(str(m) for m in range(M))
        if len(self.ids) != M:
            raise ValueError("ids does not match the instance count")

    @property
    def n_instances(self) -> int:
        return self.visible.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.visible.shape[1]


@dataclass(frozen=True)
class LatentCoeffs:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("latent coefficients must be finite")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass
class ShapePrior:
    """Mean shape plus deformation basis for one object category.

    ``basis`` holds N mutually orthogonal K x 3 modes scaled so that unit
    coefficients are one standard deviation; ``eigenvalues[j]`` equals the
    squared norm of mode j.  The unit-norm directions are available as
    :attr:`directions`.  The medial plane is stored as ``{X : n . X = d}``.
    """

    mean: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    sigma2: float
    category: Category
    medial_plane: Plane
    dim_priors: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        K = self.mean.shape[0]
        self.basis = np.asarray(self.basis, dtype=float).reshape(-1, K, 3)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=float).reshape(-1)
        self.dim_priors = np.asarray(self.dim_priors, dtype=float).reshape(3)
        if self.mean.shape != (K, 3) or K != self.category.size:
            raise ValueError("mean shape does not match the category keypoints")
        if self.eigenvalues.size != self.basis.shape[0]:
            raise ValueError("one eigenvalue per basis mode is required")

    @property
    def n_basis(self) -> int:
        return self.basis.shape[0]

    @property
    def n_keypoints(self) -> int:
        return self.mean.shape[0]

    @property
    def topology(self):
        return self.category.topology

    @property
    def symmetry_pairs(self):
        return self.category.symmetry_pairs

    @property
    def keypoint_names(self):
        return self.category.keypoint_names

    @property
    def basis_matrix(self) -> np.ndarray:
        """(3K, N) matrix whose columns are the flattened modes."""
        return self.basis.reshape(self.n_basis, -1).T

    @property
    def directions(self) -> np.ndarray:
        norms = np.sqrt(np.maximum(self.eigenvalues, 0.0))
        safe = np.where(norms > 0, norms, 1.0)
        return self.basis / safe[:, None, None]

    def truncated(self, n: int) -> "ShapePrior":
        return ShapePrior(self.mean, self.basis[:n], self.eigenvalues[:n], self.sigma2,
                          self.category, self.medial_plane, self.dim_priors)


def instantiate(prior: ShapePrior, coeffs) -> np.ndarray:
    """Shape ``mean + sum_j coeffs[j] * basis[j]`` as a (K, 3) array."""
    lam = coeffs.values if isinstance(coeffs, LatentCoeffs) else np.asarray(coeffs, dtype=float)
    lam = lam.reshape(-1)
    if lam.size != prior.n_basis:
        raise ValueError(f"expected {prior.n_basis} coefficients, got {lam.size}")
    return prior.mean + np.tensordot(lam, prior.basis, axes=1)


def variance_explained(prior: ShapePrior, n: int) -> float:
    """Fraction of the total deformation variance carried by the first n modes."""
    if not 1 <= n <= prior.n_basis:
        raise ValueError(f"n must be in 1..{prior.n_basis}")
    ev = np.maximum(prior.eigenvalues, 0.0)
    total = ev.sum()
    if total <= 0:
        return 1.0
    return float(min(1.0, ev[:n].sum() / total))


def shape_extents(shape) -> np.ndarray:
    """(length, width, height) = axis-aligned extents along y, x, z."""
    S = np.asarray(shape)
    ext = S.max(axis=-2) - S.min(axis=-2)
    return ext[..., [1, 0, 2]]


@dataclass
class EMConfig:
    """EM controls.

    Modes are added one at a time; EM runs after each addition until the
    relative log-likelihood change is below ``stage_tol`` (``tol`` after
    the last mode) or for at most ``max_iters`` iterations per stage.
    """

    tol: float = 1e-6
    stage_tol: float = 1e-4
    max_iters: int = 500
    min_visible: int = 4
    impute_rounds: int = 10
    camera_steps: int = 2
    sigma2_floor: float = 1e-10
    metric_length: float | None = None


@dataclass
class NRSfMResult:
    """Fitted prior plus per-instance cameras and coefficients.

    ``cameras`` and ``coeffs`` are None for rejected instances; ``rejected``
    maps instance id to the reason.  ``shapes`` are the per-instance
    reconstructions in the canonical frame and ``imputed`` the annotation
    coordinates with missing keypoints filled from the posterior mean.
    """

    prior: ShapePrior
    cameras: list
    coeffs: list
    shapes: np.ndarray
    imputed: np.ndarray
    rejected: dict
    loglik: list = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return max(len(self.loglik) - 1, 0)


# --------------------------------------------------------------------------
# EM internals.  Working variables:
#   Y (M, K, 2) observations, O (M, K) mask, P (M, 2, 3) = c R, u (M, 2),
#   B (K, 3, N + 1) with B[:, :, 0] the mean and B[:, :, 1:] the modes.


def _estep(Y, O, P, u, B, sigma2):
    M, K, _ = Y.shape
    N = B.shape[2] - 1
    PB = np.einsum("mab,kbn->mkan", P, B)                 # (M, K, 2, N+1)
    PV = PB[..., 1:] * O[:, :, None, None]
    r = (Y - u[:, None, :] - PB[..., 0]) * O[:, :, None]
    r = np.where(O[:, :, None], r, 0.0)
    G = np.einsum("mkan,mkap->mnp", PV, PV)
    h = np.einsum("mkan,mka->mn", PV, r)
    Lam = np.eye(N)[None] + G / sigma2
    L = np.linalg.cholesky(Lam)
    Sigma = np.linalg.inv(Lam)
    Sigma = 0.5 * (Sigma + np.swapaxes(Sigma, 1, 2))
    mu = np.einsum("mnp,mp->mn", Sigma, h) / sigma2
    nobs = 2.0 * O.sum(axis=1)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    quad = (np.einsum("mka,mka->m", r, r) - np.einsum("mn,mn->m", h, mu)) / sigma2
    ll = -0.5 * (nobs * np.log(2 * np.pi * sigma2) + logdet + quad)
    Ez = np.concatenate([np.ones((M, 1)), mu], axis=1)
    Ezz = np.einsum("mn,mp->mnp", Ez, Ez)
    Ezz[:, 1:, 1:] += Sigma
    return float(ll.sum()), Ez, Ezz, mu, Sigma


def _mstep_shape(Y, O, P, u, Ez, Ezz):
    M, K, _ = Y.shape
    n1 = Ez.shape[1]
    PtP = np.einsum("mab,mac->mbc", P, P)                           # (M, 3, 3)
    kron = np.einsum("mab,mcd->macbd", Ezz, PtP).reshape(M, 3 * n1, 3 * n1)
    H = np.einsum("mk,mij->kij", O.astype(float), kron)
    Yc = np.where(O[:, :, None], Y - u[:, None, :], 0.0)
    PtY = np.einsum("mab,mka->mkb", P, Yc)                           # (M, K, 3)
    rhs = np.einsum("mkb,mn->knb", PtY, Ez).reshape(K, 3 * n1)      # vec, column-major
    ridge = 1e-12 * np.trace(H, axis1=1, axis2=2)[:, None, None] / (3 * n1)
    H = H + ridge * np.eye(3 * n1)[None]
    vecB = np.linalg.solve(H, rhs[..., None])[..., 0]
    return vecB.reshape(K, n1, 3).transpose(0, 2, 1)


def _camera_stats(Y, O, B, Ez, Ezz):
    """Expected sufficient statistics of x~ = [B_i z; 1] per instance."""
    Of = O.astype(float)
    Ex = np.einsum("kbn,mn->mkb", B, Ez)                             # (M, K, 3)
    # Sum over observed keypoints of B_i Ezz B_i^T.
    BB = np.einsum("mk,kbn,kcp->mbncp", Of, B, B)
    Sxx = np.einsum("mbncp,mnp->mbc", BB, Ezz)
    M = Y.shape[0]
    Mt = np.zeros((M, 4, 4))
    Mt[:, :3, :3] = Sxx
    sx = np.einsum("mk,mkb->mb", Of, Ex)
    Mt[:, :3, 3] = sx
    Mt[:, 3, :3] = sx
    Mt[:, 3, 3] = Of.sum(axis=1)
    Yo = np.where(O[:, :, None], Y, 0.0)
    Ct = np.zeros((M, 4, 2))
    Ct[:, :3, :] = np.einsum("mkb,mka->mba", Ex * Of[:, :, None], Yo)
    Ct[:, 3, :] = Yo.sum(axis=1)
    yy = np.einsum("mka,mka->m", Yo, Yo)
    return Mt, Ct, yy


def _rodrigues_batch(w):
    theta = np.linalg.norm(w, axis=1)
    out = np.tile(np.eye(3), (w.shape[0], 1, 1))
    for m in np.flatnonzero(theta > 0):
        out[m] = axis_angle_rotation(w[m], theta[m])
    return out


def _row_orthonormal(P):
    U, _, Vt = np.linalg.svd(P)
    return U @ Vt[..., :2, :]


def _mstep_cameras(R, c, u, Mt, Ct, yy, steps):
    """Monotone update of (R, c, u) against the expected cost, per instance."""
    M = R.shape[0]

    def assemble(R, c, u):
        Pt = np.zeros((M, 2, 4))
        Pt[:, :, :3] = c[:, None, None] * R
        Pt[:, :, 3] = u
        return Pt

    # With Mt + rho I = L L^T the expected cost is |Pt L - T|^2 - rho |Pt|^2 plus a
    # constant; comparing candidates on the first part avoids cancellation against yy.
    rho = 1e-12 * np.trace(Mt, axis1=1, axis2=2)
    reg = rho[:, None, None] * np.eye(4)[None]
    L = np.linalg.cholesky(Mt + reg)
    T = np.swapaxes(np.linalg.solve(L, Ct), 1, 2)                  # (M, 2, 4)
    const = yy - np.einsum("mab,mab->m", T, T)

    def excess(Pt):
        D = Pt @ L - T
        return np.einsum("mab,mab->m", D, D) - rho * np.einsum("mab,mab->m", Pt, Pt)

    cost = excess(assemble(R, c, u))

    # Candidate from projecting the unconstrained minimizer onto scaled rotations.
    Pfree = np.swapaxes(np.linalg.solve(Mt + reg, Ct), 1, 2)        # (M, 2, 4)
    Rc = _row_orthonormal(Pfree[:, :, :3])
    cc, uc = _best_scale_offset(Rc, Mt, Ct)
    cand = excess(assemble(Rc, cc, uc))
    take = cand < cost
    R = np.where(take[:, None, None], Rc, R)
    c = np.where(take, cc, c)
    u = np.where(take[:, None], uc, u)
    cost = np.where(take, cand, cost)

    # Damped Gauss-Newton on (rotation increment, scale, offset).
    damp = np.full(M, 1e-6)
    gens = np.array([[[0, 0, 0], [0, 0, -1], [0, 1, 0]],
                     [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
                     [[0, -1, 0], [1, 0, 0], [0, 0, 0]]], dtype=float)
    for _ in range(steps):
        Pt = assemble(R, c, u)
        res = (Pt @ L - T).reshape(M, 8)
        J = np.zeros((M, 8, 6))
        for k in range(3):
            dP = np.zeros((M, 2, 4))
            dP[:, :, :3] = c[:, None, None] * (R @ gens[k])
            J[:, :, k] = (dP @ L).reshape(M, 8)
        dP = np.zeros((M, 2, 4))
        dP[:, :, :3] = R
        J[:, :, 3] = (dP @ L).reshape(M, 8)
        for k in range(2):
            dP = np.zeros((M, 2, 4))
            dP[:, k, 3] = 1.0
            J[:, :, 4 + k] = (dP @ L).reshape(M, 8)
        JtJ = np.einsum("mik,mil->mkl", J, J)
        g = np.einsum("mik,mi->mk", J, res)
        for _attempt in range(4):
            A = JtJ + (damp[:, None, None] * (np.diagonal(JtJ, axis1=1, axis2=2)[:, :, None]
                                              * np.eye(6)[None] + 1e-300))
            step = -np.linalg.solve(A, g[..., None])[..., 0]
            Rn = R @ _rodrigues_batch(step[:, :3])
            cn = c + step[:, 3]
            un = u + step[:, 4:]
            flip = cn < 0
            Rn = np.where(flip[:, None, None], -Rn, Rn)
            cn = np.abs(cn)
            new = excess(assemble(Rn, cn, un))
            ok = new <= cost
            R = np.where(ok[:, None, None], Rn, R)
            c = np.where(ok, cn, c)
            u = np.where(ok[:, None], un, u)
            cost = np.where(ok, new, cost)
            damp = np.where(ok, damp * 0.3, damp * 10.0)
            if ok.all():
                break
    return R, c, u, cost + const


def _best_scale_offset(R, Mt, Ct):
    """Optimal (c, u) for fixed rotations; cost is quadratic in them."""
    M = R.shape[0]
    # Parameters theta = (c, u1, u2); Pt = c [R, 0] + [0, u].
    A = np.zeros((M, 3, 2, 4))
    A[:, 0, :, :3] = R
    A[:, 1, 0, 3] = 1.0
    A[:, 2, 1, 3] = 1.0
    H = np.einsum("mpab,mbc,mqac->mpq", A, Mt, A)
    b = np.einsum("mpab,mba->mp", A, Ct)
    theta = np.linalg.solve(H + 1e-300 * np.eye(3)[None], b[..., None])[..., 0]
    return np.abs(theta[:, 0]), theta[:, 1:]


def _factorization_init(Y, O, rounds):
    """Rank-3 factorization with iterative imputation, then metric upgrade."""
    M, K, _ = Y.shape
    Of = O.astype(float)
    cnt = Of.sum(axis=1)
    W = np.where(O[:, :, None], Y, 0.0)
    ybar = W.sum(axis=1) / cnt[:, None]
    Wc = np.where(O[:, :, None], Y - ybar[:, None, :], 0.0)        # (M, K, 2)
    Wm = Wc.transpose(0, 2, 1).reshape(2 * M, K)
    mask = np.repeat(O, 2, axis=0)
    fill = Wm.copy()
    for _ in range(max(rounds, 1)):
        U, s, Vt = np.linalg.svd(fill, full_matrices=False)
        low = (U[:, :3] * s[:3]) @ Vt[:3]
        fill = np.where(mask, Wm, low)
        fill = fill - fill.mean(axis=1, keepdims=True)
        if mask.all():
            break
    U, s, Vt = np.linalg.svd(fill, full_matrices=False)
    Mh = U[:, :3] * np.sqrt(s[:3])
    Sh = np.sqrt(s[:3])[:, None] * Vt[:3]

    a = Mh[0::2]
    b = Mh[1::2]

    def sym_terms(x, y):
        return np.stack([x[:, 0] * y[:, 0],
                         x[:, 0] * y[:, 1] + x[:, 1] * y[:, 0],
                         x[:, 0] * y[:, 2] + x[:, 2] * y[:, 0],
                         x[:, 1] * y[:, 1],
                         x[:, 1] * y[:, 2] + x[:, 2] * y[:, 1],
                         x[:, 2] * y[:, 2]], axis=1)

    A = np.vstack([sym_terms(a, a) - sym_terms(b, b), sym_terms(a, b)])
    g = (sym_terms(a, a) + sym_terms(b, b)).mean(axis=0) / 2.0
    AtA = A.T @ A
    sv = np.linalg.svd(A, compute_uv=False)
    degenerate = sv.size < 6 or sv[-2] < 1e-9 * sv[0]
    l = np.linalg.solve(AtA + 1e-12 * np.trace(AtA) * np.eye(6), g)
    l = l / (g @ l)
    Lm = np.array([[l[0], l[1], l[2]], [l[1], l[3], l[4]], [l[2], l[4], l[5]]])
    ev, evec = np.linalg.eigh(Lm)
    if ev[0] <= 1e-8 * ev[-1]:
        degenerate = True
    ev = np.maximum(ev, 1e-6 * ev[-1])
    Q = evec * np.sqrt(ev)
    Mq = Mh @ Q
    S = np.linalg.solve(Q, Sh).T                                     # (K, 3)
    P = np.stack([Mq[0::2], Mq[1::2]], axis=1)                       # (M, 2, 3)
    return P, ybar, S, degenerate


def _view_spread(R):
    d = np.cross(R[:, 0], R[:, 1])
    # Views differing only by the sign of the optical axis look identical.
    dd = np.abs(d @ d.T)
    return float(np.arccos(np.clip(dd.min(), -1.0, 1.0)))


def _canonical_transform(S, category: Category):
    """Orthogonal G (possibly improper) and origin mapping S into the canonical frame."""
    S = np.asarray(S)
    if category.symmetry_pairs:
        n = (S[category.right] - S[category.left]).mean(axis=0)
    else:
        n = np.array([1.0, 0.0, 0.0])
    n = n / np.linalg.norm(n)
    if category.front and category.back:
        f = S[list(category.front)].mean(axis=0) - S[list(category.back)].mean(axis=0)
    else:
        C = S - S.mean(axis=0)
        C = C - np.outer(C @ n, n)
        f = np.linalg.svd(C)[2][0]
    f = f - (f @ n) * n
    f = f / np.linalg.norm(f)
    up = np.cross(n, f)
    if category.top and category.bottom:
        hint = S[list(category.top)].mean(axis=0) - S[list(category.bottom)].mean(axis=0)
        if hint @ up < 0:
            up = -up
    G = np.stack([n, f, up])
    mids = [(S[l] + S[r]) / 2 for l, r in category.symmetry_pairs]
    mids += [S[i] for i in category.on_plane]
    origin = S.mean(axis=0)
    if mids:
        x0 = (np.array(mids) - origin) @ G[0]
        origin = origin + x0.mean() * G[0]
    return G, origin


def _fix_scale_gauge(shapes, P, u, N, rounds=5):
    """Per-instance scale is unobservable (the camera scale absorbs it).

    Fix it by requiring every centered shape to project onto the centered
    mean shape with the mean's own squared norm, i.e. deformations are
    orthogonal to the mean.  Returns the mean, an orthogonal basis ordered
    by variance (unit-variance coefficients) and the matching coefficients
    and cameras.
    """
    M, K, _ = shapes.shape
    cen = shapes.mean(axis=1)
    u = u + np.einsum("mab,mb->ma", P, cen)
    C = shapes - cen[:, None, :]
    P = P.copy()
    for _ in range(rounds):
        ref = C.mean(axis=0)
        proj = np.einsum("mkb,kb->m", C, ref)
        s = np.where(proj > 0, (ref * ref).sum() / np.where(proj > 0, proj, 1.0), 1.0)
        C = C * s[:, None, None]
        P = P / s[:, None, None]
    mean = C.mean(axis=0)
    D = (C - mean).reshape(M, 3 * K)
    U, sv, Vt = np.linalg.svd(D, full_matrices=False)
    n = min(N, sv.size)
    V = np.zeros((N, 3 * K))
    lam = np.zeros((M, N))
    V[:n] = Vt[:n] * (sv[:n, None] / np.sqrt(M))
    lam[:, :n] = U[:, :n] * np.sqrt(M)
    for j in range(n):
        if V[j, np.argmax(np.abs(V[j]))] < 0:
            V[j] *= -1
            lam[:, j] *= -1
    return mean, V.reshape(N, K, 3), lam, P, u


def _grow_basis(Y, O, P, u, B, sigma2, max_halvings: int = 30):
    """Append one mode along the leading direction of the lifted residuals.

    The residuals of the current posterior mean are lifted into each
    camera plane; the new mode starts along their first principal axis and
    its scale is halved until the likelihood does not drop.  If no scale
    qualifies the mode starts at zero (the data need no further modes).
    """
    M, K, _ = Y.shape
    ll0, _, _, mu, _ = _estep(Y, O, P, u, B, sigma2)
    fit = B[:, :, 0][None] + np.einsum("kbn,mn->mkb", B[:, :, 1:], mu)
    res = np.where(O[:, :, None], Y - u[:, None, :] - np.einsum("mab,mkb->mka", P, fit), 0.0)
    D = np.einsum("mba,mka->mkb", np.linalg.pinv(P), res).reshape(M, 3 * K)
    D = D - D.mean(axis=0)
    _, sv, Vt = np.linalg.svd(D, full_matrices=False)
    v = Vt[0] * sv[0] / np.sqrt(M)
    for _ in range(max_halvings):
        cand = np.concatenate([B, v.reshape(K, 3, 1)], axis=2)
        ll = _estep(Y, O, P, u, cand, sigma2)[0]
        if ll >= ll0:
            return cand, ll
        v = 0.5 * v
    return np.concatenate([B, np.zeros((K, 3, 1))], axis=2), ll0


def _run_em(Y, O, R, c, u, B, sigma2, floor, tol, max_iters, camera_steps):
    """EM until the relative log-likelihood change drops below tol."""
    Of = O.astype(float)
    P = c[:, None, None] * R
    history = []
    converged = False
    for _ in range(max_iters):
        ll, Ez, Ezz, _, _ = _estep(Y, O, P, u, B, sigma2)
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= tol * abs(history[-2]):
            converged = True
            break
        B = _mstep_shape(Y, O, P, u, Ez, Ezz)
        Mt, Ct, yy = _camera_stats(Y, O, B, Ez, Ezz)
        R, c, u, cost = _mstep_cameras(R, c, u, Mt, Ct, yy, camera_steps)
        P = c[:, None, None] * R
        sigma2 = max(float(cost.sum() / (2.0 * Of.sum())), floor)
    else:
        history.append(_estep(Y, O, P, u, B, sigma2)[0])
    return B, R, c, u, sigma2, history, converged


def nrsfm_fit(data: AnnotationSet, basis_size: int, config: EMConfig | None = None,
              category: Category | None = None) -> NRSfMResult:
    """Fit mean shape, deformation basis, noise and cameras by EM.

    Args:
        data: annotations; instances with fewer than ``config.min_visible``
            keypoints are rejected and reported.
        basis_size: number of deformation modes N.
        config: EM controls.
        category: keypoint structure used to canonicalize the frame
            (defaults to the built-in car).

    Returns:
        :class:`NRSfMResult` in the canonical object frame.
    """
    from .category import car_category

    config = config or EMConfig()
    category = category or car_category()
    if tuple(data.keypoint_names) != tuple(category.keypoint_names):
        raise ValueError("annotation keypoint names do not match the category")
    N = int(basis_size)
    K = data.n_keypoints
    keep = data.visible.sum(axis=1) >= config.min_visible
    rejected = {data.ids[m]: f"only {int(data.visible[m].sum())} visible keypoints "
                f"(need {config.min_visible})" for m in np.flatnonzero(~keep)}
    M = int(keep.sum())
    if N < 1:
        raise ValueError("basis_size must be at least 1")
    if N > min(3 * K, M) - 1:
        raise ValueError(f"basis_size {N} exceeds min(3K, M) - 1 = {min(3 * K, M) - 1}")
    Y = data.coords[keep]
    O = data.visible[keep]
    if not O.any(axis=0).all():
        missing = [data.keypoint_names[i] for i in np.flatnonzero(~O.any(axis=0))]
        raise ValueError(f"keypoints never observed: {missing}")

    P, ybar, S0, degenerate = _factorization_init(Y, O, config.impute_rounds)
    c = np.linalg.norm(P, axis=2).mean(axis=1)
    R = _row_orthonormal(P)
    if degenerate or _view_spread(R) < 1e-3:
        warnings.warn("annotations span too few viewpoints; structure is poorly constrained",
                      RankDeficiencyWarning, stacklevel=2)
    P = c[:, None, None] * R
    Of = O.astype(float)
    cent = np.einsum("mk,kb->mb", Of, S0) / Of.sum(axis=1)[:, None]
    u = ybar - np.einsum("mab,mb->ma", P, cent)

    res = np.where(O[:, :, None], Y - u[:, None, :] - np.einsum("mab,kb->mka", P, S0), 0.0)
    sigma2 = float(np.mean(res[O] ** 2)) if O.any() else 1.0
    data_scale = float(np.mean((Y[O] - np.repeat(ybar[:, None, :], K, axis=1)[O]) ** 2))
    floor = config.sigma2_floor * max(data_scale, 1e-300)
    sigma2 = max(sigma2, floor, 1e-12 * data_scale)

    # Grow the basis one mode at a time, running EM after each addition.
    B = S0[:, :, None]
    history = []
    converged = False
    for n in range(1, N + 1):
        B, _ = _grow_basis(Y, O, P, u, B, sigma2)
        tol = config.tol if n == N else config.stage_tol
        B, R, c, u, sigma2, hist, converged = _run_em(Y, O, R, c, u, B, sigma2, floor, tol,
                                                      config.max_iters, config.camera_steps)
        history.extend(hist)
        P = c[:, None, None] * R
    mu = _estep(Y, O, P, u, B, sigma2)[3]
    logger.info("EM stopped after %d iterations (converged=%s, loglik=%.6g)",
                len(history) - 1, converged, history[-1])

    shapes_w = B[:, :, 0][None] + np.einsum("kbn,mn->mkb", B[:, :, 1:], mu)
    S_mean, Vn, lam, P, u = _fix_scale_gauge(shapes_w, P, u, N)

    G, origin = _canonical_transform(S_mean, category)
    mean_c = (S_mean - origin) @ G.T
    Vc = Vn @ G.T
    length = shape_extents(mean_c)[0]
    target = config.metric_length if config.metric_length is not None else category.reference_length
    k = target / length if length > 0 else 1.0
    mean_c *= k
    Vc *= k
    # Cameras: y = P X + u with X = G^T X_can / k + origin.
    Pc = np.einsum("mab,cb->mac", P, G) / k
    uc = u + np.einsum("mab,b->ma", P, origin)
    shapes = mean_c[None] + np.einsum("mn,nkb->mkb", lam, Vc)
    Yhat = np.einsum("mab,mkb->mka", Pc, shapes) + uc[:, None, :]
    eig = np.einsum("nkb,nkb->n", Vc, Vc)

    prior = ShapePrior(
        mean=mean_c,
        basis=Vc,
        eigenvalues=eig,
        sigma2=float(sigma2),
        category=category,
        medial_plane=Plane((1.0, 0.0, 0.0), 0.0),
        dim_priors=shape_extents(shapes).mean(axis=0),
    )
    cameras, coeffs = [], []
    all_shapes = np.full((data.n_instances, K, 3), np.nan)
    imputed = data.coords.copy()
    it = iter(range(M))
    for m_full in range(data.n_instances):
        if not keep[m_full]:
            cameras.append(None)
            coeffs.append(None)
            continue
        m = next(it)
        cm = float(np.linalg.norm(Pc[m], axis=1).mean())
        Rm = _row_orthonormal(Pc[m][None])[0]
        tm = Rm.T @ uc[m] / cm
        cameras.append(OrthoCam(Rm, tm, cm))
        coeffs.append(LatentCoeffs(lam[m]))
        all_shapes[m_full] = shapes[m]
        imputed[m_full] = np.where(data.visible[m_full][:, None], data.coords[m_full], Yhat[m])
    return NRSfMResult(prior, cameras, coeffs, all_shapes, imputed, rejected, history, converged)
