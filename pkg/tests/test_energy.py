import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from carshape.geometry import Plane, QuadMesh, project_points
from carshape.energy import (TERMS, EnergyConfig, EnergyModel, ShapeState, e_dim, e_lap, e_planar,
                             e_reproj, e_sym, e_total, lap_block, mesh_planes, term_gradient)
from carshape.pose import KeypointObservation
from carshape.shape_prior import shape_extents
from carshape.synth import pose_from_angles

from conftest import rodrigues

POSE = pose_from_angles(210.0, 12.0, (0.3, 0.5, 9.0))
SQUARE = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0.0]])
ONE_QUAD = QuadMesh(4, ((0, 1, 2, 3),), ground_parallel=(True,), rectangular=(True,))


def exact_obs(X, K):
    uv = project_points(X, POSE, K)
    return [KeypointObservation(i, tuple(uv[i])) for i in range(len(X))]


# --- E_reproj ---------------------------------------------------------------

def test_reproj_zero_on_exact(prior, K500):
    assert e_reproj(prior.mean, POSE, exact_obs(prior.mean, K500), K500, np.ones(14)) == pytest.approx(0, abs=1e-18)


@pytest.mark.parametrize("w, expected", [(1.0, 25.0), (0.5, 6.25)])
def test_reproj_displaced_point(prior, K500, w, expected):
    obs = exact_obs(prior.mean, K500)
    u, v = obs[3].uv
    obs[3] = KeypointObservation(3, (u + 3.0, v + 4.0))
    W = np.ones(14)
    W[3] = w
    assert e_reproj(prior.mean, POSE, obs, K500, W) == pytest.approx(expected, rel=1e-9)


def test_reproj_ignores_invisible(prior, K500):
    obs = exact_obs(prior.mean, K500)
    obs[5] = KeypointObservation(5, (0.0, 0.0), 0.5, visible=False)
    assert e_reproj(prior.mean, POSE, obs, K500, np.ones(14)) == pytest.approx(0, abs=1e-18)


def test_reproj_behind_camera_is_finite_penalty(prior, K500):
    obs = exact_obs(prior.mean, K500)
    X = prior.mean.copy()
    X[0] = POSE.R.T @ (np.array([0.0, 0.0, -2.0]) - POSE.translation)
    val = e_reproj(X, POSE, obs, K500, np.ones(14))
    assert np.isfinite(val) and val > 1e3


# --- E_planar ---------------------------------------------------------------

def test_planar_unit_square_zero():
    assert e_planar(SQUARE, ONE_QUAD, [Plane((0, 0, 1), 0.0)]) == pytest.approx(0, abs=1e-20)


@pytest.mark.parametrize("mu_f", [1.0, 0.3])
def test_planar_norm_penalty(mu_f):
    P = np.array([[0.0, 0.0, 2.0, 0.0]])
    assert e_planar(SQUARE, ONE_QUAD, P, mu_f=mu_f) == pytest.approx(9.0 * mu_f)


def _best_fit_residual(Q):
    # Smallest eigenvalue of the scatter matrix equals the summed squared
    # distances to the best-fit plane.
    C = Q - Q.mean(0)
    return np.linalg.eigvalsh(C.T @ C)[0]


def test_planar_nonplanar_quad_vanishes_with_eps():
    mesh = QuadMesh(4, ((0, 1, 2, 3),))
    vals = []
    for eps in (0.5, 0.1, 0.01, 0.0):
        Q = SQUARE.copy()
        Q[3, 2] = eps
        P = mesh_planes(Q, mesh)
        v = e_planar(Q, mesh, P, ground_normal=None)
        assert v == pytest.approx(_best_fit_residual(Q), abs=1e-12)
        vals.append(v)
    assert vals[0] > vals[1] > vals[2] > 0
    assert vals[3] == pytest.approx(0, abs=1e-20)


def test_planar_ground_term_is_squared_sine():
    tilt = 0.3
    n = np.array([np.sin(tilt), 0.0, np.cos(tilt)])
    mesh = QuadMesh(4, ((0, 1, 2, 3),), ground_parallel=(True,))
    pts = SQUARE @ rodrigues((0, 1, 0), tilt).T
    assert e_planar(pts, mesh, np.r_[n, 0.0][None]) == pytest.approx(np.sin(tilt) ** 2, rel=1e-9)


def test_planar_rectangularity_is_squared_cosines():
    Q = np.array([[0, 0, 0], [2, 0, 0], [3, 1, 0], [1, 1, 0.0]])   # parallelogram
    mesh = QuadMesh(4, ((0, 1, 2, 3),), rectangular=(True,))
    c2 = 0.5                                                       # cos^2 45 deg at every corner
    assert e_planar(Q, mesh, [Plane((0, 0, 1), 0.0)], rect_weight=0.2) == pytest.approx(0.2 * 4 * c2)


# --- E_sym ------------------------------------------------------------------

YZ = Plane((1.0, 0.0, 0.0), 0.0)


def test_sym_examples():
    assert e_sym(np.array([[-1, 0, 0], [1, 0, 0.0]]), [(0, 1)], YZ) == pytest.approx(0.0)
    assert e_sym(np.array([[-1, 1, 0], [1, 0, 0.0]]), [(0, 1)], YZ) == pytest.approx(1.0)


def _reflect(P, n, d):
    n = np.asarray(n)
    return P - 2.0 * np.outer(P @ n - d, n)


@given(st.integers(0, 10_000))
def test_sym_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(5, 3))
    Rr = _reflect(L, (1, 0, 0), 0.0) + rng.normal(scale=0.1, size=(5, 3))
    X = np.vstack([L, Rr])
    pairs = [(i, i + 5) for i in range(5)]
    G = rodrigues(rng.normal(size=3) + 1e-3, rng.uniform(-3, 3))
    t = rng.normal(size=3)
    n2 = G @ [1.0, 0.0, 0.0]
    moved = X @ G.T + t
    before = e_sym(X, pairs, YZ)
    after = e_sym(moved, pairs, Plane(tuple(n2), float(n2 @ t)))
    assert after == pytest.approx(before, abs=1e-10)
    exact = np.vstack([L, _reflect(L, (1, 0, 0), 0.0)]) @ G.T + t
    assert e_sym(exact, pairs, Plane(tuple(n2), float(n2 @ t))) < 1e-12


# --- E_dim ------------------------------------------------------------------

def test_dim_examples(prior):
    ext = shape_extents(prior.mean)
    assert e_dim(prior.mean, ext) == pytest.approx(0.0)
    longer = prior.mean.copy()
    longer[:, 1] *= (ext[0] + 1.0) / ext[0]
    assert e_dim(longer, ext, mu_l=2.0) == pytest.approx(2.0)


# --- E_lap ------------------------------------------------------------------

def test_lap_two_vertices():
    X = np.array([[0, 0, 0], [0.6, 0.8, 0.0]])
    r, _, _ = lap_block(X, np.array([[0, 1], [1, 0]], bool))
    assert r @ r == pytest.approx(2 * 1.0)
    assert np.linalg.norm(r[:3]) ** 2 == pytest.approx(1.0)


def test_lap_zero_at_weighted_centroid():
    # Square cycle: vertex 0 sits at the weighted mean of neighbors 1 and 3.
    X = np.array([[0, 0, 0], [1, 1, 0], [0, 2, 0], [-1, 1, 0.0]])
    X[0] = 0.5 * (X[1] + X[3])
    r, _, _ = lap_block(X, QuadMesh(4, ((0, 1, 2, 3),)).adjacency())
    assert np.linalg.norm(r[:3]) < 1e-15


def test_lap_tetrahedron_matches_scalar_loop():
    X = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1.0]]) * 0.7
    X[0] += [0.1, -0.2, 0.05]
    A = ~np.eye(4, dtype=bool)
    total = 0.0
    for i in range(4):
        ws = [np.exp(-sum((X[i][a] - X[j][a]) ** 2 for a in range(3))) for j in range(4) if j != i]
        nb = [X[j] for j in range(4) if j != i]
        c = sum(w * p for w, p in zip(ws, nb)) / sum(ws)
        total += sum((X[i][a] - c[a]) ** 2 for a in range(3))
    r, _, _ = lap_block(X, A)
    assert r @ r == pytest.approx(total, rel=1e-12)


def test_e_lap_on_car_is_positive(prior):
    assert e_lap(prior.mean, prior.topology) > 0


# --- gradients --------------------------------------------------------------

def _model(prior, K, seed=0, eta=(1.0, 0.1, 0.5, 0.05, 0.05)):
    rng = np.random.default_rng(seed)
    uv = project_points(prior.mean, POSE, K) + rng.normal(scale=4.0, size=(14, 2))
    obs = [KeypointObservation(i, tuple(uv[i])) for i in range(14)]
    return EnergyModel(prior, obs, POSE, K, rng.uniform(0.2, 1.0, 14), EnergyConfig(eta=eta)), rng


def _random_state(prior, rng):
    lam = rng.normal(scale=0.8, size=prior.n_basis)
    X = prior.mean + np.tensordot(lam, prior.basis, axes=1)
    P = mesh_planes(X, prior.topology) + rng.normal(scale=0.05, size=(8, 4))
    return ShapeState(lam, P)


def _fd(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_total_gradient_matches_finite_differences(prior, K500, seed):
    model, rng = _model(prior, K500, seed)
    s = _random_state(prior, rng)
    _, g = e_total(model, s)
    fd = _fd(lambda v: e_total(model, ShapeState.from_vector(v, prior.n_basis))[0], s.vector, 1e-6)
    assert _rel(g, fd) < 1e-5


@pytest.mark.parametrize("name", TERMS)
def test_term_gradients_match_finite_differences(prior, K500, name):
    model, rng = _model(prior, K500, 3)
    s = _random_state(prior, rng)
    X = model.shape(s.lam) + rng.normal(scale=0.05, size=(14, 3))
    _, gX, gP = term_gradient(name, model, X, s.planes)
    fX = _fd(lambda Y: term_gradient(name, model, Y, s.planes)[0], X, 1e-6)
    fP = _fd(lambda P: term_gradient(name, model, X, P)[0], s.planes, 1e-6)
    assert _rel(np.r_[gX.ravel(), gP.ravel()], np.r_[fX.ravel(), fP.ravel()]) < 1e-5


def test_all_eta_zero_is_empty(prior, K500):
    model, rng = _model(prior, K500, eta=(0, 0, 0, 0, 0))
    val, g = e_total(model, _random_state(prior, rng))
    assert val == 0.0
    assert not g.any()


@pytest.mark.parametrize("k", range(5))
def test_single_active_term_equals_standalone(prior, K500, k):
    eta = [0.0] * 5
    eta[k] = 1.0
    model, rng = _model(prior, K500, 5, eta=tuple(eta))
    s = _random_state(prior, rng)
    X = model.shape(s.lam)
    c = model.config
    standalone = {
        "reproj": lambda: e_reproj(X, POSE, model.obs, K500, model.weights),
        "planar": lambda: e_planar(X, prior.topology, s.planes, c.mu_f, c.ground_normal, c.rect_weight),
        "sym": lambda: e_sym(X, prior.symmetry_pairs, prior.medial_plane),
        "dim": lambda: e_dim(X, prior.dim_priors),
        "lap": lambda: e_lap(X, prior.topology),
    }[TERMS[k]]()
    assert e_total(model, s)[0] == pytest.approx(standalone, rel=1e-12)
    assert model.breakdown(s)["total"] == pytest.approx(standalone, rel=1e-12)


def test_energy_config_validation():
    with pytest.raises(ValueError):
        EnergyConfig(eta=(1, 1, 1, 1))
    with pytest.raises(ValueError):
        EnergyConfig(eta=(1, -1, 1, 1, 1))
    with pytest.raises(ValueError):
        EnergyConfig(irls_rounds=-1)
