import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from carshape.category import car_category
from carshape.geometry import (BehindCameraError, DegenerateInputError, Intrinsics, OrthoCam,
                               QuadMesh, QuatPose, fit_plane, ortho_project, project,
                               project_points, quat_to_rotation, rotation_to_quat,
                               segments_hit_triangles)

from conftest import rodrigues

finite = st.floats(-10, 10, allow_nan=False)
quats = arrays(float, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
K = Intrinsics(500.0, 500.0, 320.0, 240.0)


# --- quat_to_rotation -------------------------------------------------------

def test_identity_quaternion():
    np.testing.assert_array_equal(quat_to_rotation((1, 0, 0, 0)), np.eye(3))


def test_scaled_identity_quaternion():
    np.testing.assert_allclose(quat_to_rotation((2, 0, 0, 0)), np.eye(3), atol=1e-15)


def test_half_angle_quaternion_matches_axis_angle_oracle():
    h = np.radians(15.0)
    R = quat_to_rotation((np.cos(h), 0.0, np.sin(h), 0.0))
    np.testing.assert_allclose(R, rodrigues((0, 1, 0), np.radians(30.0)), atol=1e-14)
    np.testing.assert_allclose(R @ [0, 0, 1], [np.sin(np.radians(30)), 0, np.cos(np.radians(30))],
                               atol=1e-14)


def test_zero_quaternion_is_degenerate():
    with pytest.raises(DegenerateInputError):
        quat_to_rotation((0, 0, 0, 0))
    with pytest.raises(DegenerateInputError):
        QuatPose((0, 0, 0, 0), (0, 0, 0))


@given(quats, st.floats(0.01, 100) | st.floats(-100, -0.01))
def test_rotation_is_homogeneous_in_q(q, s):
    np.testing.assert_allclose(quat_to_rotation(s * q), quat_to_rotation(q), atol=1e-12)


@given(quats)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotation(q)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(arrays(float, 3, elements=st.floats(-1, 1)).filter(lambda a: np.linalg.norm(a) > 1e-2),
       st.floats(-3.1, 3.1))
def test_quaternion_agrees_with_axis_angle(axis, angle):
    a = axis / np.linalg.norm(axis)
    q = np.r_[np.cos(angle / 2), np.sin(angle / 2) * a]
    np.testing.assert_allclose(quat_to_rotation(q), rodrigues(a, angle), atol=1e-12)


@given(quats)
def test_rotation_to_quat_round_trip(q):
    R = quat_to_rotation(q)
    q2 = rotation_to_quat(R)
    assert q2[0] >= 0
    np.testing.assert_allclose(quat_to_rotation(q2), R, atol=1e-10)


def test_canonical_pose_has_nonnegative_scalar_part():
    p = QuatPose((-2.0, 0.2, 0.0, 0.0), (1, 2, 3)).canonical()
    assert p.q[0] > 0
    assert np.linalg.norm(p.q) == pytest.approx(1.0)


# --- projection -------------------------------------------------------------

def test_project_principal_ray():
    np.testing.assert_allclose(project((0, 0, 1), QuatPose.identity(), K), (320, 240))


def test_project_off_axis():
    np.testing.assert_allclose(project((1, 0, 2), QuatPose.identity(), K), (570, 240))


def test_project_with_translation():
    np.testing.assert_allclose(project((0, 1, 1), QuatPose((1, 0, 0, 0), (0, 0, 1)), K), (320, 490))


def test_project_with_skew():
    Ks = Intrinsics(500.0, 400.0, 10.0, 20.0, skew=3.0)
    u, v = project((1.0, 2.0, 4.0), QuatPose.identity(), Ks)
    assert u == pytest.approx((500 * 1 + 3 * 2) / 4 + 10)
    assert v == pytest.approx(400 * 2 / 4 + 20)


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project((0, 0, -1), QuatPose.identity(), K)
    with pytest.raises(BehindCameraError):
        project_points(np.array([[0, 0, 1.0], [0, 0, 0.0]]), QuatPose.identity(), K)


@given(quats, arrays(float, 3, elements=st.floats(-1, 1)))
def test_project_invariant_to_quaternion_sign(q, X):
    pose = QuatPose(tuple(q), (0.0, 0.0, 10.0))
    neg = QuatPose(tuple(-q), (0.0, 0.0, 10.0))
    np.testing.assert_allclose(project(X, pose, K), project(X, neg, K), atol=1e-9)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 0, 0)
    with pytest.raises(ValueError):
        Intrinsics(1.0, -1.0, 0, 0)


# --- orthographic camera ----------------------------------------------------

def test_ortho_axis_aligned():
    cam = OrthoCam(np.eye(3)[:2], np.zeros(3), 1.0)
    np.testing.assert_allclose(ortho_project((1, 2, 3), cam), (1, 2))


def test_ortho_translation_cancels():
    R = rodrigues((1, 2, 3), 0.7)[:2]
    cam = OrthoCam(R, (-1, -2, -3), 1.0)
    np.testing.assert_allclose(ortho_project((1, 2, 3), cam), (0, 0), atol=1e-15)


@given(arrays(float, 3, elements=finite), arrays(float, 3, elements=finite),
       arrays(float, 3, elements=st.floats(-1, 1)).filter(lambda a: np.linalg.norm(a) > 0.1))
def test_ortho_linear_in_scale(X, t, axis):
    R = rodrigues(axis, 1.1)[:2]
    one = ortho_project(X, OrthoCam(R, t, 1.0))
    two = ortho_project(X, OrthoCam(R, t, 2.0))
    np.testing.assert_allclose(two, 2 * one, atol=1e-12)


def test_ortho_rejects_bad_rotation():
    with pytest.raises(ValueError):
        OrthoCam(np.array([[1, 0, 0], [1, 0, 0]]), np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        OrthoCam(np.eye(3)[:2], np.zeros(3), 0.0)


# --- meshes and planes ------------------------------------------------------

def test_mesh_validation():
    with pytest.raises(ValueError):
        QuadMesh(4, ((0, 1, 2, 4),))
    with pytest.raises(ValueError):
        QuadMesh(4, ((0, 1, 1, 2),))
    with pytest.raises(ValueError):
        QuadMesh(4, ((0, 1, 2, 3), (3, 2, 1, 0)))


def test_car_mesh_adjacency_is_symmetric():
    A = car_category().topology.adjacency()
    np.testing.assert_array_equal(A, A.T)
    assert not A.diagonal().any()


@given(st.permutations(list(range(14))))
def test_adjacency_consistent_under_relabeling(perm):
    mesh = car_category().topology
    A = mesh.adjacency()
    B = mesh.relabel(perm).adjacency()
    p = np.array(perm)
    np.testing.assert_array_equal(B[np.ix_(p, p)], A)
    np.testing.assert_array_equal(B, B.T)


def test_fit_plane_recovers_tilted_plane():
    n = np.array([1.0, 2.0, 2.0]) / 3.0
    rng = np.random.default_rng(0)
    P = rng.normal(size=(10, 3))
    P -= np.outer(P @ n - 0.5, n)             # points on n.X = 0.5
    pl = fit_plane(P)
    assert abs(abs(np.dot(pl.normal, n)) - 1.0) < 1e-12
    np.testing.assert_allclose(P @ pl.normal + pl.d, 0.0, atol=1e-12)


def test_segment_triangle_hit_and_miss():
    tri = np.array([[[-1.0, -1.0, 5.0], [1.0, -1.0, 5.0], [0.0, 1.0, 5.0]]])
    hits = segments_hit_triangles(np.zeros(3), np.array([[0, 0, 10.0], [0, 0, 4.0], [5, 5, 10.0]]), tri)
    assert hits[:, 0].tolist() == [True, False, False]
