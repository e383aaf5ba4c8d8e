from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_pose
from porf.errors import DegenerateGeometry, InvalidArgument
from porf.geometry import (Intrinsics, Pose6, axis_angle_from_matrix, compose_residual,
                           fundamental_matrix, project, relative_pose, rodrigues,
                           rotation_angle, sampson_distance, skew)

finite = st.floats(-10, 10, allow_nan=False)
vec3 = arrays(np.float64, 3, elements=finite)


def quat_rotation(r):
    """Rotation matrix via the unit quaternion of the axis-angle vector."""
    theta = np.linalg.norm(r)
    if theta == 0:
        return np.eye(3)
    w = np.cos(theta / 2)
    x, y, z = np.sin(theta / 2) * r / theta
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def sampson_oracle(x, xp, F):
    u, v = x
    up, vp = xp
    fx = [F[i][0] * u + F[i][1] * v + F[i][2] for i in range(3)]
    ftx = [F[0][i] * up + F[1][i] * vp + F[2][i] for i in range(3)]
    num = (up * fx[0] + vp * fx[1] + fx[2]) ** 2
    return num / (fx[0] ** 2 + fx[1] ** 2 + ftx[0] ** 2 + ftx[1] ** 2 + 1e-12)


# ---- rotations -----------------------------------------------------------------


def test_rodrigues_zero_is_identity():
    assert np.array_equal(rodrigues([0, 0, 0]), np.eye(3))


def test_quarter_turn_about_z():
    np.testing.assert_allclose(rodrigues([0, 0, np.pi / 2]) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rodrigues_matches_quaternion_oracle(rng):
    for _ in range(1000):
        r = rng.normal(size=3) * rng.uniform(0, 2)
        np.testing.assert_allclose(rodrigues(r), quat_rotation(r), atol=1e-12, rtol=0)


def test_rodrigues_small_angle_branch():
    r = np.array([3e-9, -1e-9, 2e-9])
    np.testing.assert_allclose(rodrigues(r), quat_rotation(r), atol=1e-16)


def test_rodrigues_rejects_non_finite():
    with pytest.raises(InvalidArgument):
        rodrigues([np.nan, 0, 0])


@given(vec3)
def test_rodrigues_is_rotation(r):
    R = rodrigues(r)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1) < 1e-9


def test_rotation_angle_examples():
    assert rotation_angle(np.eye(3)) == 0.0
    assert abs(rotation_angle(rodrigues([0, 0, np.pi / 2])) - np.pi / 2) < 1e-12


def test_rotation_angle_round_trip(rng):
    for _ in range(1000):
        v = rng.normal(size=3)
        v *= rng.uniform(0, np.pi) / np.linalg.norm(v)
        assert abs(rotation_angle(rodrigues(v)) - np.linalg.norm(v)) < 1e-9


def test_rotation_angle_rejects_non_rotation():
    with pytest.raises(InvalidArgument):
        rotation_angle(2 * np.eye(3))


def test_axis_angle_inverse(rng):
    for _ in range(300):
        v = rng.normal(size=3)
        v *= rng.uniform(0, np.pi - 1e-3) / np.linalg.norm(v)
        np.testing.assert_allclose(axis_angle_from_matrix(rodrigues(v)), v, atol=1e-8)
    near_pi = np.array([0.0, 0.6, 0.8]) * (np.pi - 1e-6)
    np.testing.assert_allclose(rodrigues(axis_angle_from_matrix(rodrigues(near_pi))), rodrigues(near_pi), atol=1e-9)


def test_pose_canonical_wrap():
    p = Pose6([0, 0, 1.5 * np.pi], [0, 0, 0])
    assert np.linalg.norm(p.r) <= np.pi
    np.testing.assert_allclose(p.R, rodrigues([0, 0, 1.5 * np.pi]), atol=1e-12)


def test_pose_rejects_bad_input():
    with pytest.raises(InvalidArgument):
        Pose6([0, 0, np.inf], [0, 0, 0])
    with pytest.raises(InvalidArgument):
        Pose6([0, 0], [0, 0, 0])


def test_intrinsics_validation():
    with pytest.raises(InvalidArgument):
        Intrinsics(-1, 1, 5, 5, 10, 10)
    with pytest.raises(InvalidArgument):
        Intrinsics(1, 1, 12, 5, 10, 10)
    K = Intrinsics.from_fov(256, 128, 90)
    assert abs(K.fx - 128) < 1e-12 and K.cx == 128 and K.cy == 64
    np.testing.assert_allclose(K.K @ K.K_inv, np.eye(3), atol=1e-15)


# ---- relative poses and F ----------------------------------------------------------


def test_relative_pose_examples():
    p = Pose6([0.1, 0.2, 0.3], [1, 2, 3])
    R, t = relative_pose(p, p)
    np.testing.assert_allclose(R, np.eye(3), atol=1e-15)
    assert np.array_equal(t, np.zeros(3))
    R, t = relative_pose(Pose6.identity(), Pose6([0, 0, 0], [1, 0, 0]))
    np.testing.assert_array_equal(R, np.eye(3))
    np.testing.assert_array_equal(t, [-1, 0, 0])


def test_relative_pose_composition(rng):
    for _ in range(200):
        a, b, c = (random_pose(rng) for _ in range(3))
        Rab, tab = relative_pose(a, b)
        Rbc, tbc = relative_pose(b, c)
        Rac, tac = relative_pose(a, c)
        np.testing.assert_allclose(Rbc @ Rab, Rac, atol=1e-10)
        np.testing.assert_allclose(Rbc @ tab + tbc, tac, atol=1e-10)


def test_fundamental_pure_translation():
    # identity intrinsics put the principal point at the origin, which Intrinsics rejects
    K = SimpleNamespace(K_inv=np.eye(3))
    F = fundamental_matrix(Pose6.identity(), Pose6([0, 0, 0], [1, 0, 0]), K)
    ref = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]]) / np.sqrt(2)
    assert np.allclose(F, ref, atol=1e-15) or np.allclose(F, -ref, atol=1e-15)


def _pair_with_points(rng):
    K = Intrinsics.from_fov(640, 480, 60)
    a = Pose6.from_matrix(rodrigues(rng.normal(size=3) * 0.1), [0, 0, -4])
    b = Pose6.from_matrix(rodrigues(rng.normal(size=3) * 0.1) @ rodrigues([0, 0.3, 0]),
                          [1.2, 0.1, -3.8])
    X = rng.uniform(-1, 1, size=(100, 3))
    return K, a, b, X


def test_fundamental_epipolar_constraint(rng):
    for _ in range(20):
        K, a, b, X = _pair_with_points(rng)
        F = fundamental_matrix(a, b, K)
        x, _ = project(a, K, X)
        xp, _ = project(b, K, X)
        xh = np.c_[x, np.ones(len(x))]
        xph = np.c_[xp, np.ones(len(xp))]
        assert np.max(np.abs(np.sum(xph * (xh @ F.T), axis=1))) < 1e-9


def test_fundamental_swap_is_transpose(rng):
    for _ in range(50):
        a, b = random_pose(rng), random_pose(rng)
        K = Intrinsics.from_fov(320, 240, 50)
        F = fundamental_matrix(a, b, K)
        G = fundamental_matrix(b, a, K).T
        assert min(np.abs(F - G).max(), np.abs(F + G).max()) < 1e-10


def test_fundamental_rank_two_and_unit_norm(rng):
    for _ in range(200):
        F = fundamental_matrix(random_pose(rng), random_pose(rng), Intrinsics.from_fov(100, 80, 70))
        s = np.linalg.svd(F, compute_uv=False)
        assert s[2] <= 1e-9 * s[0]
        assert abs(np.linalg.norm(F) - 1) < 1e-12


def test_fundamental_zero_baseline():
    with pytest.raises(DegenerateGeometry):
        fundamental_matrix(Pose6([0, 0, 0.1], [1, 1, 1]), Pose6([0.2, 0, 0], [1, 1, 1]),
                           Intrinsics.from_fov(10, 10, 60))


# ---- Sampson ------------------------------------------------------------------------


def test_sampson_worked_example():
    F = np.array([[0, 0, 0], [0, 0, -1.0], [0, 1, 0]])
    assert abs(sampson_distance([0, 0], [0, 0.2], F) - 0.02) < 1e-13


def test_sampson_zero_on_constraint():
    F = np.array([[0, 0, 0], [0, 0, -1.0], [0, 1, 0]])
    # pure horizontal translation: same image row means x'^T F x = 0
    assert sampson_distance([3.0, 1.5], [-7.0, 1.5], F) == 0.0


def test_sampson_matches_oracle(rng):
    worst = 0.0
    for _ in range(1000):
        F = rng.normal(size=(3, 3))
        x, xp = rng.uniform(-50, 50, 2), rng.uniform(-50, 50, 2)
        d = sampson_distance(x, xp, F)
        ref = sampson_oracle(x, xp, F)
        worst = max(worst, abs(d - ref) / max(abs(ref), 1e-300))
    assert worst < 1e-10


def test_sampson_scale_invariant(rng):
    for _ in range(1000):
        F = fundamental_matrix(random_pose(rng), random_pose(rng), Intrinsics.from_fov(200, 200, 60))
        x, xp = rng.uniform(0, 200, 2), rng.uniform(0, 200, 2)
        d = sampson_distance(x, xp, F)
        assert abs(sampson_distance(x, xp, 5 * F) - d) <= 1e-12 * max(d, 1.0)
        s = 10 ** rng.uniform(-3, 3)
        assert abs(sampson_distance(x, xp, s * F) - d) <= 1e-10 * d


def test_sampson_batched_shape(rng):
    F = rng.normal(size=(3, 3))
    x = rng.normal(size=(4, 5, 2))
    assert sampson_distance(x, x, F).shape == (4, 5)


def test_sampson_rejects_zero_f():
    with pytest.raises(InvalidArgument):
        sampson_distance([0, 0], [1, 1], np.zeros((3, 3)))


@given(arrays(np.float64, 2, elements=finite), arrays(np.float64, 2, elements=finite),
       arrays(np.float64, (3, 3), elements=st.floats(-1, 1)))
def test_sampson_non_negative(x, xp, F):
    if not np.any(F):
        return
    assert sampson_distance(x, xp, F) >= 0


# ---- residual composition -----------------------------------------------------------


def test_compose_residual_examples():
    init = Pose6([0, 0, 0], [1, 2, 3])
    assert compose_residual(init, np.zeros(6), 0.01) == init
    out = compose_residual(init, [1, 0, 0, 0, 0, 1], 0.01)
    np.testing.assert_allclose(out.r, [0.01, 0, 0], atol=1e-18)
    np.testing.assert_allclose(out.t, [1, 2, 3.01], atol=1e-15)


def test_compose_residual_first_order_in_alpha(rng):
    init = random_pose(rng, max_angle=2.0)
    d = rng.normal(size=6)
    for alpha in (1e-4, 1e-3, 1e-2, 1e-1):
        out = compose_residual(init, d, alpha)
        delta = np.linalg.norm(out.as_vector() - init.as_vector())
        assert abs(delta - alpha * np.linalg.norm(d)) < 1e-12


def test_compose_residual_validation():
    with pytest.raises(InvalidArgument):
        compose_residual(Pose6.identity(), np.zeros(6), 0.0)
    with pytest.raises(InvalidArgument):
        compose_residual(Pose6.identity(), np.zeros(5), 0.1)


def test_skew_is_cross_product(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(skew(a) @ b, np.cross(a, b), atol=1e-15)
