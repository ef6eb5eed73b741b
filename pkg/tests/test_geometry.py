import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varslam.geometry import (
    DegenerateTrig,
    EulerAngle,
    GimbalLock,
    InvalidRotation,
    LogNearCut,
    Se3Pose,
    TrigOrientation,
    euler_array_to_rotation,
    euler_to_rotation,
    hat,
    orientation_prior_moments,
    quaternion_to_rotation,
    rotation_to_euler,
    rotation_to_quaternion,
    se3_compose,
    se3_exp,
    se3_inverse,
    se3_log,
    so3_exp,
    so3_log,
    trig_decode,
    trig_encode,
    trig_prior,
    vee,
    wrap_angle,
)

angle = st.floats(-math.pi + 1e-6, math.pi, allow_nan=False)
elev = st.floats(-1.5, 1.5, allow_nan=False)
sigma = st.floats(0.0, 0.3, allow_nan=False)


def axis_product(az, el, inp):
    # independent oracle: textbook single-axis matrices multiplied out
    ca, sa = math.cos(az), math.sin(az)
    ce, se = math.cos(el), math.sin(el)
    ci, si = math.cos(inp), math.sin(inp)
    rz = np.array([[ca, -sa, 0], [sa, ca, 0], [0, 0, 1]])
    ry = np.array([[ce, 0, se], [0, 1, 0], [-se, 0, ce]])
    rx = np.array([[1, 0, 0], [0, ci, -si], [0, si, ci]])
    return rz @ ry @ rx


def pose_close(a, b, tol):
    return np.allclose(a.rotation, b.rotation, atol=tol) and np.allclose(a.translation, b.translation, atol=tol)


def random_pose(rng, rot_scale=2.0, trans_scale=5.0):
    return se3_exp(np.concatenate([rng.normal(size=3) * rot_scale / 3, rng.normal(size=3) * trans_scale]))


# ---------------------------------------------------------------------------
# Angles and Euler conversion
# ---------------------------------------------------------------------------


def test_wrap_angle_range_and_minus_pi():
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    a = np.linspace(-20, 20, 1001)
    w = wrap_angle(a)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.sin(w), np.sin(a)) and np.allclose(np.cos(w), np.cos(a))


def test_wrap_angle_leaves_in_range_values_bit_identical():
    a = np.random.default_rng(0).uniform(-math.pi, math.pi, 1000)
    assert np.array_equal(wrap_angle(a), a)


def test_euler_angle_folds_elevation():
    e = EulerAngle(0.3, 2.0, -0.4)
    assert abs(e.elevation) <= math.pi / 2
    assert np.allclose(euler_to_rotation(e), axis_product(0.3, 2.0, -0.4), atol=1e-12)


def test_euler_zero_is_identity():
    assert np.array_equal(euler_to_rotation(EulerAngle(0.0, 0.0, 0.0)), np.eye(3))


def test_euler_pure_azimuth():
    r = euler_to_rotation(EulerAngle(math.pi / 2, 0.0, 0.0))
    assert np.allclose(r, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)


def test_euler_matches_axis_product_oracle():
    rng = np.random.default_rng(1)
    for _ in range(100):
        az, inp = rng.uniform(-math.pi, math.pi, 2)
        el = rng.uniform(-1.5, 1.5)
        assert np.allclose(euler_to_rotation(EulerAngle(az, el, inp)), axis_product(az, el, inp), atol=1e-14)


def test_rotation_to_euler_simple_cases():
    assert rotation_to_euler(np.eye(3)).as_array() == pytest.approx([0, 0, 0], abs=1e-15)
    c, s = math.cos(1.0), math.sin(1.0)
    assert rotation_to_euler(np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])).as_array() == pytest.approx([1, 0, 0])


def test_euler_round_trip_1000_angles():
    rng = np.random.default_rng(2)
    ang = np.column_stack(
        [rng.uniform(-math.pi, math.pi, 1000), rng.uniform(-1.5, 1.5, 1000), rng.uniform(-math.pi, math.pi, 1000)]
    )
    back = np.array([rotation_to_euler(r).as_array() for r in euler_array_to_rotation(ang)])
    diff = wrap_angle(back - ang)
    assert np.max(np.abs(diff)) < 1e-9


def test_gimbal_lock_raises():
    with pytest.raises(GimbalLock):
        rotation_to_euler(axis_product(0.2, math.pi / 2, 0.1))


def test_invalid_rotation_rejected():
    with pytest.raises(InvalidRotation):
        Se3Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidRotation):
        Se3Pose(np.eye(3) * 1.01, np.zeros(3))


@settings(max_examples=200, deadline=None)
@given(angle, elev, angle)
def test_euler_round_trip_property(az, el, inp):
    e = EulerAngle(az, el, inp)
    r = euler_to_rotation(e)
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)
    back = rotation_to_euler(r)
    assert np.max(np.abs(wrap_angle(back.as_array() - e.as_array()))) < 1e-9


# ---------------------------------------------------------------------------
# SO(3) / SE(3)
# ---------------------------------------------------------------------------


def test_hat_vee_inverse():
    w = np.array([0.3, -1.2, 2.0])
    assert np.array_equal(vee(hat(w)), w)
    assert np.allclose(hat(w) @ np.array([1.0, 2.0, 3.0]), np.cross(w, [1.0, 2.0, 3.0]))


def test_so3_exp_matches_axis_rotation():
    assert np.allclose(so3_exp([0, 0, 0.7]), axis_product(0.7, 0, 0), atol=1e-15)
    assert np.allclose(so3_exp([1e-9, 0, 0]), np.eye(3) + hat([1e-9, 0, 0]), atol=1e-18)


def test_so3_log_near_cut_raises():
    with pytest.raises(LogNearCut):
        so3_log(so3_exp([math.pi, 0, 0]))


def test_compose_identity_and_inverse():
    rng = np.random.default_rng(3)
    p = random_pose(rng)
    assert pose_close(se3_compose(Se3Pose.identity(), p), p, 1e-15)
    assert pose_close(se3_compose(p, se3_inverse(p)), Se3Pose.identity(), 1e-12)
    assert pose_close(p @ Se3Pose.identity(), p, 1e-15)


def test_compose_matches_homogeneous_matrices():
    rng = np.random.default_rng(4)
    a, b = random_pose(rng), random_pose(rng)
    assert np.allclose(se3_compose(a, b).matrix(), a.matrix() @ b.matrix(), atol=1e-12)
    assert np.allclose(se3_inverse(a).matrix(), np.linalg.inv(a.matrix()), atol=1e-12)


def test_exp_log_round_trip_random_twists():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(500):
        w = rng.normal(size=3)
        w *= rng.uniform(0, 3) / np.linalg.norm(w)
        xi = np.concatenate([w, rng.normal(size=3) * 4])
        worst = max(worst, np.max(np.abs(se3_log(se3_exp(xi)) - xi)))
    assert worst < 1e-9


def test_exp_log_small_angle_branch():
    xi = np.array([1e-8, -2e-8, 3e-9, 0.5, -0.2, 0.1])
    assert np.allclose(se3_log(se3_exp(xi)), xi, atol=1e-15)


def test_se3_exp_pure_translation():
    p = se3_exp([0, 0, 0, 1.0, 2.0, 3.0])
    assert np.array_equal(p.rotation, np.eye(3))
    assert np.allclose(p.translation, [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_group_laws(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    assert pose_close(se3_compose(se3_compose(a, b), c), se3_compose(a, se3_compose(b, c)), 1e-12)
    assert pose_close(se3_compose(se3_inverse(a), a), Se3Pose.identity(), 1e-12)
    assert pose_close(se3_inverse(se3_compose(a, b)), se3_compose(se3_inverse(b), se3_inverse(a)), 1e-12)


def test_quaternion_round_trip_and_sign():
    rng = np.random.default_rng(6)
    for _ in range(50):
        r = random_pose(rng).rotation
        q = rotation_to_quaternion(r)
        assert q[3] >= 0 and np.linalg.norm(q) == pytest.approx(1.0)
        assert np.allclose(quaternion_to_rotation(q), r, atol=1e-14)
        assert np.allclose(quaternion_to_rotation(-2.0 * q), r, atol=1e-14)
    assert np.allclose(rotation_to_quaternion(np.eye(3)), [0, 0, 0, 1])


# ---------------------------------------------------------------------------
# Trig encoding and orientation moments
# ---------------------------------------------------------------------------


def test_trig_encode_zero_noise_identity():
    t = trig_encode(EulerAngle(0.0, 0.0, 0.0), 0.0)
    assert np.array_equal(t.cos, np.ones(3)) and np.array_equal(t.sin, np.zeros(3))
    assert np.array_equal(t.as_vector(), [1, 0, 1, 0, 1, 0])


def test_trig_encode_attenuation_value():
    t = trig_encode(EulerAngle(0.0, 0.0, 0.0), 0.05)
    assert t.cos[0] == pytest.approx(math.exp(-0.00125), abs=1e-15)
    assert t.cos[0] == pytest.approx(0.9987508, abs=1e-7)


def test_trig_encode_attenuation_matches_monte_carlo():
    eps = np.random.default_rng(7).normal(0.0, 0.05, 10**6)
    mc = np.cos(eps).mean()
    se = np.cos(eps).std() / 1e3
    assert abs(trig_encode(EulerAngle(0.0, 0.0, 0.0), 0.05).cos[0] - mc) < 3 * se + 1e-12


def test_trig_encode_norm_identity():
    rng = np.random.default_rng(8)
    for _ in range(20):
        t = trig_encode(EulerAngle(*rng.uniform(-1.4, 1.4, 3)), 0.05)
        assert np.allclose(t.cos**2 + t.sin**2, math.exp(-0.0025), atol=1e-15)


def test_trig_decode_basic():
    assert trig_decode(TrigOrientation(np.ones(3), np.zeros(3))).as_array() == pytest.approx([0, 0, 0])
    e = EulerAngle(0.7, 0.2, -1.1)
    assert trig_decode(trig_encode(e, 0.05)).as_array() == pytest.approx([0.7, 0.2, -1.1], abs=1e-12)


def test_trig_decode_matches_grid_search_projection():
    rng = np.random.default_rng(9)
    grid = np.linspace(-math.pi, math.pi, 200_001)
    for _ in range(5):
        c, s = rng.normal(size=3), rng.normal(size=3)
        c[1] = abs(c[1])  # keep elevation in range so no fold applies
        dec = trig_decode(TrigOrientation(c, s)).as_array()
        for k in range(3):
            best = grid[np.argmin((np.cos(grid) - c[k]) ** 2 + (np.sin(grid) - s[k]) ** 2)]
            assert abs(wrap_angle(dec[k] - best)) < 1e-4


def test_trig_decode_degenerate():
    with pytest.raises(DegenerateTrig):
        trig_decode(TrigOrientation(np.zeros(3), np.zeros(3)))


def test_moments_zero_sigma_limit():
    v = np.linspace(-3, 3, 13)
    mc, ms, vc, vs = orientation_prior_moments(v, 0.0)
    assert np.allclose(mc, np.cos(v)) and np.allclose(ms, np.sin(v))
    assert np.allclose(vc, 0.0, atol=1e-15) and np.allclose(vs, 0.0, atol=1e-15)


def test_moments_reference_values():
    mc, ms, vc, vs = orientation_prior_moments(0.0, 0.05)
    assert mc == pytest.approx(0.9987508, abs=1e-7)
    assert ms == 0.0
    assert vc == pytest.approx(3.11e-6, abs=1e-8)  # quoted to three digits
    assert vs == pytest.approx(2.4938e-3, rel=1e-4)


def test_moments_match_monte_carlo_at_reference_point():
    eps = np.random.default_rng(10).normal(0.0, 0.05, 10**6)
    mc, ms, vc, vs = orientation_prior_moments(0.0, 0.05)
    for analytic, samples in ((mc, np.cos(eps)), (ms, np.sin(eps))):
        assert abs(analytic - samples.mean()) < 3 * samples.std() / 1e3
    for analytic, samples in ((vc, np.cos(eps)), (vs, np.sin(eps))):
        sq = (samples - samples.mean()) ** 2
        assert abs(analytic - sq.mean()) < 3 * sq.std() / 1e3


@settings(max_examples=200, deadline=None)
@given(st.floats(-10, 10, allow_nan=False), sigma)
def test_variance_sum_identity(v, s):
    _, _, vc, vs = orientation_prior_moments(v, s)
    assert vc + vs == pytest.approx(1.0 - math.exp(-s * s), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(angle, elev, angle, sigma)
def test_trig_round_trip_property(az, el, inp, s):
    e = EulerAngle(az, el, inp)
    assert np.max(np.abs(wrap_angle(trig_decode(trig_encode(e, s)).as_array() - e.as_array()))) < 1e-10


def test_trig_prior_layout_and_floor():
    mean, var = trig_prior(np.array([0.1, -0.2, 0.3]), 0.0, 1e-4)
    assert np.allclose(mean, [math.cos(0.1), math.sin(0.1), math.cos(-0.2), math.sin(-0.2), math.cos(0.3), math.sin(0.3)])
    assert np.array_equal(var, np.full(6, 1e-4))
