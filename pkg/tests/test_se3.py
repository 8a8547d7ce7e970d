import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation, Slerp

from collabrecon.se3 import (
    DualQuaternion,
    RigidTransform,
    compose,
    dqb_blend,
    error_vector,
    invert,
    is_identity,
    pose_distance,
    rotate_x,
    rotate_z,
    translate,
)

I = RigidTransform.identity()


def random_transform(rng, trans_scale=2.0):
    q = Rotation.random(random_state=rng).as_quat()  # x, y, z, w
    return RigidTransform(np.array([q[3], q[0], q[1], q[2]]), rng.uniform(-trans_scale, trans_scale, 3))


def assert_same(A, B, tol=1e-9):
    d = pose_distance(A, B)
    assert d.translation_m < tol and math.radians(d.angle_deg) < tol, d


finite = st.floats(-5, 5, allow_nan=False)
transforms = st.builds(
    lambda rv, t: RigidTransform.from_axis_angle(np.array(rv), np.array(t)),
    st.tuples(finite, finite, finite),
    st.tuples(finite, finite, finite),
)


def test_compose_identity_and_inverse():
    T = rotate_z(33) @ translate(0.2, -1, 3)
    assert_same(compose(I, T), T)
    assert_same(compose(T, invert(T)), I)


def test_pure_translations_compose():
    assert_same(compose(translate(1, 0, 0), translate(0, 2, 0)), translate(1, 2, 0))


def test_compose_applies_right_operand_first():
    p = np.array([1.0, 0.0, 0.0])
    T = compose(translate(0, 0, 1), rotate_z(90))
    np.testing.assert_allclose(T.apply(p), [0.0, 1.0, 1.0], atol=1e-12)


def test_matrix_agrees_with_scipy():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = random_transform(rng)
        w, x, y, z = T.q
        R = Rotation.from_quat([x, y, z, w]).as_matrix()
        np.testing.assert_allclose(T.rotation, R, atol=1e-12)


def test_invert_identity_and_rotation():
    assert_same(invert(I), I)
    assert_same(invert(rotate_z(90)), rotate_z(-90))


def test_double_inverse_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        T = random_transform(rng)
        assert_same(invert(invert(T)), T)


def test_round_trips_1000():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(1000):
        T = random_transform(rng)
        d = pose_distance(compose(T, invert(T)), I)
        worst = max(worst, d.translation_m, math.radians(d.angle_deg))
        assert abs(np.linalg.norm(T.q) - 1) < 1e-9
    assert worst < 1e-9


def test_pose_distance_examples():
    T = rotate_x(12) @ translate(1, 2, 3)
    assert pose_distance(T, T) == (0.0, 0.0)
    d = pose_distance(I, rotate_x(5))
    assert d.translation_m == 0 and d.angle_deg == pytest.approx(5.0, abs=1e-12)
    d = pose_distance(translate(0.03, 0.04, 0), I)
    assert d.translation_m == pytest.approx(0.05, abs=1e-15) and d.angle_deg == 0


def test_pose_distance_matches_scipy_magnitude():
    rng = np.random.default_rng(3)
    for _ in range(50):
        A, B = random_transform(rng), random_transform(rng)
        ra = Rotation.from_matrix(A.rotation)
        rb = Rotation.from_matrix(B.rotation)
        expected = math.degrees((ra.inv() * rb).magnitude())
        assert pose_distance(A, B).angle_deg == pytest.approx(expected, abs=1e-7)
        assert pose_distance(A, B) == pytest.approx(pose_distance(B, A), abs=1e-9)


def test_within_is_strict_by_default():
    d = pose_distance(translate(0.05, 0, 0), I)
    assert not d.within(0.05, 5)
    assert d.within(0.05, 5, inclusive=True)


@settings(max_examples=100, deadline=None)
@given(transforms, transforms, transforms)
def test_right_multiplication_preserves_angle(A, B, T):
    assert pose_distance(compose(A, T), compose(B, T)).angle_deg == pytest.approx(
        pose_distance(A, B).angle_deg, abs=1e-6
    )


def test_error_vector_examples():
    np.testing.assert_array_equal(error_vector(I).as_vector(), np.zeros(6))
    r = error_vector(translate(1, 2, 3))
    np.testing.assert_array_equal(r.qvec, [0, 0, 0])
    np.testing.assert_array_equal(r.tvec, [1, 2, 3])


def test_error_vector_half_turn_against_scipy():
    x, y, z, w = Rotation.from_rotvec([0, 0, math.pi]).as_quat()
    if w < 0:
        x, y, z, w = -x, -y, -z, -w
    r = error_vector(rotate_z(180))
    np.testing.assert_allclose(r.qvec, [x, y, z], atol=1e-12)
    np.testing.assert_allclose(r.qvec, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(r.tvec, 0, atol=1e-12)


def test_error_vector_zero_iff_identity():
    assert is_identity(I)
    assert not is_identity(translate(1e-6, 0, 0))
    assert not is_identity(rotate_x(1e-4))


def test_canonical_sign():
    T = RigidTransform(np.array([-1.0, 0, 0, 0]), np.zeros(3))
    assert T.q[0] == 1.0


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        RigidTransform(np.zeros(4), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.array([1.0, 0, 0, 0]), [np.nan, 0, 0])


def test_bytes_round_trip():
    T = rotate_z(17) @ translate(0.1, 0.2, 0.3)
    raw = T.to_bytes()
    assert len(raw) == 56
    U = RigidTransform.from_bytes(raw)
    np.testing.assert_array_equal(U.as_array(), T.as_array())


def test_dual_quaternion_unit_and_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(50):
        T = random_transform(rng)
        dq = DualQuaternion.from_transform(T)
        assert abs(np.linalg.norm(dq.real) - 1) < 1e-9
        assert abs(np.dot(dq.real, dq.dual)) < 1e-9
        assert_same(dq.to_transform(), T)


def test_blend_idempotent():
    T = rotate_x(40) @ translate(1, -2, 0.5)
    assert_same(dqb_blend([T, T, T]), T)


def test_blend_translations_linear():
    assert_same(dqb_blend([translate(1, 0, 0), translate(3, 0, 0)]), translate(2, 0, 0))


def test_blend_symmetric_rotations_against_slerp():
    B = dqb_blend([rotate_z(10), rotate_z(-10)])
    key = Rotation.from_rotvec([[0, 0, math.radians(10)], [0, 0, math.radians(-10)]])
    mid = Slerp([0, 1], key)([0.5])[0]
    assert Rotation.from_matrix(B.rotation).inv().__mul__(mid).magnitude() < 1e-9
    assert pose_distance(B, I).angle_deg < 1e-7


def test_blend_handles_antipodal_samples():
    T = rotate_z(30)
    flipped = RigidTransform.__new__(RigidTransform)
    object.__setattr__(flipped, "q", -T.q)
    object.__setattr__(flipped, "t", T.t)
    assert_same(dqb_blend([T, flipped]), T)


def test_blend_weight_rescaling_invariant():
    rng = np.random.default_rng(9)
    samples = [random_transform(rng, 0.5) for _ in range(4)]
    samples = [compose(samples[0], rotate_x(5 * i)) for i in range(4)]
    w = [1.0, 2.0, 0.5, 3.0]
    a = dqb_blend(samples, w).as_array()
    b = dqb_blend(samples, [10 * x for x in w]).as_array()
    np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_blend_errors():
    with pytest.raises(ValueError, match="no samples to blend"):
        dqb_blend([])
    with pytest.raises(ValueError):
        dqb_blend([I], [0.0])
