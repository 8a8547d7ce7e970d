import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from collabrecon import simclient as sc
from collabrecon.relocaliser import (
    OracleConfig,
    OracleRelocaliser,
    SceneCoordinateRelocaliser,
    compute_descriptors,
    jittered_grid,
    kabsch,
    kabsch_ransac,
    random_perturbation,
)
from collabrecon.se3 import RigidTransform, compose, invert, pose_distance, rotate_z, translate


def test_kabsch_matches_scipy_alignment():
    rng = np.random.default_rng(0)
    for _ in range(20):
        src = rng.normal(size=(30, 3))
        R = Rotation.random(random_state=rng)
        dst = R.apply(src) + rng.normal(size=3) + 0.01 * rng.normal(size=(30, 3))
        T = kabsch(src, dst)
        cs, cd = src.mean(0), dst.mean(0)
        R_ref, _ = Rotation.align_vectors(dst - cd, src - cs)
        np.testing.assert_allclose(T.rotation, R_ref.as_matrix(), atol=1e-9)
        np.testing.assert_allclose(T.t, cd - R_ref.apply(cs), atol=1e-9)


def test_kabsch_never_reflects():
    src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    dst = src * np.array([1, 1, -1])
    assert np.linalg.det(kabsch(src, dst).rotation) == pytest.approx(1.0)


def test_ransac_recovers_transform_with_outliers():
    rng = np.random.default_rng(1)
    truth = rotate_z(40) @ translate(0.5, -0.2, 1.0)
    src = rng.uniform(-1, 1, (200, 3))
    dst = truth.apply(src) + 0.002 * rng.normal(size=src.shape)
    bad = rng.random(200) < 0.4
    dst[bad] = rng.uniform(-3, 3, (bad.sum(), 3))
    res = kabsch_ransac(src, dst, rng=2)
    assert res.inliers >= (~bad).sum() - 5
    d = pose_distance(res.transform, truth)
    assert d.translation_m < 0.005 and d.angle_deg < 0.5


def test_ransac_degenerate_inputs():
    assert kabsch_ransac(np.zeros((2, 3)), np.zeros((2, 3))) is None
    line = np.outer(np.linspace(0, 1, 10), [1, 0, 0])
    assert kabsch_ransac(line, line) is None
    with pytest.raises(ValueError):
        kabsch_ransac(np.zeros((4, 3)), np.zeros((5, 3)))


def test_jittered_grid_only_valid_pixels():
    rng = np.random.default_rng(0)
    depth = np.zeros((40, 60), np.float32)
    depth[:, 30:] = 2.0
    px = jittered_grid(depth, 100, rng)
    assert len(px) > 0
    assert np.all(depth[px[:, 1], px[:, 0]] == 2.0)


def test_descriptors_shape_and_range():
    rng = np.random.default_rng(0)
    depth = rng.uniform(1, 3, (50, 60)).astype(np.float32)
    color = rng.integers(0, 256, (50, 60, 3), dtype=np.uint8)
    px = jittered_grid(depth, 64, rng)
    d = compute_descriptors(color, depth, px)
    assert d.shape == (len(px), 19)
    assert np.all(np.abs(d[:, :16]) <= 1.0) and np.all((d[:, 16:] >= 0) & (d[:, 16:] <= 1))


def test_untrained_relocaliser_returns_none():
    K = sc.DEPTH_INTRINSICS
    rl = SceneCoordinateRelocaliser()
    assert not rl.trained
    assert rl.relocalise(np.zeros((*K.shape, 3), np.uint8), np.ones(K.shape, np.float32), K) is None


@pytest.mark.slow
def test_baseline_relocalises_held_out_frames(room):
    K = sc.DEPTH_INTRINSICS
    tr = sc.sweep_trajectory(0, 150, 40, (0.1, 0.0), seed=4)
    frames = [sc.render_synthetic_frame(room, P, K) for P in tr.poses]
    rl = SceneCoordinateRelocaliser(seed=0)
    for i in range(0, 40, 2):
        rl.train(frames[i][1], frames[i][0], tr.poses[i], K)
    ok = 0
    for i in range(1, 40, 2):
        T = rl.relocalise(frames[i][1], frames[i][0], K)
        ok += T is not None and pose_distance(T, tr.poses[i]).within(0.05, 5, inclusive=True)
    assert ok >= 18


def test_reservoir_respects_capacity():
    K = sc.DEPTH_INTRINSICS
    rl = SceneCoordinateRelocaliser(capacity=1000, samples_per_frame=400)
    depth = np.full(K.shape, 2.0, np.float32)
    color = np.zeros((*K.shape, 3), np.uint8)
    for _ in range(5):
        rl.train(color, depth, RigidTransform.identity(), K)
    assert len(rl) == 1000 and rl.seen > 1000


def test_random_perturbation_ball():
    rng = np.random.default_rng(3)
    for _ in range(500):
        d = pose_distance(random_perturbation(rng, 1.0, 90.0, gaussian=False), RigidTransform.identity())
        assert d.translation_m <= 1.0 and d.angle_deg <= 90.0 + 1e-9


def test_random_perturbation_gaussian_sigma():
    rng = np.random.default_rng(4)
    t = np.array([random_perturbation(rng, 0.005, 0.5, gaussian=True).t for _ in range(4000)])
    assert t.std() == pytest.approx(0.005, rel=0.05)


def _oracle(truth, **kw):
    return OracleRelocaliser(OracleConfig(ground_truth_provider=lambda hint: truth, **kw))


def test_oracle_requires_training_and_provider():
    o = _oracle(RigidTransform.identity())
    assert o.relocalise(None, None, None) is None
    o.train(None, None, None, None)
    assert o.relocalise(None, None, None) is not None
    bare = OracleRelocaliser(OracleConfig())
    bare.train(None, None, None, None)
    assert bare.relocalise(None, None, None) is None


def test_oracle_rates():
    truth = translate(1, 2, 3)
    o = _oracle(truth, outlier_rate=0.3, failure_rate=0.1, inlier_noise=(0.005, 0.5), rng_seed=9)
    o.train(None, None, None, None)
    n, fail, outl = 5000, 0, 0
    for _ in range(n):
        T = o.relocalise(None, None, None)
        if T is None:
            fail += 1
        elif not pose_distance(T, truth).within(0.05, 5):
            outl += 1
    assert fail / n == pytest.approx(0.1, abs=0.015)
    # a few outliers land inside the inlier tolerance by chance
    assert outl / (n - fail) == pytest.approx(0.3, abs=0.03)


def test_oracle_noise_is_applied_on_the_right():
    truth = rotate_z(90) @ translate(1, 0, 0)
    o = _oracle(truth, inlier_noise=(0.01, 0.0), rng_seed=1)
    o.train(None, None, None, None)
    T = o.relocalise(None, None, None)
    noise = compose(invert(truth), T)
    assert math.isclose(pose_distance(noise, RigidTransform.identity()).angle_deg, 0.0, abs_tol=1e-9)


def test_oracle_deterministic_stream():
    def run():
        o = _oracle(translate(0, 0, 1), outlier_rate=0.5, failure_rate=0.2, inlier_noise=(0.01, 1), rng_seed=5)
        o.train(None, None, None, None)
        return [None if (T := o.relocalise(None, None, None)) is None else tuple(T.as_array()) for _ in range(50)]

    assert run() == run()


def test_oracle_config_validation():
    with pytest.raises(ValueError):
        OracleConfig(outlier_rate=1.5)
    with pytest.raises(ValueError):
        OracleConfig(failure_rate=-0.1)
