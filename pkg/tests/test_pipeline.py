import math
from types import SimpleNamespace

import numpy as np
import pytest

from collabrecon.alignment import PairClusterSet, RelativeTransformSample
from collabrecon.evaluation import cluster_records, evaluate, format_table, labelled, true_relative
from collabrecon.pipeline import (
    AttemptLog,
    Mode,
    RelocCandidate,
    Scheduler,
    Verdict,
    attempt_relocalisation,
    generate_candidates,
    is_correct,
    metrics_from_counts,
    pick_best,
    relative_from_poses,
    score_candidate,
    verifier_metrics,
    verify_depth,
)
from collabrecon.se3 import RigidTransform, compose, invert, pose_distance, rotate_z, translate

I = RigidTransform.identity()


# -- verifier ------------------------------------------------------------------


def test_identical_raycasts_accept_with_zero_mu():
    d = np.full((10, 10), 2.0, np.float32)
    r = verify_depth(d, d.copy())
    assert r.mu == 0.0 and r.accepted and r.coverage_ratio == 1.0


def test_coverage_boundary_is_exclusive():
    a = np.zeros((10, 10), np.float32)
    a[:5] = 2.0
    b = np.full((10, 10), 2.0, np.float32)
    assert verify_depth(a, b).verdict is Verdict.REJECTED_COVERAGE
    a[5, 0] = 2.0
    assert verify_depth(a, b).accepted


def test_depth_boundary_is_exclusive():
    # 0.1 - 0.05 is exactly 0.05 in binary floating point
    a = np.full((4, 4), 0.05)
    assert verify_depth(a, 2 * a).mu == 0.05
    assert verify_depth(a, 2 * a).verdict is Verdict.REJECTED_DEPTH_DIFF
    assert verify_depth(a, np.nextafter(2 * a, 0)).accepted


def test_empty_overlap():
    a = np.full((4, 4), 2.0)
    r = verify_depth(a, np.zeros((4, 4)))
    assert r.verdict is Verdict.REJECTED_EMPTY_OVERLAP and r.mu is None


def test_mu_is_masked_mean():
    a = np.array([[1.0, 2.0, 0.0, 3.0]])
    b = np.array([[1.01, 0.0, 5.0, 3.03]])
    r = verify_depth(a, b)
    assert (r.omega_a, r.omega_b, r.omega_ab) == (3, 3, 2)
    assert r.mu == pytest.approx(0.02)
    assert r.coverage_ratio == 0.75


def test_shape_mismatch():
    with pytest.raises(ValueError):
        verify_depth(np.zeros((2, 2)), np.zeros((3, 2)))


# -- scoring --------------------------------------------------------------------


def _confident_set(pair, n):
    cs = PairClusterSet(pair)
    for _ in range(n):
        cs.add_sample(RelativeTransformSample(pair, I))
    return cs


def test_new_node_outranks_confident_pair():
    log = AttemptLog()
    sets = {(0, 1): _confident_set((0, 1), 5)}
    k_new = RelocCandidate(0, 2, 0)
    k_conf = RelocCandidate(0, 1, 0)
    s_new = score_candidate(k_new, I, {0, 1}, sets, log)
    s_conf = score_candidate(k_conf, I, {0, 1}, sets, log)
    assert s_new == (1.0, 0.0, 0.0, 1.0)
    assert s_conf == (0.0, 3.0, 0.0, -3.0)
    assert pick_best([k_conf, k_new], [s_conf, s_new]) == k_new


def test_phi_new_needs_exactly_one_posed():
    log = AttemptLog()
    k = RelocCandidate(1, 2, 0)
    assert score_candidate(k, I, {0}, {}, log).phi_new == 0.0
    assert score_candidate(k, I, {0, 1, 2}, {}, log).phi_new == 0.0
    assert score_candidate(k, I, {0, 2}, {}, log).phi_new == 1.0


def test_phi_conf_floor_at_threshold():
    log = AttemptLog()
    k = RelocCandidate(0, 1, 0)
    assert score_candidate(k, I, {0}, {(0, 1): _confident_set((0, 1), 2)}, log).phi_conf == 0.0
    assert score_candidate(k, I, {0}, {(0, 1): _confident_set((0, 1), 4)}, log).phi_conf == 2.0


def test_homogeneity_penalty_strict_boundary():
    log = AttemptLog()
    log.add(0, 1, I)
    k = RelocCandidate(0, 1, 3)
    just_inside = translate(0.0499, 0, 0)
    at_edge = translate(0.05, 0, 0)
    assert score_candidate(k, just_inside, set(), {}, log).phi_homog == 5.0
    assert score_candidate(k, at_edge, set(), {}, log).phi_homog == 0.0
    assert score_candidate(k, rotate_z(4.99), set(), {}, log).phi_homog == 5.0
    assert score_candidate(k, rotate_z(5.0), set(), {}, log).phi_homog == 0.0
    # the log is per ordered pair
    assert score_candidate(RelocCandidate(1, 0, 3), I, set(), {}, log).phi_homog == 0.0


def test_pick_best_keeps_first_of_ties():
    ks = [RelocCandidate(0, 1, i) for i in range(3)]
    s = score_candidate(ks[0], I, set(), {}, AttemptLog())
    assert pick_best(ks, [s, s, s]) == ks[0]
    assert pick_best([], []) is None


# -- candidate generation and scheduling ---------------------------------------


def _scenes(lengths):
    return [SimpleNamespace(scene_id=i, trajectory=[(j, I) for j in range(n)]) for i, n in enumerate(lengths)]


def test_candidates_cover_pairs_and_frames():
    rng = np.random.default_rng(0)
    scenes = _scenes([5, 7, 0])
    ks = generate_candidates(scenes, rng, count=2000)
    assert len(ks) == 2000
    assert {(k.target, k.source) for k in ks} == {(0, 1), (1, 0)}
    for k in ks:
        assert 0 <= k.frame < len(scenes[k.source].trajectory)
    assert generate_candidates(_scenes([5]), rng) == []


def test_batch_scheduler_waits_for_streams():
    s = Scheduler(Mode.BATCH, seed=1)
    scenes = _scenes([3, 3])
    assert s.schedule(scenes, {0}, {}, streams_exhausted=False) is None
    k, score = s.schedule(scenes, {0}, {}, streams_exhausted=True)
    assert score.phi_new == 1.0


def test_interactive_spacing():
    s = Scheduler(Mode.INTERACTIVE, seed=2)
    scenes = _scenes([3, 3])
    fired = []
    for frame in range(1, 501):
        s.note_frames_fused()
        if s.schedule(scenes, {0}, {}, streams_exhausted=False) is not None:
            fired.append(frame)
    assert fired == list(range(50, 501, 50))
    assert min(np.diff(fired)) >= 50


def test_scheduler_deterministic():
    scenes = _scenes([10, 10, 10])
    a = [Scheduler(Mode.BATCH, seed=3).schedule(scenes, {0}, {}, True) for _ in range(3)]
    b = [Scheduler(Mode.BATCH, seed=3).schedule(scenes, {0}, {}, True) for _ in range(3)]
    assert a == b


# -- attempts -------------------------------------------------------------------


class _Volume:
    def __init__(self, fn):
        self.fn = fn

    def raycast(self, pose, K):
        return self.fn(pose), np.zeros((4, 4, 3), np.uint8)


class _Reloc:
    def __init__(self, answer):
        self.answer = answer

    def relocalise(self, color, depth, K, hint=None):
        return self.answer


def test_relative_from_poses():
    truth = rotate_z(30) @ translate(1, 0, 0)  # source coordinates into target
    P_src = translate(0.2, 0.3, 0.1) @ rotate_z(-10)
    P_tgt = compose(truth, P_src)
    R = relative_from_poses(P_tgt, P_src)
    assert pose_distance(R, truth).translation_m < 1e-12


def test_attempt_accepts_consistent_proposal():
    P_src = translate(0.1, 0, 0)
    P_tgt = translate(1.1, 0, 0)
    flat = lambda pose: np.full((4, 4), 2.0, np.float32)
    scenes = {
        0: SimpleNamespace(volume=_Volume(flat), trajectory=[], relocaliser=_Reloc(P_tgt)),
        1: SimpleNamespace(volume=_Volume(flat), trajectory=[(0, P_src)], relocaliser=None),
    }
    log = AttemptLog()
    rec = attempt_relocalisation(RelocCandidate(0, 1, 0), scenes, None, log)
    assert rec.verdict is Verdict.ACCEPTED
    assert rec.sample.pair == (0, 1)
    np.testing.assert_allclose(rec.sample.transform.t, [1.0, 0, 0], atol=1e-12)
    assert len(log) == 1 and log.near(0, 1, P_src)
    js = rec.to_json()
    assert js["verdict"] == "accepted" and js["mu"] == 0.0


def test_attempt_records_failures():
    flat = lambda pose: np.full((4, 4), 2.0, np.float32)
    far = lambda pose: np.full((4, 4), 3.0, np.float32)
    scenes = {
        0: SimpleNamespace(volume=_Volume(far), trajectory=[], relocaliser=_Reloc(None)),
        1: SimpleNamespace(volume=_Volume(flat), trajectory=[(0, I)], relocaliser=None),
    }
    rec = attempt_relocalisation(RelocCandidate(0, 1, 0), scenes, None)
    assert rec.verdict is Verdict.RELOCALISER_FAILED and rec.sample is None
    scenes[0].relocaliser = _Reloc(I)
    rec = attempt_relocalisation(RelocCandidate(0, 1, 0), scenes, None)
    assert rec.verdict is Verdict.REJECTED_DEPTH_DIFF and rec.sample is None
    assert rec.to_json()["transform"] is not None


# -- metrics and evaluation --------------------------------------------------------


def test_metrics_from_labelled_pairs():
    m = verifier_metrics([(True, True), (True, False), (False, False), (False, True), (Verdict.ACCEPTED, True)])
    assert (m.tp, m.fp, m.tn, m.fn) == (2, 1, 1, 1)
    assert m.precision == pytest.approx(2 / 3)


def test_metrics_empty_denominators_are_nan():
    m = metrics_from_counts(0, 0, 0, 0)
    assert math.isnan(m.precision) and math.isnan(m.recall) and math.isnan(m.specificity)


def test_is_correct_inclusive():
    assert is_correct(translate(0.05, 0, 0), I)
    assert not is_correct(translate(0.0501, 0, 0), I)


def _record(target, source, T, verdict="accepted"):
    return {"target": target, "source": source, "frame": 0, "verdict": verdict,
            "transform": None if T is None else list(T.as_array())}


def test_evaluate_records():
    gt = {0: I, 1: translate(1, 0, 0)}
    truth01 = true_relative(gt, 0, 1)
    assert pose_distance(truth01, translate(1, 0, 0)).translation_m < 1e-12
    records = [
        _record(0, 1, truth01),
        _record(1, 0, invert(truth01)),
        _record(0, 1, translate(3, 0, 0)),
        _record(0, 1, translate(3, 0, 0), "rejected_depth_diff"),
        _record(0, 1, None, "relocaliser_failed"),
    ]
    assert len(labelled(records, gt)) == 4
    sets = cluster_records(records)
    assert sets[(0, 1)].sizes() == [2, 1]
    out = evaluate(records, gt)
    assert out["attempts"] == 5
    assert out["verifier"] == {"tp": 2, "fp": 1, "tn": 1, "fn": 0, "precision_pct": 66.7,
                               "recall_pct": 100.0, "specificity_pct": 50.0}
    assert out["safety_margins"] == {"0-1": {"correct": 2, "largest_incorrect": 1, "margin": 1}}
    table = format_table(out)
    assert "Precision%" in table and "0-1" in table
    assert "verifier" not in evaluate(records)
