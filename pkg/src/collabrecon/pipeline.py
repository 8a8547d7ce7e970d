"""Inter-agent relocalisation: candidate scheduling, attempts and depth verification."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .alignment import CONFIDENCE_THRESHOLD, PairClusterSet, RelativeTransformSample
from .se3 import RigidTransform, compose, invert, pose_distance

log = logging.getLogger(__name__)

CANDIDATES_PER_ATTEMPT = 10
INTERACTIVE_FRAME_SPACING = 50
HOMOG_PENALTY = 5.0
HOMOG_TRANSLATION_M = 0.05
HOMOG_ANGLE_DEG = 5.0
COVERAGE_THRESHOLD = 0.5
DEPTH_DIFF_THRESHOLD = 0.05


class RelocCandidate(NamedTuple):
    """Relocalise trajectory frame ``frame`` of scene ``source`` against scene ``target``."""

    target: int
    source: int
    frame: int


class CandidateScore(NamedTuple):
    phi_new: float
    phi_conf: float
    phi_homog: float
    total: float


class Verdict(str, Enum):
    ACCEPTED = "accepted"
    REJECTED_COVERAGE = "rejected_coverage"
    REJECTED_DEPTH_DIFF = "rejected_depth_diff"
    REJECTED_EMPTY_OVERLAP = "rejected_empty_overlap"
    RELOCALISER_FAILED = "relocaliser_failed"


@dataclass(frozen=True)
class VerificationReport:
    omega_size: int
    omega_a: int
    omega_b: int
    omega_ab: int
    coverage_ratio: float
    mu: float | None
    verdict: Verdict

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPTED


def verify_depth(
    depth_a: np.ndarray,
    depth_b: np.ndarray,
    coverage_threshold: float = COVERAGE_THRESHOLD,
    depth_threshold: float = DEPTH_DIFF_THRESHOLD,
) -> VerificationReport:
    """Masked mean absolute depth difference test between two raycasts.

    Rejects when the proposed view of ``a`` covers at most ``coverage_threshold``
    of the image, or when the mean difference over co-valid pixels is not
    strictly below ``depth_threshold``.
    """
    depth_a = np.asarray(depth_a)
    depth_b = np.asarray(depth_b)
    if depth_a.shape != depth_b.shape:
        raise ValueError(f"depth shapes differ: {depth_a.shape} vs {depth_b.shape}")
    valid_a = depth_a > 0
    valid_b = depth_b > 0
    both = valid_a & valid_b
    n = depth_a.size
    na, nb, nab = int(valid_a.sum()), int(valid_b.sum()), int(both.sum())
    coverage = na / n if n else 0.0
    mu = None
    if nab > 0:
        mu = float(np.abs(depth_a[both].astype(float) - depth_b[both].astype(float)).mean())
    if not coverage > coverage_threshold:
        verdict = Verdict.REJECTED_COVERAGE
    elif nab == 0:
        verdict = Verdict.REJECTED_EMPTY_OVERLAP
    elif mu < depth_threshold:
        verdict = Verdict.ACCEPTED
    else:
        verdict = Verdict.REJECTED_DEPTH_DIFF
    return VerificationReport(n, na, nb, nab, coverage, mu, verdict)


class AttemptLog:
    """Source poses already tried, per ordered (target, source) pair. Append-only."""

    def __init__(self):
        self._tried: dict[tuple[int, int], list[RigidTransform]] = {}

    def add(self, target: int, source: int, pose: RigidTransform) -> None:
        self._tried.setdefault((target, source), []).append(pose)

    def tried(self, target: int, source: int) -> list[RigidTransform]:
        return list(self._tried.get((target, source), ()))

    def near(self, target: int, source: int, pose: RigidTransform,
             translation_m: float = HOMOG_TRANSLATION_M, angle_deg: float = HOMOG_ANGLE_DEG) -> bool:
        return any(
            pose_distance(pose, p).within(translation_m, angle_deg)
            for p in self._tried.get((target, source), ())
        )

    def __len__(self):
        return sum(len(v) for v in self._tried.values())


def canonical_pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a <= b else (b, a)


def _trajectory_length(scene) -> int:
    return len(scene.trajectory)


def generate_candidates(scenes: Sequence, rng: np.random.Generator, count: int = CANDIDATES_PER_ATTEMPT) -> list[RelocCandidate]:
    """Draw ``count`` candidates: uniform unordered pair, uniform direction, uniform frame.

    ``scenes`` are objects exposing ``scene_id`` and ``trajectory``.
    """
    usable = sorted((s for s in scenes if _trajectory_length(s) > 0), key=lambda s: s.scene_id)
    if len(usable) < 2:
        return []
    by_id = {s.scene_id: s for s in usable}
    pairs = list(itertools.combinations(sorted(by_id), 2))
    out = []
    for _ in range(count):
        a, b = pairs[int(rng.integers(len(pairs)))]
        if rng.integers(2):
            a, b = b, a
        i = int(rng.integers(_trajectory_length(by_id[b])))
        out.append(RelocCandidate(a, b, i))
    return out


def score_candidate(
    k: RelocCandidate,
    source_pose: RigidTransform,
    posed: Iterable[int],
    cluster_sets: Mapping[tuple[int, int], PairClusterSet],
    attempts: AttemptLog,
    confidence_threshold: int = CONFIDENCE_THRESHOLD,
) -> CandidateScore:
    posed = set(posed)
    phi_new = 1.0 if (k.target in posed) != (k.source in posed) else 0.0
    clusters = cluster_sets.get(canonical_pair(k.target, k.source))
    phi_conf = 0.0
    if clusters is not None and clusters.clusters:
        phi_conf = float(max(0, max(clusters.sizes()) - confidence_threshold))
    phi_homog = HOMOG_PENALTY if attempts.near(k.target, k.source, source_pose) else 0.0
    return CandidateScore(phi_new, phi_conf, phi_homog, phi_new - phi_conf - phi_homog)


def pick_best(candidates: Sequence[RelocCandidate], scores: Sequence[CandidateScore]) -> RelocCandidate | None:
    best = None
    best_total = -math.inf
    for k, s in zip(candidates, scores):
        # strict comparison keeps the first of equal totals
        if s.total > best_total:
            best, best_total = k, s.total
    return best


class Mode(str, Enum):
    BATCH = "batch"
    INTERACTIVE = "interactive"


@dataclass
class Scheduler:
    """Decides when an attempt may run and which candidate it uses."""

    mode: Mode = Mode.BATCH
    seed: int = 0
    frame_spacing: int = INTERACTIVE_FRAME_SPACING
    attempts: AttemptLog = field(default_factory=AttemptLog)
    frames_since_attempt: int = 0

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.rng = np.random.default_rng(self.seed)

    def note_frames_fused(self, n: int = 1) -> None:
        self.frames_since_attempt += n

    def ready(self, streams_exhausted: bool) -> bool:
        if self.mode is Mode.BATCH:
            return streams_exhausted
        return self.frames_since_attempt >= self.frame_spacing

    def schedule(self, scenes, posed, cluster_sets, streams_exhausted: bool):
        """Return ``(candidate, score)`` for the best of a fresh candidate list, or None."""
        if not self.ready(streams_exhausted):
            return None
        candidates = generate_candidates(scenes, self.rng)
        if not candidates:
            return None
        by_id = {s.scene_id: s for s in scenes}
        scores = [
            score_candidate(k, by_id[k.source].trajectory[k.frame][1], posed, cluster_sets, self.attempts)
            for k in candidates
        ]
        best = pick_best(candidates, scores)
        self.frames_since_attempt = 0
        return best, scores[candidates.index(best)]


def schedule_attempt(scheduler: Scheduler, scenes, posed, cluster_sets, streams_exhausted: bool):
    result = scheduler.schedule(scenes, posed, cluster_sets, streams_exhausted)
    return None if result is None else result[0]


@dataclass(frozen=True)
class FrameHint:
    """Context handed to relocalisers; only the oracle looks at it."""

    target: int
    source: int
    frame: int
    source_pose: RigidTransform


@dataclass
class AttemptRecord:
    candidate: RelocCandidate
    score: CandidateScore | None
    verdict: Verdict
    report: VerificationReport | None = None
    proposed_pose: RigidTransform | None = None
    relative: RigidTransform | None = None
    sample: RelativeTransformSample | None = None

    def to_json(self) -> dict:
        r = self.report
        return {
            "target": self.candidate.target,
            "source": self.candidate.source,
            "frame": self.candidate.frame,
            "score": None if self.score is None else dict(self.score._asdict()),
            "verdict": self.verdict.value,
            "mu": None if r is None else r.mu,
            "coverage": None if r is None else r.coverage_ratio,
            "omega": None if r is None else [r.omega_size, r.omega_a, r.omega_b, r.omega_ab],
            "transform": None if self.relative is None else [float(x) for x in self.relative.as_array()],
        }


def relative_from_poses(pose_in_target: RigidTransform, pose_in_source: RigidTransform) -> RigidTransform:
    """Transform mapping source-scene coordinates to target-scene coordinates.

    Both poses are camera-to-scene for the same frame.
    """
    return compose(pose_in_target, invert(pose_in_source))


def attempt_relocalisation(k: RelocCandidate, scenes: Mapping, K, attempts: AttemptLog | None = None,
                           score: CandidateScore | None = None) -> AttemptRecord:
    """Raycast the source view, relocalise it in the target and verify by depth.

    ``scenes`` maps scene ids to objects with ``volume``, ``trajectory`` (list of
    ``(frame_index, pose)``) and ``relocaliser``.
    """
    source = scenes[k.source]
    target = scenes[k.target]
    source_pose = source.trajectory[k.frame][1]
    if attempts is not None:
        attempts.add(k.target, k.source, source_pose)
    depth_b, color_b = source.volume.raycast(source_pose, K)
    hint = FrameHint(k.target, k.source, k.frame, source_pose)
    proposed = target.relocaliser.relocalise(color_b, depth_b, K, hint=hint)
    if proposed is None:
        log.debug("relocaliser of scene %d failed on %s", k.target, k)
        return AttemptRecord(k, score, Verdict.RELOCALISER_FAILED)
    depth_a, _ = target.volume.raycast(proposed, K)
    report = verify_depth(depth_a, depth_b)
    relative = relative_from_poses(proposed, source_pose)
    sample = None
    if report.accepted:
        sample = RelativeTransformSample.oriented(k.target, k.source, relative, (k.source, k.frame))
    return AttemptRecord(k, score, report.verdict, report, proposed, relative, sample)


class VerifierMetrics(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    specificity: float


def _ratio(num: int, den: int) -> float:
    return num / den if den else math.nan


def verifier_metrics(records: Iterable[tuple]) -> VerifierMetrics:
    """Confusion counts from ``(verified, correct)`` pairs.

    ``verified`` may be a bool or a :class:`Verdict`; ratios with an empty
    denominator are NaN.
    """
    tp = fp = tn = fn = 0
    for verdict, correct in records:
        if isinstance(verdict, (bool, np.bool_)):
            verified = bool(verdict)
        else:
            verified = Verdict(verdict) is Verdict.ACCEPTED
        if verified and correct:
            tp += 1
        elif verified:
            fp += 1
        elif correct:
            fn += 1
        else:
            tn += 1
    return metrics_from_counts(tp, fp, tn, fn)


def metrics_from_counts(tp: int, fp: int, tn: int, fn: int) -> VerifierMetrics:
    return VerifierMetrics(tp, fp, tn, fn, _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(tn, tn + fp))


def is_correct(estimate: RigidTransform, truth: RigidTransform,
               translation_m: float = 0.05, angle_deg: float = 5.0) -> bool:
    return pose_distance(estimate, truth).within(translation_m, angle_deg, inclusive=True)
