"""Relative-transform clustering, confident-edge pose graphs and their optimisation."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .se3 import (
    RigidTransform,
    compose,
    dqb_blend,
    error_vector,
    invert,
    pose_distance,
)

log = logging.getLogger(__name__)

CONFIDENCE_THRESHOLD = 2
CLUSTER_TRANSLATION_M = 0.10
CLUSTER_ANGLE_DEG = 20.0


@dataclass(frozen=True)
class RelativeTransformSample:
    """``transform`` maps scene ``pair[1]`` coordinates into scene ``pair[0]``."""

    pair: tuple[int, int]
    transform: RigidTransform
    frame_ref: tuple[int, int] | None = None

    @classmethod
    def oriented(cls, target: int, source: int, transform: RigidTransform, frame_ref=None):
        """Build a sample in canonical (low, high) order from a target<-source estimate."""
        if target == source:
            return cls((target, source), transform, frame_ref)
        if target < source:
            return cls((target, source), transform, frame_ref)
        return cls((source, target), invert(transform), frame_ref)


def close_enough(A: RigidTransform, B: RigidTransform,
                 translation_m: float = CLUSTER_TRANSLATION_M,
                 angle_deg: float = CLUSTER_ANGLE_DEG) -> bool:
    return pose_distance(A, B).within(translation_m, angle_deg)


@dataclass
class SampleCluster:
    members: list = field(default_factory=list)
    blended: RigidTransform | None = None

    def __len__(self):
        return len(self.members)

    def accepts(self, sample: RelativeTransformSample) -> bool:
        return any(close_enough(m.transform, sample.transform) for m in self.members)

    def add(self, sample: RelativeTransformSample) -> None:
        self.members.append(sample)
        self.blended = dqb_blend([m.transform for m in self.members])


@dataclass
class PairClusterSet:
    pair: tuple[int, int]
    clusters: list = field(default_factory=list)
    confidence_threshold: int = CONFIDENCE_THRESHOLD

    def add_sample(self, sample: RelativeTransformSample) -> bool:
        """Insert into the first compatible cluster; True when that cluster is now confident."""
        if sample.pair != self.pair:
            raise ValueError(f"sample pair {sample.pair} does not match {self.pair}")
        for cluster in self.clusters:
            if cluster.accepts(sample):
                break
        else:
            cluster = SampleCluster()
            self.clusters.append(cluster)
        cluster.add(sample)
        return len(cluster) >= self.confidence_threshold

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]

    def largest(self) -> SampleCluster | None:
        best = None
        for c in self.clusters:
            # ties keep the earliest-created cluster
            if best is None or len(c) > len(best):
                best = c
        return best

    @property
    def confident(self) -> bool:
        best = self.largest()
        return best is not None and len(best) >= self.confidence_threshold

    def __len__(self):
        return sum(self.sizes())


def add_sample(cluster_set: PairClusterSet, sample: RelativeTransformSample):
    trigger = cluster_set.add_sample(sample)
    return cluster_set, trigger


class SafetyMargin(NamedTuple):
    correct_size: int
    largest_incorrect_size: int
    margin: int


def margin_from_sizes(correct_size: int, largest_incorrect_size: int) -> int:
    return correct_size - largest_incorrect_size


def safety_margin(cluster_set: PairClusterSet, gt: RigidTransform | None = None) -> SafetyMargin:
    """Correct cluster = largest; incorrect = largest cluster whose blend is not
    within (10cm, 20deg) of the correct blend.

    When ``gt`` is given, a largest cluster that is itself not within tolerance
    of ``gt`` is logged, since the margin is then measured against a wrong winner.
    """
    correct = cluster_set.largest()
    if correct is None:
        raise ValueError("cluster set is empty")
    if gt is not None and not close_enough(correct.blended, gt):
        log.warning("largest cluster for %s disagrees with ground truth", cluster_set.pair)
    incorrect = 0
    for c in cluster_set.clusters:
        if c is correct or close_enough(c.blended, correct.blended):
            continue
        incorrect = max(incorrect, len(c))
    return SafetyMargin(len(correct), incorrect, margin_from_sizes(len(correct), incorrect))


@dataclass
class PoseGraph:
    """Nodes are scene ids; ``edges[(a, b)]`` (a < b) maps b's frame into a's.

    ``poses[s]`` maps scene ``s`` coordinates into the global (first agent) frame.
    """

    nodes: list
    edges: dict
    anchor: int
    poses: dict = field(default_factory=dict)

    def copy(self) -> PoseGraph:
        return PoseGraph(list(self.nodes), dict(self.edges), self.anchor, dict(self.poses))


class OptimisationReport(NamedTuple):
    initial_residual: float
    final_residual: float
    iterations: int
    converged: bool
    history: tuple = ()


def candidate_graph(all_sets: Iterable[PairClusterSet]) -> dict:
    edges = {}
    for s in all_sets:
        best = s.largest()
        if best is not None and len(best) >= s.confidence_threshold and s.pair[0] != s.pair[1]:
            edges[s.pair] = best.blended
    return edges


def connected_component(nodes: Iterable[int], edges: Mapping, start: int) -> list[int]:
    adj = {n: [] for n in nodes}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    seen = {start}
    frontier = deque([start])
    while frontier:
        n = frontier.popleft()
        for m in sorted(adj.get(n, ())):
            if m not in seen:
                seen.add(m)
                frontier.append(m)
    return sorted(seen)


def build_pose_graph(all_sets: Iterable[PairClusterSet], scene_ids: Sequence[int], first_agent: int) -> PoseGraph | None:
    edges = candidate_graph(all_sets)
    component = connected_component(scene_ids, edges, first_agent)
    if len(component) < 2:
        return None
    members = set(component)
    sub = {p: T for p, T in sorted(edges.items()) if p[0] in members and p[1] in members}
    return PoseGraph(component, sub, first_agent)


def initial_poses(graph: PoseGraph) -> dict:
    """Breadth-first composition of edge transforms outward from the anchor."""
    poses = {graph.anchor: RigidTransform.identity()}
    adj = {n: [] for n in graph.nodes}
    for (a, b), T in graph.edges.items():
        adj[a].append((b, T))
        adj[b].append((a, invert(T)))
    frontier = deque([graph.anchor])
    while frontier:
        n = frontier.popleft()
        for m, T_nm in sorted(adj[n], key=lambda x: x[0]):
            # T_nm maps m into n
            if m not in poses:
                poses[m] = compose(poses[n], T_nm)
                frontier.append(m)
    if len(poses) != len(graph.nodes):
        raise ValueError("pose graph is disconnected")
    return poses


def edge_residual(g_a: RigidTransform, g_b: RigidTransform, a_T_b: RigidTransform,
                  rotation_weight: float = 1.0) -> np.ndarray:
    return error_vector(compose(compose(invert(g_b), g_a), a_T_b)).as_vector(rotation_weight)


def graph_error(graph: PoseGraph, poses: Mapping | None = None, rotation_weight: float = 1.0) -> float:
    """Sum over edges of the L2 norm of the 6-vector pose residual."""
    poses = graph.poses if poses is None else poses
    total = 0.0
    for (a, b), T in graph.edges.items():
        total += float(np.linalg.norm(edge_residual(poses[a], poses[b], T, rotation_weight)))
    return total


def _qmul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise Hamilton product of (..., 4) quaternion arrays."""
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack(
        [
            pw * qw - px * qx - py * qy - pz * qz,
            pw * qx + px * qw + py * qz - pz * qy,
            pw * qy - px * qz + py * qw + pz * qx,
            pw * qz + px * qy - py * qx + pz * qw,
        ],
        axis=-1,
    )


def _qrot(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternions q (..., 4)."""
    w = q[..., :1]
    u = q[..., 1:]
    c = 2.0 * np.cross(u, v)
    return v + w * c + np.cross(u, c)


def _exp_quat(rotvec: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(x/2)/x with its series limit at 0
    k = np.where(angle > 1e-8, np.sin(half) / np.where(angle > 0, angle, 1.0), 0.5 - angle**2 / 48.0)
    return np.concatenate([np.cos(half), k * rotvec], axis=-1)


class _EdgeSystem:
    """Array form of the graph: node quaternions/translations and edge indices."""

    def __init__(self, graph: PoseGraph, rotation_weight: float):
        self.index = {n: i for i, n in enumerate(graph.nodes)}
        self.ia = np.array([self.index[a] for a, _ in graph.edges], dtype=np.int64)
        self.ib = np.array([self.index[b] for _, b in graph.edges], dtype=np.int64)
        self.eq = np.array([T.q for T in graph.edges.values()]).reshape(-1, 4)
        self.et = np.array([T.t for T in graph.edges.values()]).reshape(-1, 3)
        self.rw = rotation_weight

    def residuals(self, q: np.ndarray, t: np.ndarray) -> np.ndarray:
        qa, qb = q[self.ia], q[self.ib]
        ta, tb = t[self.ia], t[self.ib]
        qb_inv = qb * np.array([1.0, -1.0, -1.0, -1.0])
        rq = _qmul(_qmul(qb_inv, qa), self.eq)
        rt = _qrot(qb_inv, _qrot(qa, self.et) + ta - tb)
        sign = np.where(rq[:, :1] < 0, -1.0, 1.0)
        return np.concatenate([self.rw * sign * rq[:, 1:], rt], axis=1)


def _retract_arrays(q, t, free_idx, delta):
    """Left rotation increment and additive translation on the free nodes."""
    q = q.copy()
    t = t.copy()
    d = delta.reshape(-1, 6)
    q[free_idx] = _qmul(_exp_quat(d[:, :3]), q[free_idx])
    q[free_idx] /= np.linalg.norm(q[free_idx], axis=1, keepdims=True)
    t[free_idx] += d[:, 3:]
    return q, t


@dataclass
class LMSettings:
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 10.0
    max_iterations: int = 100
    min_step: float = 1e-8
    min_relative_decrease: float = 1e-10
    jacobian_step: float = 1e-7
    rotation_weight: float = 1.0
    min_floor: float = 1e-12


def optimise(graph: PoseGraph, settings: LMSettings | None = None, initial: Mapping | None = None):
    """Levenberg-Marquardt on the sum of per-edge residual norms.

    Each iteration linearises a reweighted least-squares problem (edge
    weight ``(||r_e||^2 + floor^2)^(-1/2)``) whose cost matches the error at
    the linearisation point; the floor is annealed towards zero so edges that
    are already satisfied do not freeze their nodes. A step is accepted only
    when it lowers the true error, so the error never increases.
    """
    settings = settings or LMSettings()
    if initial is None:
        poses = initial_poses(graph)
    else:
        poses = dict(initial)
        poses[graph.anchor] = RigidTransform.identity()
        if set(poses) != set(graph.nodes):
            raise ValueError("initial poses must cover every graph node")
        if len(connected_component(graph.nodes, graph.edges, graph.anchor)) != len(graph.nodes):
            raise ValueError("pose graph is disconnected")
    system = _EdgeSystem(graph, settings.rotation_weight)
    q = np.array([poses[n].q for n in graph.nodes])
    t = np.array([poses[n].t for n in graph.nodes])
    free_idx = np.array([system.index[n] for n in graph.nodes if n != graph.anchor], dtype=np.int64)
    n_free = len(free_idx)
    n_edges = len(graph.edges)

    def cost(qq, tt):
        return float(np.linalg.norm(system.residuals(qq, tt), axis=1).sum())

    current = cost(q, t)
    initial_cost = current
    history = [current]
    lam = settings.initial_damping
    converged = False
    iterations = 0
    h = settings.jacobian_step
    floor = max(current / max(n_edges, 1), settings.min_floor)
    for iterations in range(1, settings.max_iterations + 1):
        if current == 0.0 or n_free == 0:
            converged = True
            break
        res = system.residuals(q, t)
        sw = ((res * res).sum(axis=1) + floor * floor) ** -0.25
        r = (sw[:, None] * res).ravel()
        J = np.empty((6 * n_edges, 6 * n_free))
        for c in range(6 * n_free):
            d = np.zeros(6 * n_free)
            d[c] = h
            rp = system.residuals(*_retract_arrays(q, t, free_idx, d))
            rm = system.residuals(*_retract_arrays(q, t, free_idx, -d))
            J[:, c] = (sw[:, None] * (rp - rm)).ravel() / (2 * h)
        JtJ = J.T @ J
        g = J.T @ r
        accepted = False
        while lam < 1e12:
            A = JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                lam *= settings.damping_up
                continue
            tq, tt = _retract_arrays(q, t, free_idx, step)
            new = cost(tq, tt)
            if new < current:
                accepted = True
                break
            lam *= settings.damping_up
        if not accepted:
            if floor > settings.min_floor:
                floor = max(floor * 0.1, settings.min_floor)
                lam = settings.initial_damping
                continue
            converged = True
            break
        decrease = (current - new) / max(current, 1e-300)
        q, t, current = tq, tt, new
        history.append(current)
        lam = max(lam / settings.damping_down, 1e-15)
        small = np.linalg.norm(step) < settings.min_step or decrease < settings.min_relative_decrease
        if small and floor <= settings.min_floor:
            converged = True
            break
        floor = max(floor * 0.5, settings.min_floor)
    out = graph.copy()
    out.poses = {n: RigidTransform(q[i], t[i]) for n, i in system.index.items()}
    out.poses[graph.anchor] = RigidTransform.identity()
    return out, OptimisationReport(initial_cost, current, iterations, converged, tuple(history))
