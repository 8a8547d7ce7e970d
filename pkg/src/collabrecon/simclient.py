"""Synthetic ground-truth scenes, trajectories, analytic RGB-D rendering and the streaming client.

World coordinates are z-up. Cameras use the usual vision convention (x right,
y down, z forward) and every pose is camera-to-world.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .se3 import RigidTransform, compose, invert, pose_distance
from .volume import CameraIntrinsics
from .wire import (
    DEFAULT_JPEG_QUALITY,
    Hello,
    OverflowPolicy,
    PooledQueue,
    bye,
    encode_frame,
)

log = logging.getLogger(__name__)

DEPTH_INTRINSICS = CameraIntrinsics(200.0, 200.0, 111.5, 85.5, 224, 172)
COLOR_INTRINSICS = DEPTH_INTRINSICS.resized(480, 270)
FRAME_RATE_HZ = 5.0


def _splitmix(x: np.ndarray) -> np.ndarray:
    """Vectorised splitmix64 finaliser on uint64 arrays."""
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _hash_cells(cells: np.ndarray, salt: np.ndarray) -> np.ndarray:
    h = _splitmix(salt.astype(np.uint64))
    with np.errstate(over="ignore"):
        for k in range(cells.shape[-1]):
            h = _splitmix(h ^ cells[..., k].astype(np.int64).view(np.uint64))
    return h


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color: tuple


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple


@dataclass
class SyntheticScene:
    """An axis-aligned room shell with boxes and spheres, textured procedurally.

    Primitive id 0 is the room; boxes follow, then spheres.
    """

    room_lo: tuple = (-1.5, -1.5, 0.0)
    room_hi: tuple = (1.5, 1.5, 2.4)
    boxes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)
    seed: int = 0

    @classmethod
    def generate(cls, seed: int = 0, n_boxes: int = 5, n_spheres: int = 2) -> SyntheticScene:
        rng = np.random.default_rng(seed)
        lo = np.array([-1.5, -1.5, 0.0])
        hi = np.array([1.5, 1.5, 2.4])
        boxes = []
        for _ in range(n_boxes):
            # objects stand along the walls, leaving the middle free for cameras
            angle = rng.uniform(0, 2 * math.pi)
            r = rng.uniform(0.95, 1.2)
            size = rng.uniform([0.25, 0.25, 0.3], [0.55, 0.55, 1.1])
            c = np.array([r * math.cos(angle), r * math.sin(angle)])
            blo = np.clip(c - size[:2] / 2, lo[:2] + 0.02, hi[:2] - 0.02)
            bhi = np.clip(c + size[:2] / 2, lo[:2] + 0.02, hi[:2] - 0.02)
            z0 = 0.0 if rng.random() < 0.7 else rng.uniform(0.6, 1.2)
            boxes.append(Box((*blo, z0), (*bhi, min(z0 + size[2], 2.3)), tuple(rng.uniform(0.3, 1.0, 3))))
        spheres = []
        for _ in range(n_spheres):
            angle = rng.uniform(0, 2 * math.pi)
            rad = rng.uniform(0.15, 0.3)
            r = rng.uniform(0.9, 1.1)
            center = (r * math.cos(angle), r * math.sin(angle), rng.uniform(0.5, 1.8))
            spheres.append(Sphere(center, rad, tuple(rng.uniform(0.3, 1.0, 3))))
        return cls(tuple(lo), tuple(hi), boxes, spheres, seed)

    @property
    def n_primitives(self) -> int:
        return 1 + len(self.boxes) + len(self.spheres)

    def primitive_colors(self) -> np.ndarray:
        cols = [(0.85, 0.8, 0.7)] + [b.color for b in self.boxes] + [s.color for s in self.spheres]
        return np.array(cols)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest hit parameter ``t`` (inf on miss) and primitive id per ray.

        ``origins`` and ``dirs`` are (N, 3); ``t`` is in units of ``dirs``.
        """
        n = len(dirs)
        lo = np.array(self.room_lo)
        hi = np.array(self.room_hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            exit_t = np.where(dirs > 0, (hi - origins) * inv, np.where(dirs < 0, (lo - origins) * inv, np.inf))
        t = exit_t.min(axis=1)
        inside = np.all((origins > lo) & (origins < hi), axis=1)
        t = np.where(inside & (t > 0), t, np.inf)
        prim = np.zeros(n, np.int64)
        for k, b in enumerate(self.boxes, start=1):
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (np.array(b.lo) - origins) * inv
                t2 = (np.array(b.hi) - origins) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-9) & (tmin < t)
            t = np.where(hit, tmin, t)
            prim[hit] = k
        for k, s in enumerate(self.spheres, start=1 + len(self.boxes)):
            oc = origins - np.array(s.center)
            a = np.einsum("ij,ij->i", dirs, dirs)
            bq = np.einsum("ij,ij->i", oc, dirs)
            cq = np.einsum("ij,ij->i", oc, oc) - s.radius**2
            disc = bq * bq - a * cq
            with np.errstate(invalid="ignore"):
                root = (-bq - np.sqrt(disc)) / a
            hit = (disc >= 0) & (root > 1e-9) & (root < t)
            t = np.where(hit, root, t)
            prim[hit] = k
        return t, prim

    def sdf(self, points) -> np.ndarray:
        """Signed distance to the scene surface, positive in free space."""
        p = np.asarray(points, float).reshape(-1, 3)
        lo = np.array(self.room_lo)
        hi = np.array(self.room_hi)
        d = np.minimum(p - lo, hi - p).min(axis=1)
        for b in self.boxes:
            c = (np.array(b.lo) + np.array(b.hi)) / 2
            h = (np.array(b.hi) - np.array(b.lo)) / 2
            q = np.abs(p - c) - h
            box = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
            d = np.minimum(d, box)
        for s in self.spheres:
            d = np.minimum(d, np.linalg.norm(p - np.array(s.center), axis=1) - s.radius)
        return d

    def texture(self, points: np.ndarray, prim: np.ndarray) -> np.ndarray:
        """Checker plus hashed speckle, (N, 3) uint8."""
        base = self.primitive_colors()[prim]
        checker = (np.floor(points / 0.25).astype(np.int64).sum(axis=1) & 1).astype(float)
        cells = np.floor(points / 0.04).astype(np.int64)
        h = _hash_cells(cells, prim.astype(np.int64) * 1_000_003 + self.seed)
        speckle = np.stack(
            [((h >> np.uint64(8 * k)) & np.uint64(255)).astype(float) / 255.0 for k in range(3)], axis=1
        )
        rgb = base * (0.65 + 0.35 * checker)[:, None] * 0.6 + 0.4 * speckle
        return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def _camera_rays(pose: RigidTransform, K: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    rays = K.pixel_rays().reshape(-1, 3)
    dirs = rays @ pose.rotation.T
    origins = np.broadcast_to(pose.t, dirs.shape)
    return origins, dirs


def render_depth(scene: SyntheticScene, pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    origins, dirs = _camera_rays(pose, K)
    t, _ = scene.intersect(origins, dirs)
    # rays have unit z in the camera frame, so t is the depth
    return np.where(np.isfinite(t), t, 0.0).reshape(K.shape).astype(np.float32)


def render_color(scene: SyntheticScene, pose: RigidTransform, K: CameraIntrinsics) -> np.ndarray:
    origins, dirs = _camera_rays(pose, K)
    t, prim = scene.intersect(origins, dirs)
    ok = np.isfinite(t)
    rgb = np.zeros((len(t), 3), np.uint8)
    pts = origins[ok] + dirs[ok] * t[ok, None]
    rgb[ok] = scene.texture(pts, prim[ok])
    return rgb.reshape(*K.shape, 3)


def render_synthetic_frame(scene: SyntheticScene, pose: RigidTransform, K: CameraIntrinsics,
                           K_color: CameraIntrinsics | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact analytic depth (meters) and textured colour from a camera-to-world pose.

    Colour is rendered at ``K_color`` when given, otherwise on the depth grid.
    """
    return render_depth(scene, pose, K), render_color(scene, pose, K if K_color is None else K_color)


def look_pose(position, yaw_deg: float, pitch_deg: float = 0.0) -> RigidTransform:
    """Camera-to-world pose at ``position`` looking along yaw/pitch in a z-up world."""
    yaw = math.radians(yaw_deg)
    pitch = math.radians(pitch_deg)
    f = np.array([math.cos(yaw) * math.cos(pitch), math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
    r = np.cross(f, [0.0, 0.0, 1.0])
    r /= np.linalg.norm(r)
    down = np.cross(f, r)
    return RigidTransform.from_rotation(np.column_stack([r, down, f]), position)


@dataclass
class Trajectory:
    """World camera-to-world poses sampled at 5 Hz plus a per-frame tracking flag."""

    poses: list
    tracked: list
    seed: int = 0

    def __len__(self):
        return len(self.poses)

    @property
    def origin(self) -> RigidTransform:
        return self.poses[0]

    def local_poses(self) -> list:
        """Poses in the agent's own frame, whose origin is its first camera pose."""
        base = invert(self.origin)
        return [compose(base, P) for P in self.poses]


def sweep_trajectory(yaw_start: float, yaw_end: float, n_frames: int, center, seed: int = 0,
                     height: float = 1.3, tracking_failure_rate: float = 0.0) -> Trajectory:
    """A smooth panning sweep with a gentle drift and pitch oscillation."""
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * math.pi, 3)
    drift = rng.uniform(-0.15, 0.15, 2)
    poses = []
    for i in range(n_frames):
        s = i / max(1, n_frames - 1)
        yaw = yaw_start + (yaw_end - yaw_start) * s
        pitch = -8.0 + 6.0 * math.sin(2 * math.pi * s + phase[0])
        pos = np.array([
            center[0] + drift[0] * s + 0.05 * math.sin(2 * math.pi * s + phase[1]),
            center[1] + drift[1] * s + 0.05 * math.cos(2 * math.pi * s + phase[2]),
            height + 0.05 * math.sin(4 * math.pi * s),
        ])
        poses.append(look_pose(pos, yaw, pitch))
    tracked = list(rng.random(n_frames) >= tracking_failure_rate)
    return Trajectory(poses, tracked, seed)


class OverlappingSequences(NamedTuple):
    trajectories: list
    transforms: dict
    """``transforms[(a, b)]`` for a < b maps agent b's local frame into agent a's."""

    @property
    def global_poses(self) -> dict:
        """Each agent's local frame expressed in agent 0's frame."""
        base = invert(self.trajectories[0].origin)
        return {a: compose(base, tr.origin) for a, tr in enumerate(self.trajectories)}


def make_overlapping_sequences(scene: SyntheticScene, n_agents: int, overlap_fraction: float = 0.5,
                               seed: int = 0, frames_per_agent: int = 60, sweep_deg: float = 150.0,
                               tracking_failure_rate: float = 0.0) -> OverlappingSequences:
    """Agents pan around the room; consecutive agents share ``overlap_fraction`` of their sweep."""
    if n_agents < 1:
        raise ValueError("n_agents must be >= 1")
    if not 0.0 < overlap_fraction <= 1.0:
        raise ValueError("overlap_fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    start = rng.uniform(0, 360)
    # viewed surface overlap falls short of the yaw overlap (parallax, floor and
    # ceiling), so agents are spaced a little closer than the nominal fraction
    step = 0.8 * sweep_deg * (1.0 - overlap_fraction)
    trajectories = []
    for a in range(n_agents):
        center = rng.uniform(-0.25, 0.25, 2)
        y0 = start + a * step
        direction = 1 if rng.random() < 0.5 else -1
        ends = (y0, y0 + sweep_deg) if direction > 0 else (y0 + sweep_deg, y0)
        trajectories.append(
            sweep_trajectory(*ends, frames_per_agent, center, seed=int(rng.integers(2**31)),
                             height=float(rng.uniform(1.2, 1.4)), tracking_failure_rate=tracking_failure_rate)
        )
    transforms = {}
    for a in range(n_agents):
        for b in range(a + 1, n_agents):
            transforms[(a, b)] = compose(invert(trajectories[a].origin), trajectories[b].origin)
    return OverlappingSequences(trajectories, transforms)


def view_overlap(scene: SyntheticScene, traj_a: Trajectory, traj_b: Trajectory,
                 K: CameraIntrinsics | None = None, cell: float = 0.1, stride: int = 4) -> float:
    """Shared fraction of observed surface, measured on a coarse probe grid.

    Each trajectory's observed surface is the set of ``cell``-sized grid cells hit
    by a subsampled depth render; the result is |A & B| / min(|A|, |B|).
    """
    K = K or DEPTH_INTRINSICS.resized(56, 43)

    def cells(tr: Trajectory) -> set:
        seen = set()
        for P in tr.poses[::stride]:
            origins, dirs = _camera_rays(P, K)
            t, _ = scene.intersect(origins, dirs)
            ok = np.isfinite(t)
            pts = origins[ok] + dirs[ok] * t[ok, None]
            seen.update(map(tuple, np.floor(pts / cell).astype(np.int64)))
        return seen

    A, B = cells(traj_a), cells(traj_b)
    if not A or not B:
        return 0.0
    return len(A & B) / min(len(A), len(B))


def trajectory_is_smooth(tr: Trajectory, translation_m: float = 0.1, angle_deg: float = 10.0) -> bool:
    return all(pose_distance(a, b).within(translation_m, angle_deg) for a, b in zip(tr.poses, tr.poses[1:]))


class ClientFrame(NamedTuple):
    index: int
    depth: np.ndarray
    color: np.ndarray
    pose: RigidTransform
    tracked: bool = True


def synthetic_frames(scene: SyntheticScene, trajectory: Trajectory,
                     K_depth: CameraIntrinsics = DEPTH_INTRINSICS,
                     K_color: CameraIntrinsics = COLOR_INTRINSICS) -> Iterator[ClientFrame]:
    """Rendered frames with poses in the agent's local frame."""
    for i, (P, Pl) in enumerate(zip(trajectory.poses, trajectory.local_poses())):
        depth, color = render_synthetic_frame(scene, P, K_depth, K_color)
        yield ClientFrame(i, depth, color, Pl, bool(trajectory.tracked[i]))


def dataset_frames(sequence) -> Iterator[ClientFrame]:
    for f in sequence:
        yield ClientFrame(f.index, f.depth, f.color, f.pose, True)


@dataclass
class TransmissionReport:
    name: str
    produced: int = 0
    skipped_untracked: int = 0
    sent: int = 0
    discarded: int = 0
    bytes_sent: int = 0
    sent_indices: list = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if k != "sent_indices"}


class _Slot:
    __slots__ = ("frame",)

    def __init__(self):
        self.frame = None


def run_client(frames: Iterable[ClientFrame], transport, name: str = "agent",
               K_depth: CameraIntrinsics = DEPTH_INTRINSICS, K_color: CameraIntrinsics = COLOR_INTRINSICS,
               policy: OverflowPolicy | str = OverflowPolicy.DISCARD, capacity: int = 8,
               rate_hz: float | None = None, jpeg_quality: int = DEFAULT_JPEG_QUALITY,
               close_transport: bool = True) -> TransmissionReport:
    """Stream frames to a server over ``transport`` (anything with ``sendall``).

    A producer thread feeds raw frames into a :class:`PooledQueue`; this thread
    compresses and sends them. Frames are dropped before compression when the
    queue overflows under the discard policy.
    """
    report = TransmissionReport(name)
    queue: PooledQueue = PooledQueue(_Slot, capacity, policy)
    producer_error: list = []

    def produce():
        try:
            period = None if not rate_hz else 1.0 / rate_hz
            next_due = time.monotonic()
            for f in frames:
                report.produced += 1
                if not f.tracked:
                    report.skipped_untracked += 1
                    continue
                if period is not None:
                    next_due += period
                    time.sleep(max(0.0, next_due - time.monotonic()))
                handle = queue.begin_push()
                if handle is None:
                    continue
                handle.item.frame = f
                handle.end_push()
        except Exception as exc:  # surfaced through the report
            producer_error.append(exc)
        finally:
            queue.close()

    try:
        transport.sendall(Hello(name, K_depth, K_color).encode())
    except OSError as exc:
        report.error = f"connection failed: {exc}"
        return report
    producer = threading.Thread(target=produce, name=f"{name}-producer", daemon=True)
    producer.start()
    try:
        while True:
            handle = queue.pop(block=True, timeout=0.5)
            if handle is None:
                if queue.closed and queue.empty():
                    break
                continue
            with handle as slot:
                f = slot.frame
                data = encode_frame(f.depth, f.color, f.pose, f.index, jpeg_quality)
            transport.sendall(data)
            report.sent += 1
            report.bytes_sent += len(data)
            report.sent_indices.append(f.index)
        transport.sendall(bye())
    except OSError as exc:
        report.error = f"send failed: {exc}"
        queue.close()
    producer.join()
    if producer_error:
        report.error = f"frame source failed: {producer_error[0]}"
    report.discarded = queue.discarded
    if close_transport and hasattr(transport, "close"):
        try:
            transport.close()
        except OSError:
            pass
    return report
