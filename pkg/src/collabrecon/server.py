"""The mapping server: per-client sub-scenes, inter-agent relocalisation, global poses and rendering.

Roles:

* connection handlers decode messages and push frames into a pooled queue;
* one mapping loop drains that queue and integrates frames into sub-scenes;
* one relocalisation worker schedules attempts, clusters samples and
  re-optimises the pose graph;
* one feedback worker renders the global map for clients.

Global poses are published by swapping a read-only mapping, so readers always
see one complete optimisation result.
"""

from __future__ import annotations

import itertools
import json
import logging
import socket
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .alignment import OptimisationReport, PairClusterSet, PoseGraph, build_pose_graph, graph_error, optimise
from .dataset import CALIB_FILE, DatasetSequence, write_calibration, write_frame_files, write_global_poses
from .pipeline import AttemptRecord, Mode, Scheduler, Verdict, attempt_relocalisation, canonical_pair
from .relocaliser import OracleConfig, OracleRelocaliser, SceneCoordinateRelocaliser
from .se3 import RigidTransform, compose, invert
from .volume import CameraIntrinsics, TsdfVolume, register_color
from .wire import (
    FrameMessage,
    Hello,
    MessageType,
    OverflowPolicy,
    PooledQueue,
    RenderedImage,
    RenderRequest,
    encode_color_jpeg,
    read_message,
)

log = logging.getLogger(__name__)

FEEDBACK_SIZE = (320, 240)
SCENE_VOLUME_DIMS = (256, 208, 256)
BACKGROUND = (0, 0, 0)


@dataclass
class ServerConfig:
    mode: Mode = Mode.BATCH
    seed: int = 0
    reloc: str = "oracle"
    inlier_noise: tuple = (0.0, 0.0)
    outlier_rate: float = 0.0
    outlier_magnitude: tuple = (1.0, 90.0)
    failure_rate: float = 0.0
    volume_dims: tuple = SCENE_VOLUME_DIMS
    voxel_size: float = 0.02
    budget: int = 500
    max_consecutive_failures: int = 50
    frame_spacing: int = 50
    feedback_size: tuple = FEEDBACK_SIZE
    spool_dir: Path | None = None
    ground_truth: Mapping | None = None
    """Per-scene global poses; only the oracle relocaliser reads them."""

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.reloc not in ("oracle", "baseline"):
            raise ValueError(f"unknown relocaliser {self.reloc!r}")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")


class MappingComponent:
    """One client's sub-scene: volume, trajectory and relocaliser."""

    def __init__(self, scene_id: int, name: str, K_depth: CameraIntrinsics, K_color: CameraIntrinsics,
                 volume: TsdfVolume, relocaliser, spool_dir: Path | None = None):
        self.scene_id = scene_id
        self.name = name
        self.K_depth = K_depth
        self.K_color = K_color
        self.volume = volume
        self.relocaliser = relocaliser
        self.trajectory: list[tuple[int, RigidTransform]] = []
        self.frames_fused = 0
        self.frames_dropped = 0
        self.spool_dir = spool_dir
        if spool_dir is not None:
            spool_dir.mkdir(parents=True, exist_ok=True)
            write_calibration(spool_dir / CALIB_FILE, K_depth, K_color)

    @property
    def last_index(self) -> int | None:
        return self.trajectory[-1][0] if self.trajectory else None

    def ingest(self, index: int, depth: np.ndarray, color: np.ndarray, pose: RigidTransform,
               encoded: tuple[bytes, bytes] | None = None) -> bool:
        """Integrate and train on one frame; ``color`` is at colour resolution."""
        last = self.last_index
        if last is not None and index <= last:
            log.warning("scene %d: dropping frame %d (not after %d)", self.scene_id, index, last)
            self.frames_dropped += 1
            return False
        rgb = register_color(color, self.K_color, self.K_depth)
        self.volume.integrate(depth, rgb, pose, self.K_depth)
        self.relocaliser.train(rgb, depth, pose, self.K_depth, frame_ref=(self.scene_id, index))
        if self.spool_dir is not None and encoded is not None:
            # spooled files are numbered by retained position so dropped frames leave no gaps
            write_frame_files(self.spool_dir, len(self.trajectory), encoded[0], encoded[1], pose)
        self.trajectory.append((index, pose))
        self.frames_fused += 1
        return True


class GlobalRender(NamedTuple):
    color: np.ndarray
    depths: dict
    colors: dict
    winner: np.ndarray
    """Scene id whose surface is visible at each pixel, -1 for background."""


def composite(depths: Mapping[int, np.ndarray], colors: Mapping[int, np.ndarray],
              background=BACKGROUND) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel depth test: the nearest valid depth wins, ties go to the lower id."""
    ids = sorted(depths)
    shape = depths[ids[0]].shape
    best = np.full(shape, np.inf)
    winner = np.full(shape, -1, np.int64)
    out = np.empty((*shape, 3), np.uint8)
    out[...] = background
    for a in ids:
        d = depths[a]
        better = (d > 0) & (d < best)
        best[better] = d[better]
        winner[better] = a
        out[better] = colors[a][better]
    return out, winner


@dataclass
class RunReport:
    mode: str
    stop_reason: str | None
    attempts: int
    verdicts: dict
    final_residual: float | None
    optimisations: int
    frames: dict
    poses: dict

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "stop_reason": self.stop_reason,
            "attempts": self.attempts,
            "verdicts": self.verdicts,
            "final_residual": self.final_residual,
            "optimisations": self.optimisations,
            "frames": {str(k): v for k, v in sorted(self.frames.items())},
            "poses": {str(k): [float(x) for x in T.as_array()] for k, T in sorted(self.poses.items())},
        }


class ServerState:
    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig()
        self.scenes: dict[int, MappingComponent] = {}
        self.cluster_sets: dict[tuple[int, int], PairClusterSet] = {}
        self.scheduler = Scheduler(self.config.mode, self.config.seed, self.config.frame_spacing)
        self.records: list[AttemptRecord] = []
        self.optimisations: list[OptimisationReport] = []
        self.last_graph: PoseGraph | None = None
        self.finished: set[int] = set()
        self.consecutive_failures: Counter = Counter()
        self.render_requests: dict[int, RigidTransform] = {}
        self._rr_last = -1
        self._published: Mapping[int, RigidTransform] = MappingProxyType({})
        self._lock = threading.RLock()

    # clients and frames

    @property
    def first_agent(self) -> int | None:
        return min(self.scenes) if self.scenes else None

    def _make_relocaliser(self, scene_id: int):
        cfg = self.config
        seed = cfg.seed * 1000 + scene_id
        if cfg.reloc == "baseline":
            return SceneCoordinateRelocaliser(seed=seed)
        return OracleRelocaliser(OracleConfig(
            ground_truth_provider=self._truth_provider(scene_id),
            inlier_noise=tuple(cfg.inlier_noise),
            outlier_rate=cfg.outlier_rate,
            outlier_magnitude=tuple(cfg.outlier_magnitude),
            failure_rate=cfg.failure_rate,
            rng_seed=seed,
        ))

    def _truth_provider(self, target: int) -> Callable:
        def provide(hint):
            gt = self.config.ground_truth
            if hint is None or gt is None or target not in gt or hint.source not in gt:
                return None
            # source-scene pose, carried into the target scene through the true global poses
            return compose(compose(invert(gt[target]), gt[hint.source]), hint.source_pose)
        return provide

    def add_client(self, name: str, K_depth: CameraIntrinsics, K_color: CameraIntrinsics,
                   scene_id: int | None = None) -> int:
        with self._lock:
            if scene_id is None:
                scene_id = max(self.scenes, default=-1) + 1
            if scene_id in self.scenes:
                raise ValueError(f"scene id {scene_id} already in use")
            spool = None if self.config.spool_dir is None else Path(self.config.spool_dir) / f"scene-{scene_id}"
            volume = TsdfVolume(self.config.volume_dims, self.config.voxel_size)
            self.scenes[scene_id] = MappingComponent(
                scene_id, name, K_depth, K_color, volume, self._make_relocaliser(scene_id), spool
            )
            if len(self._published) == 0 or scene_id < min(self._published):
                # the first agent anchors the global frame from creation
                self._publish({scene_id: RigidTransform.identity()})
            log.info("client %r joined as scene %d", name, scene_id)
            return scene_id

    def ingest_frame(self, client_id: int, msg: FrameMessage) -> bool:
        comp = self.scenes.get(client_id)
        if comp is None:
            raise KeyError(f"unknown client {client_id}")
        ok = comp.ingest(msg.frame_index, msg.depth, msg.color, msg.pose, (msg.depth_png, msg.color_jpeg))
        if ok:
            with self._lock:
                self.scheduler.note_frames_fused(1)
        return ok

    def ingest_raw(self, client_id: int, index: int, depth, color, pose) -> bool:
        comp = self.scenes.get(client_id)
        if comp is None:
            raise KeyError(f"unknown client {client_id}")
        ok = comp.ingest(index, depth, color, pose)
        if ok:
            with self._lock:
                self.scheduler.note_frames_fused(1)
        return ok

    def end_stream(self, client_id: int) -> None:
        with self._lock:
            self.finished.add(client_id)

    @property
    def streams_exhausted(self) -> bool:
        return bool(self.scenes) and self.finished >= set(self.scenes)

    # global poses

    def _publish(self, poses: Mapping[int, RigidTransform]) -> None:
        self._published = MappingProxyType(dict(poses))

    @property
    def published_poses(self) -> Mapping[int, RigidTransform]:
        return self._published

    def posed(self) -> set[int]:
        return set(self._published)

    def reoptimise(self) -> OptimisationReport | None:
        scene_ids = sorted(self.scenes)
        graph = build_pose_graph(list(self.cluster_sets.values()), scene_ids, self.first_agent)
        if graph is None:
            return None
        solved, report = optimise(graph)
        self.last_graph = solved
        self.optimisations.append(report)
        self._publish(solved.poses)
        log.info("optimised %d-node graph: eps %.3g -> %.3g", len(solved.nodes),
                 report.initial_residual, report.final_residual)
        return report

    # relocalisation

    def relocalisation_step(self) -> AttemptRecord | None:
        with self._lock:
            scenes = [self.scenes[s] for s in sorted(self.scenes)]
            picked = self.scheduler.schedule(scenes, self.posed(), self.cluster_sets, self.streams_exhausted)
        if picked is None:
            return None
        k, score = picked
        record = attempt_relocalisation(k, self.scenes, self.scenes[k.source].K_depth,
                                        self.scheduler.attempts, score)
        pair = canonical_pair(k.target, k.source)
        if record.sample is not None:
            self.consecutive_failures[pair] = 0
            cs = self.cluster_sets.setdefault(pair, PairClusterSet(pair))
            if cs.add_sample(record.sample):
                self.reoptimise()
        else:
            self.consecutive_failures[pair] += 1
        self.records.append(record)
        return record

    def all_pairs(self) -> list[tuple[int, int]]:
        return list(itertools.combinations(sorted(self.scenes), 2))

    def batch_stop_reason(self) -> str | None:
        pairs = self.all_pairs()
        if not pairs:
            return "single_scene"
        remaining = [p for p in pairs if not (p in self.cluster_sets and self.cluster_sets[p].confident)]
        if not remaining:
            return "all_pairs_confident"
        if len(self.records) >= self.config.budget:
            return "budget_exhausted"
        if all(self.consecutive_failures[p] >= self.config.max_consecutive_failures for p in remaining):
            return "consecutive_failures"
        return None

    def run_batch_relocalisation(self) -> str:
        if not self.streams_exhausted:
            raise RuntimeError("batch relocalisation starts only after every stream has ended")
        while (reason := self.batch_stop_reason()) is None:
            if self.relocalisation_step() is None:
                # a scene without fused frames cannot take part in any candidate
                return "no_candidates"
        return reason

    # rendering

    def render_global(self, T_g: RigidTransform, K: CameraIntrinsics) -> GlobalRender:
        """Render every posed sub-scene from global camera pose ``T_g`` and depth-test them."""
        poses = self.published_poses
        if not poses:
            raise RuntimeError("no posed agents to render")
        depths, colors = {}, {}
        for a in sorted(poses):
            if a not in self.scenes:
                continue
            local = compose(invert(poses[a]), T_g)
            depths[a], colors[a] = self.scenes[a].volume.raycast(local, K)
        if not depths:
            raise RuntimeError("no posed agents to render")
        out, winner = composite(depths, colors)
        return GlobalRender(out, depths, colors, winner)

    def request_render(self, client_id: int, local_pose: RigidTransform) -> None:
        with self._lock:
            self.render_requests[client_id] = local_pose

    def feedback_service_step(self) -> tuple[int, RenderedImage] | None:
        with self._lock:
            pending = sorted(self.render_requests)
            if not pending:
                return None
            after = [c for c in pending if c > self._rr_last]
            cid = after[0] if after else pending[0]
            pose = self.render_requests.pop(cid)
            self._rr_last = cid
        comp = self.scenes[cid]
        K = comp.K_depth.resized(*self.config.feedback_size)
        g = self.published_poses.get(cid)
        if g is None:
            _, color = comp.volume.raycast(pose, K)
        else:
            color = self.render_global(compose(g, pose), K).color
        return cid, RenderedImage(cid, pose, encode_color_jpeg(color))

    # reporting

    def verdict_counts(self) -> dict:
        counts: dict[str, Counter] = {}
        for r in self.records:
            key = "%d-%d" % canonical_pair(r.candidate.target, r.candidate.source)
            counts.setdefault(key, Counter())[r.verdict.value] += 1
        return {k: dict(sorted(v.items())) for k, v in sorted(counts.items())}

    def report(self, stop_reason: str | None = None) -> RunReport:
        final = None
        if self.last_graph is not None:
            final = graph_error(self.last_graph)
        return RunReport(
            self.config.mode.value, stop_reason, len(self.records), self.verdict_counts(), final,
            len(self.optimisations), {s: c.frames_fused for s, c in self.scenes.items()},
            dict(self.published_poses),
        )

    def write_records(self, path) -> None:
        with open(path, "w") as f:
            for r in self.records:
                f.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def handle_connection(state: ServerState, conn, on_frame: Callable | None = None,
                      on_client: Callable | None = None) -> int | None:
    """Serve one client connection until ``bye`` or disconnect; returns its scene id."""
    kind, hello = read_message(conn)
    if kind is not MessageType.HELLO:
        raise ValueError(f"expected hello, got {kind.name}")
    cid = state.add_client(hello.name, hello.depth_intrinsics, hello.color_intrinsics,
                           _scene_id_from_name(hello.name, state))
    if on_client is not None:
        on_client(cid, conn)
    try:
        while True:
            kind, msg = read_message(conn)
            if kind is MessageType.FRAME:
                if on_frame is None:
                    state.ingest_frame(cid, msg)
                else:
                    on_frame(cid, msg)
            elif kind is MessageType.RENDER_REQUEST:
                state.request_render(cid, msg.pose)
            elif kind is MessageType.BYE:
                break
    except ConnectionError as exc:
        log.warning("client %d disconnected: %s", cid, exc)
    finally:
        if on_frame is not None:
            on_frame(cid, None)
        else:
            state.end_stream(cid)
    return cid


def _scene_id_from_name(name: str, state: ServerState) -> int | None:
    """Clients called ``agent-<n>`` keep id n when it is free, so ground truth lines up."""
    prefix, _, num = name.rpartition("-")
    if prefix and num.isdigit() and int(num) not in state.scenes:
        return int(num)
    return None


class ClientSpec(NamedTuple):
    name: str
    frames: Iterable
    K_depth: CameraIntrinsics
    K_color: CameraIntrinsics


def stream_in_process(state: ServerState, client: ClientSpec) -> int:
    """Run one client against the state through an in-memory framed transport.

    The client queue uses the wait policy so nothing is dropped, which keeps
    in-process runs deterministic.
    """
    from .simclient import run_client
    from .wire import MemoryTransport

    pipe = MemoryTransport()
    result = {}

    def client_thread():
        result["report"] = run_client(client.frames, pipe, client.name, client.K_depth, client.K_color,
                                      policy=OverflowPolicy.WAIT)

    t = threading.Thread(target=client_thread, name=f"{client.name}-client", daemon=True)
    t.start()
    cid = handle_connection(state, pipe)
    t.join()
    report = result.get("report")
    if report is not None and report.error:
        raise RuntimeError(f"client {client.name} failed: {report.error}")
    return cid


def run_batch(state: ServerState, clients: Sequence[ClientSpec]) -> RunReport:
    """Ingest every client stream, then relocalise until a stop condition holds."""
    for c in clients:
        stream_in_process(state, c)
    reason = state.run_batch_relocalisation()
    return state.report(reason)


def run_interactive(state: ServerState, clients: Sequence[ClientSpec]) -> RunReport:
    """Interleave client frames round-robin, relocalising whenever the scheduler allows."""
    from .wire import decode_frame, encode_frame

    ids = [state.add_client(c.name, c.K_depth, c.K_color, _scene_id_from_name(c.name, state)) for c in clients]
    iters = {cid: iter(c.frames) for cid, c in zip(ids, clients)}
    live = list(ids)
    while live:
        for cid in list(live):
            f = next(iters[cid], None)
            if f is None:
                live.remove(cid)
                state.end_stream(cid)
                continue
            if not getattr(f, "tracked", True):
                continue
            state.ingest_frame(cid, decode_frame(encode_frame(f.depth, f.color, f.pose, f.index)))
            state.relocalisation_step()
    return state.report("streams_ended")


def fuse_global(poses: Mapping[int, RigidTransform], sources: Mapping[int, Iterable],
                intrinsics: Mapping[int, tuple], dims=SCENE_VOLUME_DIMS, voxel_size: float = 0.02,
                origin=None) -> TsdfVolume:
    """Integrate every frame of every posed scene into one fresh volume.

    ``sources[s]`` yields frames with ``depth``, ``color`` and local ``pose``;
    ``intrinsics[s]`` is ``(K_depth, K_color)``.
    """
    missing = sorted(s for s in sources if s not in poses)
    if missing:
        raise ValueError(f"scenes without a global pose: {missing}")
    vol = TsdfVolume(dims, voxel_size, origin)
    for s in sorted(sources):
        K_depth, K_color = intrinsics[s]
        g = poses[s]
        for f in sources[s]:
            rgb = register_color(f.color, K_color, K_depth)
            vol.integrate(f.depth, rgb, compose(g, f.pose), K_depth)
    return vol


def fuse_sequences(poses: Mapping[int, RigidTransform], sequences: Mapping[int, DatasetSequence],
                   **volume_args) -> TsdfVolume:
    return fuse_global(poses, sequences, {s: (q.K_depth, q.K_color) for s, q in sequences.items()},
                       **volume_args)


def write_outputs(state: ServerState, report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_global_poses(out / "poses.txt", report.poses)
    state.write_records(out / "records.jsonl")
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


class TcpServer:
    """Threaded socket front end around a :class:`ServerState`.

    In batch mode the server waits for ``expected_clients`` streams to end,
    relocalises until a stop condition holds and then returns from ``run``.
    In interactive mode it runs until ``stop()`` or ``duration`` elapses.
    """

    def __init__(self, state: ServerState, address=("127.0.0.1", 0), expected_clients: int | None = None,
                 queue_capacity: int = 32, policy: OverflowPolicy | str = OverflowPolicy.DISCARD,
                 ingest_delay: float = 0.0):
        self.state = state
        self.expected_clients = expected_clients
        self.queue: PooledQueue = PooledQueue(lambda: [None, None], queue_capacity, policy)
        self.ingest_delay = ingest_delay
        self._sock = socket.create_server(address)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._conns: dict[int, tuple] = {}
        self._threads: list[threading.Thread] = []
        self._ended: set[int] = set()
        # end-of-stream markers bypass the queue so a full queue cannot drop them
        self._pending_end: set[int] = set()
        self.stop_reason: str | None = None

    def stop(self) -> None:
        self._stop.set()

    def _push_frame(self, cid: int, msg) -> None:
        if msg is None:
            self._pending_end.add(cid)
            return
        handle = self.queue.begin_push()
        if handle is None:
            return
        handle.item[0], handle.item[1] = cid, msg
        handle.end_push()

    def _on_client(self, cid: int, conn) -> None:
        self._conns[cid] = (conn, threading.Lock())

    def _serve_conn(self, conn) -> None:
        try:
            handle_connection(self.state, conn, self._push_frame, self._on_client)
        except (OSError, ValueError) as exc:
            log.warning("connection error: %s", exc)
        finally:
            conn.close()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.settimeout(None)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _mapping_loop(self) -> None:
        while not self._stop.is_set():
            ending = set(self._pending_end) - self._ended
            handle = self.queue.pop(block=True, timeout=0.1)
            if handle is None:
                # every frame of an ending stream was queued before its marker
                if ending and self.queue.empty():
                    for cid in sorted(ending):
                        self.state.end_stream(cid)
                    self._ended |= ending
                continue
            with handle as item:
                cid, msg = item
                if self.ingest_delay:
                    time.sleep(self.ingest_delay)
                self.state.ingest_frame(cid, msg)

    def _reloc_loop(self) -> None:
        batch = self.state.config.mode is Mode.BATCH
        while not self._stop.is_set():
            if batch:
                done = self.expected_clients is not None and len(self._ended) >= self.expected_clients
                if not (done and self.queue.empty()):
                    time.sleep(0.05)
                    continue
                self.stop_reason = self.state.run_batch_relocalisation()
                self._stop.set()
                return
            if self.state.relocalisation_step() is None:
                time.sleep(0.02)

    def _feedback_loop(self) -> None:
        while not self._stop.is_set():
            served = self.state.feedback_service_step()
            if served is None:
                time.sleep(0.02)
                continue
            cid, image = served
            conn, lock = self._conns.get(cid, (None, None))
            if conn is None:
                continue
            try:
                with lock:
                    conn.sendall(image.encode())
            except OSError:
                pass

    def run(self, duration: float | None = None) -> RunReport:
        workers = [threading.Thread(target=f, daemon=True) for f in
                   (self._accept_loop, self._mapping_loop, self._reloc_loop, self._feedback_loop)]
        for w in workers:
            w.start()
        deadline = None if duration is None else time.monotonic() + duration
        try:
            while not self._stop.is_set():
                if deadline is not None and time.monotonic() >= deadline:
                    self.stop_reason = self.stop_reason or "duration_elapsed"
                    break
                time.sleep(0.05)
        except KeyboardInterrupt:
            self.stop_reason = "interrupted"
        self._stop.set()
        self.queue.close()
        for w in workers:
            w.join(timeout=5)
        self._sock.close()
        return self.state.report(self.stop_reason)
