"""Command line entry point: serve, simulate, batch, fuse, evaluate and dataset-gen."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import socket
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path

log = logging.getLogger("collabrecon")

SUBCOMMANDS = ("serve", "simulate", "batch", "fuse", "evaluate", "dataset-gen")


@dataclass
class RunConfig:
    """Every setting a subcommand may read. JSON config files hold any subset."""

    command: str = "batch"
    mode: str = "batch"
    listen: str = "127.0.0.1:7117"
    connect: str = "127.0.0.1:7117"
    scenes_dir: str | None = None
    dataset_dir: str | None = None
    out: str | None = None
    records: str | None = None
    gt: str | None = None
    poses: str | None = None
    reloc: str = "oracle"
    inlier_noise: list = field(default_factory=lambda: [0.005, 0.5])
    outlier_rate: float = 0.2
    outlier_magnitude: list = field(default_factory=lambda: [1.0, 90.0])
    failure_rate: float = 0.0
    agents: int = 3
    frames: int = 60
    overlap: float = 0.5
    scene_seed: int | None = None
    seed: int = 0
    budget: int = 500
    clients: int | None = None
    duration: float | None = None
    voxel_size: float = 0.02
    dims: list = field(default_factory=lambda: [256, 208, 256])
    client_capacity: int = 8
    server_capacity: int = 32
    policy: str = "discard"
    rate: float | None = None
    tracking_failure_rate: float = 0.0
    mesh: str | None = None

    def validate(self) -> None:
        from .pipeline import Mode
        from .wire import OverflowPolicy

        if self.command not in SUBCOMMANDS:
            raise ValueError(f"unknown command {self.command!r}")
        Mode(self.mode)
        OverflowPolicy(self.policy)
        if self.reloc not in ("oracle", "baseline"):
            raise ValueError(f"--reloc must be oracle or baseline, got {self.reloc!r}")
        for name in ("outlier_rate", "failure_rate", "tracking_failure_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0.0 < self.overlap <= 1.0:
            raise ValueError("overlap must lie in (0, 1]")
        if self.agents < 1 or self.frames < 1:
            raise ValueError("agents and frames must be positive")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.voxel_size <= 0 or len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("invalid volume geometry")
        if len(self.inlier_noise) != 2 or len(self.outlier_magnitude) != 2:
            raise ValueError("noise settings take two values (meters, degrees)")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunConfig:
        data = json.loads(text)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabrecon",
        description="Collaborative RGB-D reconstruction server, simulated clients and evaluation tools.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    S = argparse.SUPPRESS

    def common(p, *groups):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
        p.add_argument("--seed", type=int, default=S, help="master random seed")
        if "reloc" in groups:
            p.add_argument("--reloc", choices=["oracle", "baseline"], default=S, help="relocaliser")
            p.add_argument("--budget", type=int, default=S, help="maximum relocalisation attempts (batch)")
            p.add_argument("--outlier-rate", type=float, default=S, help="oracle outlier probability")
            p.add_argument("--failure-rate", type=float, default=S, help="oracle failure probability")
            p.add_argument("--inlier-noise", type=float, nargs=2, metavar=("M", "DEG"), default=S,
                           help="oracle inlier noise sigma")
            p.add_argument("--outlier-magnitude", type=float, nargs=2, metavar=("M", "DEG"), default=S,
                           help="oracle outlier ball radius")
        if "sim" in groups:
            p.add_argument("--agents", type=int, default=S, help="number of simulated agents")
            p.add_argument("--frames", type=int, default=S, help="frames per agent")
            p.add_argument("--overlap", type=float, default=S, help="overlap fraction between agents")
            p.add_argument("--scene-seed", type=int, default=S, help="synthetic room seed (defaults to --seed)")
            p.add_argument("--tracking-failure-rate", type=float, default=S,
                           help="fraction of frames flagged as untracked")
        if "volume" in groups:
            p.add_argument("--voxel-size", type=float, default=S, help="voxel size in meters")
            p.add_argument("--dims", type=int, nargs=3, default=S, help="volume dimensions in voxels")

    p = sub.add_parser("serve", help="run the TCP server")
    common(p, "reloc", "volume")
    p.add_argument("--mode", choices=["batch", "interactive"], default=S, help="relocalisation mode")
    p.add_argument("--listen", default=S, help="host:port to listen on")
    p.add_argument("--scenes-dir", default=S, help="spool incoming frames here (one sequence per client)")
    p.add_argument("--clients", type=int, default=S, help="batch: number of client streams to wait for")
    p.add_argument("--duration", type=float, default=S, help="interactive: stop after this many seconds")
    p.add_argument("--gt", default=S, help="ground-truth global poses file (needed by the oracle)")
    p.add_argument("--out", default=S, help="directory for poses.txt, records.jsonl and report.json")
    p.add_argument("--server-capacity", type=int, default=S, help="server frame queue capacity")
    p.add_argument("--policy", choices=["discard", "grow", "replace_random", "wait"], default=S,
                   help="queue overflow policy")

    p = sub.add_parser("simulate", help="stream simulated or recorded clients to a server")
    common(p, "sim")
    p.add_argument("--connect", default=S, help="server host:port")
    p.add_argument("--dataset-dir", default=S, help="replay scene-* sequences from this directory")
    p.add_argument("--rate", type=float, default=S, help="frames per second per client (default: unthrottled)")
    p.add_argument("--client-capacity", type=int, default=S, help="client frame queue capacity")
    p.add_argument("--policy", choices=["discard", "grow", "replace_random", "wait"], default=S,
                   help="queue overflow policy")

    p = sub.add_parser("batch", help="server and simulated clients in one process")
    common(p, "reloc", "sim", "volume")
    p.add_argument("--mode", choices=["batch", "interactive"], default=S, help="relocalisation mode")
    p.add_argument("--out", default=S, help="output directory")
    p.add_argument("--scenes-dir", default=S, help="also spool frames as dataset sequences here")
    p.add_argument("--mesh", default=S, help="fuse all posed scenes and write this PLY mesh")

    p = sub.add_parser("fuse", help="fuse spooled sequences into one mesh")
    common(p, "volume")
    p.add_argument("--scenes-dir", default=S, help="directory of scene-<id> sequences")
    p.add_argument("--poses", default=S, help="global poses file")
    p.add_argument("--out", default=S, help="output PLY path")

    p = sub.add_parser("evaluate", help="verifier metrics and safety margins from attempt records")
    common(p)
    p.add_argument("--records", default=S, help="records.jsonl")
    p.add_argument("--gt", default=S, help="ground-truth global poses file")
    p.add_argument("--out", default=S, help="write the JSON result here as well")

    p = sub.add_parser("dataset-gen", help="write synthetic agent sequences to disk")
    common(p, "sim")
    p.add_argument("--out", default=S, help="output directory")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = RunConfig.from_json(Path(args.config).read_text())
    overrides = {k: v for k, v in vars(args).items() if k in {f.name for f in dataclasses.fields(RunConfig)}}
    cfg = dataclasses.replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _server_config(cfg: RunConfig, ground_truth=None, spool=None):
    from .server import ServerConfig

    return ServerConfig(
        mode=cfg.mode, seed=cfg.seed, reloc=cfg.reloc, inlier_noise=tuple(cfg.inlier_noise),
        outlier_rate=cfg.outlier_rate, outlier_magnitude=tuple(cfg.outlier_magnitude),
        failure_rate=cfg.failure_rate, volume_dims=tuple(cfg.dims), voxel_size=cfg.voxel_size,
        budget=cfg.budget, spool_dir=None if spool is None else Path(spool), ground_truth=ground_truth,
    )


def _simulation(cfg: RunConfig):
    from .simclient import SyntheticScene, make_overlapping_sequences

    scene = SyntheticScene.generate(cfg.seed if cfg.scene_seed is None else cfg.scene_seed)
    seqs = make_overlapping_sequences(scene, cfg.agents, cfg.overlap, cfg.seed, cfg.frames,
                                      tracking_failure_rate=cfg.tracking_failure_rate)
    return scene, seqs


def cmd_batch(cfg: RunConfig) -> int:
    from .pipeline import Mode
    from .server import ClientSpec, ServerState, fuse_global, run_batch, run_interactive, write_outputs
    from .simclient import COLOR_INTRINSICS, DEPTH_INTRINSICS, synthetic_frames

    if cfg.out is None:
        raise UsageError("batch needs --out")
    scene, seqs = _simulation(cfg)
    state = ServerState(_server_config(cfg, seqs.global_poses, cfg.scenes_dir))
    clients = [ClientSpec(f"agent-{a}", synthetic_frames(scene, tr), DEPTH_INTRINSICS, COLOR_INTRINSICS)
               for a, tr in enumerate(seqs.trajectories)]
    runner = run_batch if Mode(cfg.mode) is Mode.BATCH else run_interactive
    report = runner(state, clients)
    write_outputs(state, report, cfg.out)
    log.info("stop reason %s after %d attempts", report.stop_reason, report.attempts)
    if cfg.mesh:
        sources = {a: [f for f in synthetic_frames(scene, tr) if f.tracked]
                   for a, tr in enumerate(seqs.trajectories) if a in report.poses}
        vol = fuse_global(report.poses, sources, {a: (DEPTH_INTRINSICS, COLOR_INTRINSICS) for a in sources},
                          tuple(cfg.dims), cfg.voxel_size)
        vol.extract_mesh().write_ply(cfg.mesh)
    print(json.dumps(report.to_json(), sort_keys=True))
    return 0 if report.poses else 1


def cmd_serve(cfg: RunConfig) -> int:
    from .dataset import read_global_poses
    from .pipeline import Mode
    from .server import ServerState, TcpServer, write_outputs

    gt = read_global_poses(cfg.gt) if cfg.gt else None
    if cfg.reloc == "oracle" and gt is None:
        raise UsageError("the oracle relocaliser needs --gt")
    batch = Mode(cfg.mode) is Mode.BATCH
    if batch and not cfg.clients:
        raise UsageError("batch serve needs --clients")
    state = ServerState(_server_config(cfg, gt, cfg.scenes_dir))
    server = TcpServer(state, _address(cfg.listen), cfg.clients, cfg.server_capacity, cfg.policy)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    report = server.run(cfg.duration)
    if cfg.out:
        write_outputs(state, report, cfg.out)
    print(json.dumps(report.to_json(), sort_keys=True))
    if batch:
        return 0 if report.stop_reason not in (None, "interrupted") and report.poses else 1
    return 0


def _client_sources(cfg: RunConfig):
    from .dataset import load_sequence
    from .simclient import COLOR_INTRINSICS, DEPTH_INTRINSICS, dataset_frames, synthetic_frames

    if cfg.dataset_dir:
        out = []
        for d in sorted(Path(cfg.dataset_dir).glob("scene-*")):
            seq = load_sequence(d)
            out.append((f"agent-{d.name.split('-', 1)[1]}", dataset_frames(seq), seq.K_depth, seq.K_color))
        if not out:
            raise UsageError(f"no scene-* sequences in {cfg.dataset_dir}")
        return out
    scene, seqs = _simulation(cfg)
    return [(f"agent-{a}", synthetic_frames(scene, tr), DEPTH_INTRINSICS, COLOR_INTRINSICS)
            for a, tr in enumerate(seqs.trajectories)]


def cmd_simulate(cfg: RunConfig) -> int:
    from .simclient import run_client

    sources = _client_sources(cfg)
    reports = [None] * len(sources)

    def go(i, name, frames, Kd, Kc):
        try:
            sock = socket.create_connection(_address(cfg.connect))
        except OSError as exc:
            from .simclient import TransmissionReport

            reports[i] = TransmissionReport(name, error=f"connection failed: {exc}")
            return
        reports[i] = run_client(frames, sock, name, Kd, Kc, cfg.policy, cfg.client_capacity, cfg.rate)

    threads = [threading.Thread(target=go, args=(i, *s)) for i, s in enumerate(sources)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r in reports:
        print(json.dumps(r.to_json(), sort_keys=True))
    return 1 if any(r.error for r in reports) else 0


def cmd_fuse(cfg: RunConfig) -> int:
    from .dataset import load_sequence, read_global_poses
    from .server import fuse_sequences

    if not (cfg.scenes_dir and cfg.poses and cfg.out):
        raise UsageError("fuse needs --scenes-dir, --poses and --out")
    poses = read_global_poses(cfg.poses)
    seqs = {}
    for d in sorted(Path(cfg.scenes_dir).glob("scene-*")):
        sid = int(d.name.split("-", 1)[1])
        if sid in poses:
            seqs[sid] = load_sequence(d)
    if not seqs:
        raise RuntimeError("no posed sequences found")
    vol = fuse_sequences(poses, seqs, dims=tuple(cfg.dims), voxel_size=cfg.voxel_size)
    mesh = vol.extract_mesh()
    mesh.write_ply(cfg.out)
    print(json.dumps({"scenes": sorted(seqs), "vertices": len(mesh.vertices), "faces": len(mesh.faces)}))
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    from .dataset import read_global_poses
    from .evaluation import evaluate, format_table, load_records, write_evaluation

    if not cfg.records:
        raise UsageError("evaluate needs --records")
    gt = read_global_poses(cfg.gt) if cfg.gt else None
    result = evaluate(load_records(cfg.records), gt)
    print(json.dumps(result, sort_keys=True))
    print(format_table(result), end="")
    if cfg.out:
        write_evaluation(result, cfg.out)
    return 0


def cmd_dataset_gen(cfg: RunConfig) -> int:
    from .dataset import save_sequence, write_global_poses
    from .simclient import COLOR_INTRINSICS, DEPTH_INTRINSICS, synthetic_frames

    if not cfg.out:
        raise UsageError("dataset-gen needs --out")
    scene, seqs = _simulation(cfg)
    out = Path(cfg.out)
    gt = seqs.global_poses
    for a, tr in enumerate(seqs.trajectories):
        frames = ((f.depth, f.color, f.pose) for f in synthetic_frames(scene, tr) if f.tracked)
        save_sequence(frames, out / f"scene-{a}", DEPTH_INTRINSICS, COLOR_INTRINSICS, gt[a])
    write_global_poses(out / "gt_poses.txt", gt)
    print(json.dumps({"scenes": len(seqs.trajectories), "out": str(out)}))
    return 0


class UsageError(Exception):
    pass


COMMANDS = {
    "serve": cmd_serve,
    "simulate": cmd_simulate,
    "batch": cmd_batch,
    "fuse": cmd_fuse,
    "evaluate": cmd_evaluate,
    "dataset-gen": cmd_dataset_gen,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ValueError, TypeError, OSError) as exc:
        parser.error(str(exc))
    if args.dump_config:
        sys.stdout.write(cfg.to_json())
        return 0
    try:
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:  # runtime failures map to exit 1
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
