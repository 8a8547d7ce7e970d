import json
import socket
import subprocess
import sys
import time

import pytest

from collabrecon.cli import RunConfig, main
from collabrecon.dataset import load_sequence, read_global_poses
from collabrecon.se3 import pose_distance
from collabrecon.volume import read_ply

SMALL = ["--dims", "96", "80", "96", "--voxel-size", "0.04"]


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_dump_config_merges_file_and_flags(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"agents": 4, "seed": 9, "outlier_rate": 0.1}))
    code, out, _ = run(["batch", "--config", str(cfg), "--seed", "3", "--dump-config"], capsys)
    assert code == 0
    data = json.loads(out)
    assert data["agents"] == 4 and data["seed"] == 3 and data["outlier_rate"] == 0.1
    assert data["command"] == "batch"
    # the dump is itself a valid config
    assert RunConfig.from_json(out) == RunConfig(**data)


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"agnets": 4}))
    with pytest.raises(SystemExit) as e:
        main(["batch", "--config", str(cfg), "--dump-config"])
    assert e.value.code == 2
    assert "agnets" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["batch", "--outlier-rate", "1.5"],
    ["batch", "--overlap", "0"],
    ["batch", "--reloc", "magic"],
    ["serve", "--policy", "sometimes"],
    ["nonsense"],
    ["batch"],  # no --out
    ["evaluate"],  # no --records
])
def test_bad_arguments_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as e:
        main(argv)
    assert e.value.code == 2


def test_serve_oracle_needs_ground_truth(capsys):
    with pytest.raises(SystemExit) as e:
        main(["serve", "--clients", "1"])
    assert e.value.code == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    (tmp_path / "poses.txt").write_text("0 1 0 0 0 0 0 0\n")
    code, _, err = run(["fuse", "--scenes-dir", str(tmp_path), "--poses", str(tmp_path / "poses.txt"),
                        "--out", str(tmp_path / "m.ply")], capsys)
    assert code == 1 and err.startswith("error:")


@pytest.mark.slow
def test_batch_is_deterministic(tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        code, stdout, _ = run(["batch", "--agents", "2", "--frames", "14", "--seed", "5", "--out", str(out)]
                              + SMALL, capsys)
        assert code == 0
        outs.append(out)
    for name in ("poses.txt", "records.jsonl", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    report = json.loads((outs[0] / "report.json").read_text())
    assert report["mode"] == "batch" and set(report["poses"]) == {"0", "1"}


@pytest.mark.slow
def test_dataset_fuse_evaluate_chain(tmp_path, capsys):
    data = tmp_path / "data"
    code, _, _ = run(["dataset-gen", "--agents", "2", "--frames", "10", "--seed", "2", "--out", str(data)], capsys)
    assert code == 0
    gt = read_global_poses(data / "gt_poses.txt")
    assert sorted(gt) == [0, 1]
    seq = load_sequence(data / "scene-1")
    assert len(seq) == 10
    assert pose_distance(seq.global_pose, gt[1]).translation_m < 1e-12

    code, out, _ = run(["fuse", "--scenes-dir", str(data), "--poses", str(data / "gt_poses.txt"),
                        "--out", str(tmp_path / "m.ply")] + SMALL, capsys)
    assert code == 0
    assert json.loads(out)["scenes"] == [0, 1]
    assert len(read_ply(tmp_path / "m.ply").faces) > 0

    run_dir = tmp_path / "run"
    code, _, _ = run(["batch", "--agents", "2", "--frames", "10", "--seed", "2", "--out", str(run_dir)] + SMALL,
                     capsys)
    assert code == 0
    code, out, _ = run(["evaluate", "--records", str(run_dir / "records.jsonl"), "--gt", str(data / "gt_poses.txt"),
                        "--out", str(tmp_path / "eval.json")], capsys)
    assert code == 0
    result = json.loads(out.splitlines()[0])
    assert result["verifier"]["tp"] >= 2
    assert "0-1" in result["safety_margins"]
    assert json.loads((tmp_path / "eval.json").read_text()) == result


def _free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.mark.slow
def test_serve_and_simulate_over_tcp(tmp_path):
    data = tmp_path / "data"
    assert main(["dataset-gen", "--agents", "2", "--frames", "12", "--seed", "4", "--out", str(data)]) == 0
    port = _free_port()
    addr = f"127.0.0.1:{port}"
    server = subprocess.Popen(
        [sys.executable, "-m", "collabrecon", "serve", "--clients", "2", "--listen", addr, "--gt",
         str(data / "gt_poses.txt"), "--out", str(tmp_path / "out"), "--outlier-rate", "0",
         "--inlier-noise", "0", "0", "--scenes-dir", str(tmp_path / "spool")] + SMALL,
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    try:
        assert server.stdout.readline().startswith("listening on")
        client = subprocess.run(
            [sys.executable, "-m", "collabrecon", "simulate", "--connect", addr, "--dataset-dir", str(data),
             "--policy", "wait"],
            capture_output=True, text=True, timeout=120,
        )
        assert client.returncode == 0, client.stderr
        reports = [json.loads(line) for line in client.stdout.splitlines()]
        assert [r["sent"] for r in reports] == [12, 12]
        out, err = server.communicate(timeout=180)
    finally:
        if server.poll() is None:
            server.kill()
    assert server.returncode == 0, err
    report = json.loads(out.splitlines()[-1])
    gt = read_global_poses(data / "gt_poses.txt")
    poses = read_global_poses(tmp_path / "out" / "poses.txt")
    assert sorted(poses) == [0, 1]
    # frames may be discarded at the server, but whatever was fused was spooled without gaps
    for s in (0, 1):
        assert len(load_sequence(tmp_path / "spool" / f"scene-{s}")) == report["frames"][str(s)]
    d = pose_distance(poses[1], gt[1])
    assert d.translation_m < 0.02 and d.angle_deg < 2.0


def test_module_entry_point_help():
    r = subprocess.run([sys.executable, "-m", "collabrecon", "--help"], capture_output=True, text=True, timeout=60)
    assert r.returncode == 0
    for name in ("serve", "simulate", "batch", "fuse", "evaluate", "dataset-gen"):
        assert name in r.stdout
