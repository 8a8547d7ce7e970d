"""Dataset directory layout: per-frame depth PNG, colour JPEG and pose text files.

A sequence directory holds ``calib.txt``, ``frame-%06d.depth.png``,
``frame-%06d.color.jpg``, ``frame-%06d.pose.txt`` and optionally
``global_pose.txt``. Poses are written as seven numbers ``w x y z tx ty tz``
using ``repr`` so that load followed by save reproduces the text exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple

import numpy as np

from .se3 import RigidTransform
from .volume import CameraIntrinsics
from .wire import (
    DEFAULT_JPEG_QUALITY,
    decode_color_jpeg,
    decode_depth_png,
    dequantise_depth,
    encode_color_jpeg,
    encode_depth_png,
    quantise_depth,
)

CALIB_FILE = "calib.txt"
GLOBAL_POSE_FILE = "global_pose.txt"
_FRAME_RE = re.compile(r"^frame-(\d{6})\.(depth\.png|color\.jpg|pose\.txt)$")


class DatasetError(ValueError):
    pass


def format_pose(T: RigidTransform) -> str:
    return " ".join(repr(float(v)) for v in T.as_array()) + "\n"


def parse_pose(text: str) -> RigidTransform:
    values = [float(v) for v in text.split()]
    if len(values) != 7:
        raise DatasetError(f"expected 7 pose values, found {len(values)}")
    return RigidTransform.from_array(values)


def _format_intrinsics(K: CameraIntrinsics) -> str:
    return f"{K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n"


def write_calibration(path, K_depth: CameraIntrinsics, K_color: CameraIntrinsics) -> None:
    Path(path).write_text(_format_intrinsics(K_depth) + _format_intrinsics(K_color))


def read_calibration(path) -> tuple[CameraIntrinsics, CameraIntrinsics]:
    lines = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(lines) != 2 or any(len(ln) != 6 for ln in lines):
        raise DatasetError(f"{path}: expected two lines of 'fx fy cx cy width height'")
    out = []
    for fx, fy, cx, cy, w, h in lines:
        out.append(CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h)))
    return out[0], out[1]


def frame_paths(directory, index: int) -> tuple[Path, Path, Path]:
    d = Path(directory)
    stem = f"frame-{index:06d}"
    return d / f"{stem}.depth.png", d / f"{stem}.color.jpg", d / f"{stem}.pose.txt"


def write_frame_files(directory, index: int, depth_png: bytes, color_jpeg: bytes, pose: RigidTransform) -> None:
    """Write one frame from already-encoded payloads (used by the capture spool)."""
    dp, cp, pp = frame_paths(directory, index)
    dp.write_bytes(depth_png)
    cp.write_bytes(color_jpeg)
    pp.write_text(format_pose(pose))


def write_global_poses(path, poses: Mapping[int, RigidTransform]) -> None:
    lines = [f"{sid} " + format_pose(poses[sid]) for sid in sorted(poses)]
    Path(path).write_text("".join(lines))


def read_global_poses(path) -> dict[int, RigidTransform]:
    poses = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        sid, *rest = line.split()
        try:
            poses[int(sid)] = parse_pose(" ".join(rest))
        except (ValueError, DatasetError) as exc:
            raise DatasetError(f"{path}:{n}: {exc}") from None
    return poses


class Frame(NamedTuple):
    index: int
    depth: np.ndarray
    color: np.ndarray
    pose: RigidTransform


@dataclass
class DatasetSequence:
    path: Path
    K_depth: CameraIntrinsics
    K_color: CameraIntrinsics
    n_frames: int
    global_pose: RigidTransform | None = None

    def __len__(self):
        return self.n_frames

    def depth_mm(self, index: int) -> np.ndarray:
        return decode_depth_png(frame_paths(self.path, index)[0].read_bytes())

    def pose(self, index: int) -> RigidTransform:
        return parse_pose(frame_paths(self.path, index)[2].read_text())

    def frame(self, index: int) -> Frame:
        if not 0 <= index < self.n_frames:
            raise IndexError(index)
        _, cp, _ = frame_paths(self.path, index)
        depth = dequantise_depth(self.depth_mm(index))
        return Frame(index, depth, decode_color_jpeg(cp.read_bytes()), self.pose(index))

    def __iter__(self) -> Iterator[Frame]:
        for i in range(self.n_frames):
            yield self.frame(i)


def save_sequence(frames: Iterable, directory, K_depth: CameraIntrinsics, K_color: CameraIntrinsics,
                  global_pose: RigidTransform | None = None,
                  jpeg_quality: int = DEFAULT_JPEG_QUALITY) -> int:
    """Write ``(depth_m, color_rgb, pose)`` triples as frames 0..n-1; returns n."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_calibration(d / CALIB_FILE, K_depth, K_color)
    n = 0
    for depth, color, pose in frames:
        write_frame_files(d, n, encode_depth_png(quantise_depth(depth)),
                          encode_color_jpeg(color, jpeg_quality), pose)
        n += 1
    if global_pose is not None:
        (d / GLOBAL_POSE_FILE).write_text(format_pose(global_pose))
    return n


def load_sequence(directory) -> DatasetSequence:
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"{d} is not a directory")
    calib = d / CALIB_FILE
    if not calib.exists():
        raise DatasetError(f"{d}: missing {CALIB_FILE}")
    K_depth, K_color = read_calibration(calib)
    kinds: dict[str, set[int]] = {"depth.png": set(), "color.jpg": set(), "pose.txt": set()}
    for p in d.iterdir():
        m = _FRAME_RE.match(p.name)
        if m:
            kinds[m.group(2)].add(int(m.group(1)))
    present = set().union(*kinds.values())
    if not present:
        raise DatasetError(f"{d}: no frames")
    for i in range(max(present) + 1):
        missing = [k for k, idx in kinds.items() if i not in idx]
        if missing:
            raise DatasetError(f"{d}: gap at index {i} (missing {', '.join(missing)})")
    gp = d / GLOBAL_POSE_FILE
    global_pose = parse_pose(gp.read_text()) if gp.exists() else None
    return DatasetSequence(d, K_depth, K_color, max(present) + 1, global_pose)
