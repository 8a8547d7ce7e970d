"""Per-scene relocalisers: a scene-coordinate baseline and a ground-truth oracle."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Protocol

import numpy as np
from scipy.spatial import cKDTree

from .se3 import RigidTransform, compose
from .volume import MAX_DEPTH, MIN_DEPTH, CameraIntrinsics, check_frame

# Fixed descriptor offsets, in pixel-meters (divided by depth at use)
_OFFSET_RNG = np.random.default_rng(20170911)
DESCRIPTOR_OFFSETS = _OFFSET_RNG.uniform(-60.0, 60.0, size=(16, 2))
DEPTH_DIFF_CLIP = 1.0


class Relocaliser(Protocol):
    def train(self, color, depth, pose: RigidTransform, K: CameraIntrinsics, frame_ref=None) -> None: ...

    def relocalise(self, color, depth, K: CameraIntrinsics, hint=None) -> RigidTransform | None: ...

    @property
    def trained(self) -> bool: ...


class RansacResult(NamedTuple):
    transform: RigidTransform
    inliers: int


def kabsch(src: np.ndarray, dst: np.ndarray, weights=None) -> RigidTransform:
    """Least-squares rigid transform T with T(src) ~ dst."""
    src = np.asarray(src, float)
    dst = np.asarray(dst, float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    cs = w @ src
    cd = w @ dst
    H = (src - cs).T @ ((dst - cd) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform.from_rotation(R, cd - R @ cs)


def triangle_area(p0, p1, p2) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(p1 - p0, p2 - p0)))


def kabsch_ransac(
    src,
    dst,
    rng: np.random.Generator | int | None = 0,
    iterations: int = 200,
    threshold: float = 0.05,
    min_area: float = 1e-8,
) -> RansacResult | None:
    """RANSAC over 3-point samples with a Kabsch refit on the best inlier set.

    Returns None with fewer than 3 correspondences or when every minimal
    sample was degenerate (triangle area below ``min_area`` on either side).
    """
    src = np.asarray(src, float).reshape(-1, 3)
    dst = np.asarray(dst, float).reshape(-1, 3)
    if len(src) != len(dst):
        raise ValueError("correspondence arrays differ in length")
    n = len(src)
    if n < 3:
        return None
    rng = np.random.default_rng(rng)
    best = None
    best_count = 0
    for _ in range(iterations):
        idx = rng.choice(n, 3, replace=False)
        s, d = src[idx], dst[idx]
        if triangle_area(*s) < min_area or triangle_area(*d) < min_area:
            continue
        T = kabsch(s, d)
        err = np.linalg.norm(T.apply(src) - dst, axis=1)
        mask = err < threshold
        count = int(mask.sum())
        if count > best_count:
            best, best_count = mask, count
    if best is None or best_count < 3:
        return None
    T = kabsch(src[best], dst[best])
    mask = np.linalg.norm(T.apply(src) - dst, axis=1) < threshold
    if mask.sum() > best_count:
        T = kabsch(src[mask], dst[mask])
        best_count = int(mask.sum())
    return RansacResult(T, best_count)


def compute_descriptors(color: np.ndarray, depth: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """16 depth-normalised depth differences followed by RGB in [0, 1]."""
    H, W = depth.shape
    u = pixels[:, 0]
    v = pixels[:, 1]
    d = depth[v, u].astype(float)
    offs = DESCRIPTOR_OFFSETS[None, :, :] / d[:, None, None]
    uu = np.rint(u[:, None] + offs[..., 0]).astype(np.int64)
    vv = np.rint(v[:, None] + offs[..., 1]).astype(np.int64)
    inside = (uu >= 0) & (uu < W) & (vv >= 0) & (vv < H)
    probe = np.zeros(uu.shape)
    probe[inside] = depth[vv[inside], uu[inside]]
    diff = probe - d[:, None]
    diff[(~inside) | (probe <= 0)] = DEPTH_DIFF_CLIP
    diff = np.clip(diff, -DEPTH_DIFF_CLIP, DEPTH_DIFF_CLIP)
    rgb = color[v, u].astype(float) / 255.0
    return np.hstack([diff, rgb])


def jittered_grid(depth: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Up to ``count`` valid-depth pixels, one per jittered grid cell, as (u, v)."""
    H, W = depth.shape
    nx = max(1, int(round(math.sqrt(count * W / H))))
    ny = max(1, count // nx)
    cw, ch = W / nx, H / ny
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny))
    u = np.floor((gx.ravel() + rng.random(gx.size)) * cw).astype(np.int64)
    v = np.floor((gy.ravel() + rng.random(gy.size)) * ch).astype(np.int64)
    u = np.clip(u, 0, W - 1)
    v = np.clip(v, 0, H - 1)
    d = depth[v, u]
    ok = (d >= MIN_DEPTH) & (d <= MAX_DEPTH)
    return np.stack([u[ok], v[ok]], axis=1)[:count]


def _backproject(pixels, depth, K: CameraIntrinsics) -> np.ndarray:
    u = pixels[:, 0].astype(float)
    v = pixels[:, 1].astype(float)
    z = depth[pixels[:, 1], pixels[:, 0]].astype(float)
    return np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=1)


class SceneCoordinateRelocaliser:
    """Baseline: stores (world point, descriptor) pairs and solves pose by RANSAC."""

    def __init__(
        self,
        capacity: int = 200_000,
        samples_per_frame: int = 512,
        min_inliers: int = 20,
        ransac_iterations: int = 200,
        inlier_threshold: float = 0.05,
        seed: int = 0,
    ):
        self.capacity = capacity
        self.samples_per_frame = samples_per_frame
        self.min_inliers = min_inliers
        self.ransac_iterations = ransac_iterations
        self.inlier_threshold = inlier_threshold
        self.rng = np.random.default_rng(seed)
        self.points = np.zeros((0, 3))
        self.descriptors = np.zeros((0, 19))
        self.seen = 0
        self._tree = None
        self._lock = threading.Lock()
        self.last_inliers = 0

    @property
    def trained(self) -> bool:
        return len(self.points) > 0

    def __len__(self):
        return len(self.points)

    def train(self, color, depth, pose: RigidTransform, K: CameraIntrinsics, frame_ref=None) -> None:
        depth = np.asarray(depth, np.float32)
        check_frame(depth, color, K)
        pixels = jittered_grid(depth, self.samples_per_frame, self.rng)
        if len(pixels) == 0:
            return
        world = pose.apply(_backproject(pixels, depth, K))
        desc = compute_descriptors(color, depth, pixels)
        with self._lock:
            self._insert(world, desc)
            self._tree = None

    def _insert(self, world, desc):
        room = self.capacity - len(self.points)
        take = min(room, len(world))
        if take > 0:
            self.points = np.vstack([self.points, world[:take]])
            self.descriptors = np.vstack([self.descriptors, desc[:take]])
            self.seen += take
        for p, d in zip(world[take:], desc[take:]):
            self.seen += 1
            j = int(self.rng.integers(self.seen))
            if j < self.capacity:
                self.points[j] = p
                self.descriptors[j] = d

    def release_training_data(self) -> None:
        """No separable training buffer exists here; kept for interface parity."""

    def relocalise(self, color, depth, K: CameraIntrinsics, hint=None) -> RigidTransform | None:
        depth = np.asarray(depth, np.float32)
        check_frame(depth, color, K)
        self.last_inliers = 0
        with self._lock:
            if not self.trained:
                return None
            if self._tree is None:
                self._tree = cKDTree(self.descriptors)
            tree, points = self._tree, self.points
            rng = np.random.default_rng(self.rng.integers(2**63))
        pixels = jittered_grid(depth, self.samples_per_frame, rng)
        if len(pixels) < 3:
            return None
        cam = _backproject(pixels, depth, K)
        _, nn = tree.query(compute_descriptors(color, depth, pixels))
        result = kabsch_ransac(
            cam, points[nn], rng, self.ransac_iterations, self.inlier_threshold
        )
        if result is None or result.inliers < self.min_inliers:
            return None
        self.last_inliers = result.inliers
        return result.transform


def random_perturbation(rng: np.random.Generator, trans_m: float, rot_deg: float, gaussian: bool) -> RigidTransform:
    """Gaussian noise (sigma values) or a uniform draw from the (trans_m, rot_deg) ball."""
    if gaussian:
        t = rng.normal(0.0, trans_m, 3) if trans_m > 0 else np.zeros(3)
        w = rng.normal(0.0, math.radians(rot_deg), 3) if rot_deg > 0 else np.zeros(3)
        return RigidTransform.from_axis_angle(w, t)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    t = d * trans_m * rng.random() ** (1.0 / 3.0)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rot_deg) * rng.random()
    return RigidTransform.from_axis_angle(axis * angle, t)


@dataclass
class OracleConfig:
    """``ground_truth_provider(hint)`` returns the true camera-to-scene pose."""

    ground_truth_provider: Callable | None = None
    inlier_noise: tuple[float, float] = (0.0, 0.0)
    outlier_rate: float = 0.0
    outlier_magnitude: tuple[float, float] = (1.0, 90.0)
    failure_rate: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("outlier_rate", "failure_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {rate}")


@dataclass
class OracleRelocaliser:
    config: OracleConfig
    trained_frames: list = field(default_factory=list)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.config.rng_seed)

    @property
    def trained(self) -> bool:
        return bool(self.trained_frames)

    def train(self, color, depth, pose, K, frame_ref=None) -> None:
        self.trained_frames.append(frame_ref if frame_ref is not None else len(self.trained_frames))

    def release_training_data(self) -> None:
        pass

    def relocalise(self, color, depth, K, hint=None) -> RigidTransform | None:
        if not self.trained or self.config.ground_truth_provider is None:
            return None
        cfg = self.config
        # draw every random number up front so the stream is call-deterministic
        u_fail, u_out = self.rng.random(2)
        inlier = random_perturbation(self.rng, *cfg.inlier_noise, gaussian=True)
        outlier = random_perturbation(self.rng, *cfg.outlier_magnitude, gaussian=False)
        if u_fail < cfg.failure_rate:
            return None
        truth = cfg.ground_truth_provider(hint)
        if truth is None:
            return None
        noise = outlier if u_out < cfg.outlier_rate else inlier
        return compose(truth, noise)
