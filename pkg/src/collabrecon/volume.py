"""Dense CPU TSDF volume: integration, raycasting, mesh extraction and I/O.

Depth images are float32 arrays in meters (0 = invalid), colour images are
uint8 ``(H, W, 3)`` RGB arrays. Poses passed here are camera-to-world.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .se3 import RigidTransform

TSDF_SCALE = 32767.0
MIN_DEPTH = 0.1
MAX_DEPTH = 5.0
CHECKPOINT_MAGIC = b"CRTSDF\x00\x01"
_HEADER = struct.Struct("<8s3Id3dfH6x")
assert _HEADER.size == 64


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def resized(self, width: int, height: int) -> CameraIntrinsics:
        """Same field of view at another resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraIntrinsics(
            self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5, (self.cy + 0.5) * sy - 0.5, width, height
        )

    def as_tuple(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray directions with z = 1, shape (H, W, 3)."""
        u, v = np.meshgrid(np.arange(self.width), np.arange(self.height))
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1
        )

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """Camera-frame points for every pixel, (H, W, 3)."""
        return self.pixel_rays() * depth[..., None]


def check_frame(depth: np.ndarray, color: np.ndarray | None, K: CameraIntrinsics):
    if depth.shape != K.shape:
        raise ValueError(f"depth shape {depth.shape} does not match intrinsics {K.shape}")
    if color is not None and color.shape != (*K.shape, 3):
        raise ValueError(f"colour shape {color.shape} does not match depth {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise ValueError("depth must be finite and non-negative")


def register_color(color: np.ndarray, K_color: CameraIntrinsics, K_depth: CameraIntrinsics) -> np.ndarray:
    """Resample a colour image onto the depth pixel grid (shared optical centre)."""
    import cv2

    if color.shape[:2] == K_depth.shape and K_color == K_depth:
        return color
    # depth pixel -> colour pixel is affine when the centres coincide
    M = np.array(
        [
            [K_color.fx / K_depth.fx, 0.0, K_color.cx - K_color.fx / K_depth.fx * K_depth.cx],
            [0.0, K_color.fy / K_depth.fy, K_color.cy - K_color.fy / K_depth.fy * K_depth.cy],
        ]
    )
    return cv2.warpAffine(
        color,
        M,
        (K_depth.width, K_depth.height),
        flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
        borderMode=cv2.BORDER_REPLICATE,
    )


@numba.njit(cache=True)
def _integrate_kernel(
    tsdf, weight, color, origin, voxel_size, lo, hi, Rcw, tcw,
    fx, fy, cx, cy, depth, rgb, trunc, max_weight, dmin, dmax,
):
    H, W = depth.shape
    for i in range(lo[0], hi[0]):
        px = origin[0] + i * voxel_size
        for j in range(lo[1], hi[1]):
            py = origin[1] + j * voxel_size
            for k in range(lo[2], hi[2]):
                pz = origin[2] + k * voxel_size
                zc = Rcw[2, 0] * px + Rcw[2, 1] * py + Rcw[2, 2] * pz + tcw[2]
                if zc <= 0.0:
                    continue
                xc = Rcw[0, 0] * px + Rcw[0, 1] * py + Rcw[0, 2] * pz + tcw[0]
                yc = Rcw[1, 0] * px + Rcw[1, 1] * py + Rcw[1, 2] * pz + tcw[1]
                u = int(math.floor(fx * xc / zc + cx + 0.5))
                v = int(math.floor(fy * yc / zc + cy + 0.5))
                # a two pixel apron keeps border rays of a raycast from the same
                # pose fully supported by observed voxels
                if u < -2 or v < -2 or u >= W + 2 or v >= H + 2:
                    continue
                u = min(max(u, 0), W - 1)
                v = min(max(v, 0), H - 1)
                d = depth[v, u]
                if d < dmin or d > dmax:
                    continue
                sdf = d - zc
                if sdf <= -trunc:
                    continue
                val = sdf / trunc
                if val > 1.0:
                    val = 1.0
                w = np.float64(weight[i, j, k])
                old = tsdf[i, j, k] / 32767.0
                new = (old * w + val) / (w + 1.0)
                tsdf[i, j, k] = np.int16(math.floor(new * 32767.0 + 0.5))
                for c in range(3):
                    cv = (color[i, j, k, c] * w + rgb[v, u, c]) / (w + 1.0)
                    color[i, j, k, c] = np.uint8(math.floor(cv + 0.5))
                if w + 1.0 < max_weight:
                    weight[i, j, k] = np.uint16(w + 1.0)
                else:
                    weight[i, j, k] = np.uint16(max_weight)


@numba.njit(cache=True)
def _sample(tsdf, weight, color, fi, fj, fk, want_color, out_rgb):
    """Trilinear tsdf at fractional voxel coords; returns (value, valid)."""
    nx, ny, nz = tsdf.shape
    i0 = int(math.floor(fi))
    j0 = int(math.floor(fj))
    k0 = int(math.floor(fk))
    if i0 < 0 or j0 < 0 or k0 < 0 or i0 >= nx - 1 or j0 >= ny - 1 or k0 >= nz - 1:
        return 0.0, False
    a = fi - i0
    b = fj - j0
    c = fk - k0
    val = 0.0
    if want_color:
        out_rgb[0] = 0.0
        out_rgb[1] = 0.0
        out_rgb[2] = 0.0
    for di in range(2):
        wa = a if di == 1 else 1.0 - a
        for dj in range(2):
            wb = b if dj == 1 else 1.0 - b
            for dk in range(2):
                wc = c if dk == 1 else 1.0 - c
                if weight[i0 + di, j0 + dj, k0 + dk] == 0:
                    return 0.0, False
                wt = wa * wb * wc
                val += wt * tsdf[i0 + di, j0 + dj, k0 + dk]
                if want_color:
                    for ch in range(3):
                        out_rgb[ch] += wt * color[i0 + di, j0 + dj, k0 + dk, ch]
    return val / 32767.0, True


@numba.njit(cache=True)
def _raycast_kernel(
    tsdf, weight, color, origin, voxel_size, Rwc, twc,
    fx, fy, cx, cy, H, W, trunc, near, far, out_depth, out_rgb,
):
    nx, ny, nz = tsdf.shape
    lo = np.empty(3)
    hi = np.empty(3)
    for a in range(3):
        lo[a] = origin[a]
    hi[0] = origin[0] + (nx - 1) * voxel_size
    hi[1] = origin[1] + (ny - 1) * voxel_size
    hi[2] = origin[2] + (nz - 1) * voxel_size
    rgb = np.zeros(3)
    dw = np.empty(3)
    inv_vs = 1.0 / voxel_size
    for v in range(H):
        for u in range(W):
            dcx = (u - cx) / fx
            dcy = (v - cy) / fy
            for a in range(3):
                dw[a] = Rwc[a, 0] * dcx + Rwc[a, 1] * dcy + Rwc[a, 2]
            # slab test in units of camera depth
            t0 = near
            t1 = far
            hit_box = True
            for a in range(3):
                if abs(dw[a]) < 1e-12:
                    if twc[a] < lo[a] or twc[a] > hi[a]:
                        hit_box = False
                else:
                    ta = (lo[a] - twc[a]) / dw[a]
                    tb = (hi[a] - twc[a]) / dw[a]
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            if not hit_box or t0 > t1:
                continue
            ray_len = math.sqrt(dcx * dcx + dcy * dcy + 1.0)
            base_step = 0.5 * voxel_size / ray_len
            t = t0
            prev_ok = False
            prev_val = 0.0
            prev_t = t0
            while t <= t1:
                fi = (twc[0] + t * dw[0] - origin[0]) * inv_vs
                fj = (twc[1] + t * dw[1] - origin[1]) * inv_vs
                fk = (twc[2] + t * dw[2] - origin[2]) * inv_vs
                val, ok = _sample(tsdf, weight, color, fi, fj, fk, False, rgb)
                step = base_step
                if ok:
                    if prev_ok and prev_val > 0.0 and val <= 0.0:
                        ta = prev_t
                        tb = t
                        va = prev_val
                        vb = val
                        for _ in range(6):
                            tm = 0.5 * (ta + tb)
                            vm, okm = _sample(
                                tsdf, weight, color,
                                (twc[0] + tm * dw[0] - origin[0]) * inv_vs,
                                (twc[1] + tm * dw[1] - origin[1]) * inv_vs,
                                (twc[2] + tm * dw[2] - origin[2]) * inv_vs,
                                False, rgb,
                            )
                            if not okm:
                                break
                            if vm > 0.0:
                                ta = tm
                                va = vm
                            else:
                                tb = tm
                                vb = vm
                        if va - vb > 0.0:
                            th = ta + (tb - ta) * va / (va - vb)
                        else:
                            th = tb
                        _, okc = _sample(
                            tsdf, weight, color,
                            (twc[0] + th * dw[0] - origin[0]) * inv_vs,
                            (twc[1] + th * dw[1] - origin[1]) * inv_vs,
                            (twc[2] + th * dw[2] - origin[2]) * inv_vs,
                            True, rgb,
                        )
                        if not okc:
                            _, okc = _sample(
                                tsdf, weight, color,
                                (twc[0] + tb * dw[0] - origin[0]) * inv_vs,
                                (twc[1] + tb * dw[1] - origin[1]) * inv_vs,
                                (twc[2] + tb * dw[2] - origin[2]) * inv_vs,
                                True, rgb,
                            )
                        out_depth[v, u] = th
                        for ch in range(3):
                            x = math.floor(rgb[ch] + 0.5)
                            out_rgb[v, u, ch] = min(255.0, max(0.0, x))
                        break
                    if val > 0.0:
                        # free-space skip, bounded below the truncation band
                        skip = 0.8 * val * trunc / ray_len
                        if skip > step:
                            step = skip
                prev_ok = ok
                prev_val = val
                prev_t = t
                t += step


@dataclass
class Mesh:
    vertices: np.ndarray
    colors: np.ndarray
    faces: np.ndarray

    def __len__(self):
        return len(self.faces)

    @classmethod
    def empty(cls) -> Mesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.uint8), np.zeros((0, 3), np.int64))

    def write_ply(self, path) -> None:
        write_ply(self, path)


class TsdfVolume:
    """Truncated signed distance grid with per-voxel weight and colour.

    Voxel ``(i, j, k)`` is centred at ``origin + voxel_size * (i, j, k)``.
    tsdf is stored as int16 (scaled by 32767), weight as uint16.
    """

    def __init__(
        self,
        dims=(256, 256, 256),
        voxel_size: float = 0.02,
        origin=None,
        truncation: float | None = None,
        max_weight: int = 128,
    ):
        self.dims = tuple(int(d) for d in dims)
        if any(d < 2 for d in self.dims):
            raise ValueError("volume dims must be >= 2")
        self.voxel_size = float(voxel_size)
        if origin is None:
            origin = -0.5 * self.voxel_size * np.array(self.dims, dtype=float)
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.truncation = 4.0 * self.voxel_size if truncation is None else float(truncation)
        self.max_weight = int(max_weight)
        self.tsdf = np.full(self.dims, 32767, dtype=np.int16)
        self.weight = np.zeros(self.dims, dtype=np.uint16)
        self.color = np.zeros((*self.dims, 3), dtype=np.uint8)
        # integration and raycasting of one volume never overlap
        self.lock = threading.RLock()

    @property
    def nbytes(self) -> int:
        return self.tsdf.nbytes + self.weight.nbytes + self.color.nbytes

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.origin.copy(), self.origin + self.voxel_size * (np.array(self.dims) - 1)

    def is_empty(self) -> bool:
        return not self.weight.any()

    def tsdf_values(self) -> np.ndarray:
        return self.tsdf.astype(np.float32) / TSDF_SCALE

    def world_to_voxel(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.origin) / self.voxel_size

    def copy(self) -> TsdfVolume:
        out = TsdfVolume(self.dims, self.voxel_size, self.origin, self.truncation, self.max_weight)
        out.tsdf[...] = self.tsdf
        out.weight[...] = self.weight
        out.color[...] = self.color
        return out

    def _frustum_block(self, depth, pose: RigidTransform, K: CameraIntrinsics, far: float):
        corners = []
        for u in (0, K.width - 1):
            for v in (0, K.height - 1):
                ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
                corners.append(ray * MIN_DEPTH)
                corners.append(ray * far)
        pts = pose.apply(np.array(corners))
        lo = np.floor(self.world_to_voxel(pts.min(axis=0))).astype(np.int64) - 1
        hi = np.ceil(self.world_to_voxel(pts.max(axis=0))).astype(np.int64) + 2
        lo = np.clip(lo, 0, self.dims)
        hi = np.clip(hi, 0, self.dims)
        return lo, hi

    def integrate(self, depth, color, pose: RigidTransform, K: CameraIntrinsics) -> TsdfVolume:
        """Fuse one posed frame (running weighted average of tsdf and colour)."""
        depth = np.asarray(depth, dtype=np.float32)
        check_frame(depth, color, K)
        if color is None:
            color = np.full((*K.shape, 3), 128, np.uint8)
        band = (depth >= MIN_DEPTH) & (depth <= MAX_DEPTH)
        if not band.any():
            return self
        far = float(depth[band].max()) + self.truncation
        lo, hi = self._frustum_block(depth, pose, K, far)
        if np.any(hi <= lo):
            return self
        Rcw = pose.rotation.T
        tcw = -Rcw @ pose.t
        with self.lock:
            _integrate_kernel(
                self.tsdf, self.weight, self.color, self.origin, self.voxel_size,
                lo, hi, np.ascontiguousarray(Rcw), tcw,
                K.fx, K.fy, K.cx, K.cy, depth, np.ascontiguousarray(color, dtype=np.uint8),
                self.truncation, float(self.max_weight), MIN_DEPTH, MAX_DEPTH,
            )
        return self

    def raycast(self, pose: RigidTransform, K: CameraIntrinsics, far: float = 10.0):
        """Render (depth, colour) from a camera-to-world pose; misses get depth 0."""
        depth = np.zeros(K.shape, np.float32)
        rgb = np.zeros((*K.shape, 3), np.uint8)
        with self.lock:
            _raycast_kernel(
                self.tsdf, self.weight, self.color, self.origin, self.voxel_size,
                np.ascontiguousarray(pose.rotation), pose.t,
                K.fx, K.fy, K.cx, K.cy, K.height, K.width,
                self.truncation, MIN_DEPTH, far, depth, rgb,
            )
        return depth, rgb

    def extract_mesh(self) -> Mesh:
        return extract_mesh(self)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(
                _HEADER.pack(
                    CHECKPOINT_MAGIC, *self.dims, self.voxel_size, *self.origin,
                    self.truncation, self.max_weight,
                )
            )
            f.write(self.tsdf.tobytes())
            f.write(self.weight.tobytes())
            f.write(self.color.tobytes())

    @classmethod
    def load(cls, path) -> TsdfVolume:
        data = Path(path).read_bytes()
        if len(data) < _HEADER.size:
            raise ValueError("truncated volume checkpoint header")
        magic, nx, ny, nz, vs, ox, oy, oz, trunc, max_w = _HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        vol = cls((nx, ny, nz), vs, (ox, oy, oz), trunc, max_w)
        n = nx * ny * nz
        off = _HEADER.size
        expected = off + n * 2 + n * 2 + n * 3
        if len(data) != expected:
            raise ValueError(f"checkpoint size {len(data)} != expected {expected}")
        vol.tsdf[...] = np.frombuffer(data, np.int16, n, off).reshape(vol.dims)
        off += n * 2
        vol.weight[...] = np.frombuffer(data, np.uint16, n, off).reshape(vol.dims)
        off += n * 2
        vol.color[...] = np.frombuffer(data, np.uint8, n * 3, off).reshape(*vol.dims, 3)
        return vol


def integrate(vol: TsdfVolume, depth, color, pose, K) -> TsdfVolume:
    return vol.integrate(depth, color, pose, K)


def raycast(vol: TsdfVolume, pose, K):
    return vol.raycast(pose, K)


def extract_mesh(vol: TsdfVolume) -> Mesh:
    """Marching cubes on the zero level set, restricted to fully observed cells."""
    from skimage.measure import marching_cubes

    observed = vol.weight > 0
    # a cell is usable only when all eight corners were observed
    cell = (
        observed[:-1, :-1, :-1] & observed[1:, :-1, :-1] & observed[:-1, 1:, :-1]
        & observed[:-1, :-1, 1:] & observed[1:, 1:, :-1] & observed[1:, :-1, 1:]
        & observed[:-1, 1:, 1:] & observed[1:, 1:, 1:]
    )
    if not cell.any():
        return Mesh.empty()
    values = vol.tsdf_values()
    if values[observed].min() >= 0 or values[observed].max() <= 0:
        return Mesh.empty()
    mask = np.zeros(vol.dims, bool)
    mask[:-1, :-1, :-1] = cell
    try:
        verts, faces, _, _ = marching_cubes(values, level=0.0, mask=mask)
    except (ValueError, RuntimeError):
        return Mesh.empty()
    if len(faces) == 0:
        return Mesh.empty()
    world = vol.origin + verts * vol.voxel_size
    # skimage's mask does not guarantee every corner is observed, so each vertex
    # is checked against the two voxels of the grid edge it lies on
    dims = np.array(vol.dims) - 1
    lo_v = np.clip(np.floor(verts + 1e-6).astype(np.int64), 0, dims)
    hi_v = np.clip(np.ceil(verts - 1e-6).astype(np.int64), 0, dims)
    vert_ok = observed[tuple(lo_v.T)] & observed[tuple(hi_v.T)]
    tri = world[faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    keep = (area > 1e-12) & np.all(np.isfinite(tri), axis=(1, 2)) & vert_ok[faces].all(axis=1)
    faces = faces[keep]
    if len(faces) == 0:
        return Mesh.empty()
    used = np.unique(faces)
    remap = np.full(len(world), -1, np.int64)
    remap[used] = np.arange(len(used))
    idx = np.clip(np.rint(verts[used]).astype(np.int64), 0, np.array(vol.dims) - 1)
    colors = vol.color[idx[:, 0], idx[:, 1], idx[:, 2]]
    return Mesh(world[used], colors, remap[faces])


def write_ply(mesh: Mesh, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    for p, c in zip(mesh.vertices, mesh.colors):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {int(c[0])} {int(c[1])} {int(c[2])}")
    for f in mesh.faces:
        lines.append(f"3 {f[0]} {f[1]} {f[2]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> Mesh:
    """Reader for the ASCII layout produced by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    end = text.index("end_header")
    nv = nf = 0
    for line in text[:end]:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    body = text[end + 1:]
    verts = np.array([[float(x) for x in l.split()[:3]] for l in body[:nv]]).reshape(-1, 3)
    cols = np.array([[int(x) for x in l.split()[3:6]] for l in body[:nv]], np.uint8).reshape(-1, 3)
    faces = np.array([[int(x) for x in l.split()[1:4]] for l in body[nv:nv + nf]], np.int64).reshape(-1, 3)
    return Mesh(verts, cols, faces)
