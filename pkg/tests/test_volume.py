import numpy as np
import pytest

from collabrecon.se3 import RigidTransform, rotate_y, translate
from collabrecon.volume import (
    CHECKPOINT_MAGIC,
    CameraIntrinsics,
    TsdfVolume,
    read_ply,
    register_color,
)

from conftest import K_SMALL, plane_volume

I = RigidTransform.identity()


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 1, 1, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1, 1, 5, 1, 4, 4)
    K = K_SMALL.resized(448, 344)
    assert K.fx == 400 and K.shape == (344, 448)


def test_invalid_depth_leaves_volume_untouched():
    vol = TsdfVolume((32, 32, 32), 0.05)
    before = vol.tsdf.copy()
    vol.integrate(np.zeros(K_SMALL.shape, np.float32), None, I, K_SMALL)
    assert vol.is_empty()
    np.testing.assert_array_equal(vol.tsdf, before)


def test_dimension_mismatch_rejected():
    vol = TsdfVolume((16, 16, 16), 0.05)
    with pytest.raises(ValueError):
        vol.integrate(np.ones((10, 10), np.float32), None, I, K_SMALL)
    with pytest.raises(ValueError):
        vol.integrate(np.ones(K_SMALL.shape, np.float32), np.zeros((5, 5, 3), np.uint8), I, K_SMALL)


def test_plane_sign_flip_on_axis(plane):
    vol, _ = plane
    vals = vol.tsdf_values()
    i, j = np.rint(vol.world_to_voxel([0.0, 0.0, 0.0])[:2]).astype(int)
    ks = np.arange(vol.dims[2])
    z = vol.origin[2] + ks * vol.voxel_size
    observed = vol.weight[i, j] > 0
    line = vals[i, j]
    flips = [k for k in ks[:-1] if observed[k] and observed[k + 1] and line[k] > 0 >= line[k + 1]]
    assert len(flips) == 1
    k = flips[0]
    assert abs(z[k] - 2.0) <= vol.voxel_size + 1e-9 and abs(z[k + 1] - 2.0) <= vol.voxel_size + 1e-9
    # analytic projective tsdf on the axis is (2 - z) / truncation
    near = observed & (np.abs(z - 2.0) < vol.truncation)
    np.testing.assert_allclose(line[near], (2.0 - z[near]) / vol.truncation, atol=1e-4)


def test_double_integration_running_average():
    vol, K = plane_volume()
    once_tsdf = vol.tsdf.copy()
    once_w = vol.weight.copy()
    vol.integrate(np.full(K.shape, 2.0, np.float32), None, I, K)
    np.testing.assert_array_equal(vol.tsdf, once_tsdf)
    np.testing.assert_array_equal(vol.weight, np.minimum(2 * once_w.astype(int), vol.max_weight))


def test_weight_is_capped():
    vol = TsdfVolume((160, 128, 128), 0.02, origin=(-1.6, -1.28, 0.5), max_weight=3)
    for _ in range(5):
        vol.integrate(np.full(K_SMALL.shape, 2.0, np.float32), None, I, K_SMALL)
    assert vol.weight.max() == 3


def test_raycast_untouched_volume():
    vol = TsdfVolume((32, 32, 32), 0.05)
    depth, rgb = vol.raycast(I, K_SMALL)
    assert not depth.any() and not rgb.any()


def test_plane_raycast_round_trip(plane):
    vol, K = plane
    depth, _ = vol.raycast(I, K)
    good = np.abs(depth - 2.0) < vol.voxel_size
    assert good.mean() >= 0.95
    valid = depth > 0
    assert np.abs(depth[valid] - 2.0).mean() < vol.voxel_size


def test_raycast_facing_away(plane):
    vol, K = plane
    depth, _ = vol.raycast(rotate_y(180), K)
    assert (depth > 0).mean() < 0.01


def _ray_hits_box(vol, pose, K):
    lo, hi = vol.bounds
    rays = K.pixel_rays().reshape(-1, 3) @ pose.rotation.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - pose.t) / rays
        t2 = (hi - pose.t) / rays
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    return ((tmax >= tmin) & (tmax > 0)).reshape(K.shape)


def test_raycast_validity_inside_bounding_box(plane):
    vol, K = plane
    pose = translate(0.9, 0.0, -0.5) @ rotate_y(25)
    depth, _ = vol.raycast(pose, K)
    hits = _ray_hits_box(vol, pose, K)
    assert (depth > 0).any()
    assert not np.any((depth > 0) & ~hits)


def test_colour_follows_integration():
    vol = TsdfVolume((160, 128, 128), 0.02, origin=(-1.6, -1.28, 0.5))
    rgb = np.zeros((*K_SMALL.shape, 3), np.uint8)
    rgb[..., 0] = 200
    vol.integrate(np.full(K_SMALL.shape, 2.0, np.float32), rgb, I, K_SMALL)
    _, out = vol.raycast(I, K_SMALL)
    assert np.all(out[60:100, 80:140, 0] == 200)
    assert np.all(out[60:100, 80:140, 1:] == 0)


def test_mesh_of_empty_volume():
    mesh = TsdfVolume((16, 16, 16), 0.05).extract_mesh()
    assert len(mesh.vertices) == 0 and len(mesh.faces) == 0


def test_plane_mesh_is_on_plane(plane):
    vol, _ = plane
    mesh = vol.extract_mesh()
    assert len(mesh.faces) > 0
    rms = np.sqrt(np.mean((mesh.vertices[:, 2] - 2.0) ** 2))
    assert rms < vol.voxel_size
    assert np.all(np.isfinite(mesh.vertices))
    tri = mesh.vertices[mesh.faces]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    assert area.min() > 1e-12


def test_mesh_deterministic(plane):
    vol, _ = plane
    a, b = vol.extract_mesh(), vol.extract_mesh()
    assert len(a.vertices) == len(b.vertices)
    np.testing.assert_array_equal(a.faces, b.faces)


def test_ply_round_trip(tmp_path, plane):
    vol, _ = plane
    mesh = vol.extract_mesh()
    path = tmp_path / "m.ply"
    mesh.write_ply(path)
    assert path.read_text().startswith("ply\nformat ascii 1.0\n")
    back = read_ply(path)
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-5)
    np.testing.assert_array_equal(back.faces, mesh.faces)
    np.testing.assert_array_equal(back.colors, mesh.colors)


def test_checkpoint_round_trip(tmp_path, plane):
    vol, _ = plane
    path = tmp_path / "v.bin"
    vol.save(path)
    raw = path.read_bytes()
    assert raw[:8] == CHECKPOINT_MAGIC
    back = TsdfVolume.load(path)
    assert back.dims == vol.dims and back.voxel_size == vol.voxel_size
    np.testing.assert_array_equal(back.origin, vol.origin)
    np.testing.assert_array_equal(back.tsdf, vol.tsdf)
    np.testing.assert_array_equal(back.weight, vol.weight)
    np.testing.assert_array_equal(back.color, vol.color)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"x" * 64)
    with pytest.raises(ValueError):
        TsdfVolume.load(path)


def test_register_color_preserves_field_of_view():
    Kc = K_SMALL.resized(448, 344)
    img = np.zeros((*Kc.shape, 3), np.uint8)
    img[:, : Kc.width // 2] = 255
    out = register_color(img, Kc, K_SMALL)
    assert out.shape == (*K_SMALL.shape, 3)
    assert np.all(out[:, :100] == 255) and np.all(out[:, 124:] == 0)
    assert register_color(out, K_SMALL, K_SMALL) is out
