from __future__ import annotations

import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tspe.errors import ConfigError, DataError, DomainError
from tspe.fusion import (
    TriangleMesh,
    TsdfVolume,
    extract_mesh,
    freeze,
    integrate,
    naive_fuse,
    progressive_fuse,
    read_ply,
)
from tspe.scene import Camera, Primitive, SceneConfig, look_at_rotation
from tspe.transmittance import DepthMap, render_tstack

from .conftest import axis_camera

S = 0.02
TAU = 4 * S


def plane_scene(z=2.0):
    return SceneConfig((Primitive("plane", (0, 0, z), 1.0, normal=(0, 0, 1), extent=100.0),), ())


def plane_map(cam, z=2.0) -> DepthMap:
    return render_tstack(plane_scene(z), cam, 2).map(1)


def plane_volume():
    return TsdfVolume.around((-0.4, -0.4, 1.7), (0.4, 0.4, 2.3), S)


def zero_crossings(vol, ix, iy):
    """Depths where V changes sign along one column, by linear interpolation."""
    col = vol.tsdf[ix, iy]
    z = vol.origin[2] + S * np.arange(vol.dims[2])
    out = []
    for k in np.flatnonzero((col[:-1] > 0) & (col[1:] <= 0)):
        out.append(z[k] + S * col[k] / (col[k] - col[k + 1]))
    return out


def central_columns(vol, half=0.3):
    xs = vol.origin[0] + S * np.arange(vol.dims[0])
    ys = vol.origin[1] + S * np.arange(vol.dims[1])
    return [(i, j) for i in np.flatnonzero(np.abs(xs) <= half) for j in np.flatnonzero(np.abs(ys) <= half)]


def test_plane_zero_crossing():
    vol = integrate(plane_volume(), plane_map(axis_camera()), TAU)
    for ix, iy in central_columns(vol):
        (z,) = zero_crossings(vol, ix, iy)
        assert abs(z - 2.0) <= S / 2


def test_integrate_twice_doubles_weight_only():
    cam = axis_camera()
    once = integrate(plane_volume(), plane_map(cam), TAU)
    twice = integrate(integrate(plane_volume(), plane_map(cam), TAU), plane_map(cam), TAU)
    assert np.array_equal(once.tsdf, twice.tsdf)
    assert np.array_equal(twice.weight, 2 * once.weight)


def tilted_camera(x, cam_id):
    pos = np.array([x, 0.0, 0.0])
    return Camera(fx=60, fy=60, cx=32.5, cy=32.5, width=65, height=65,
                  rotation=look_at_rotation(pos, (0, 0, 2.0), up=(0, 1, 0)), position=pos, id=cam_id)


def voxel_oracle(point, cams_and_maps):
    """Direct per-voxel projective update, written out observation by observation."""
    total, weight = 0.0, 0
    for cam, dmap in cams_and_maps:
        u, v, z = cam.project(point[None])
        px, py = int(np.floor(u[0])), int(np.floor(v[0]))
        if z[0] <= 0 or not (0 <= px < cam.width and 0 <= py < cam.height):
            continue
        d = float(dmap.depth[py, px])
        if d <= 0:
            continue
        sdf = d - float(np.linalg.norm(point - cam.position))
        if sdf > -TAU:
            total += min(1.0, max(-1.0, sdf / TAU))
            weight += 1
    return (total / weight if weight else 1.0), weight


def test_two_tilted_cameras_match_voxel_oracle():
    pairs = [(c, plane_map(c)) for c in (tilted_camera(-0.5, 0), tilted_camera(0.5, 1))]
    vol = plane_volume()
    for _, m in pairs:
        integrate(vol, m, TAU)
    rng = np.random.default_rng(0)
    pts = vol.centers().reshape(-1, 3)
    tsdf, w = vol.tsdf.reshape(-1), vol.weight.reshape(-1)
    for i in rng.choice(len(pts), 400, replace=False):
        want_v, want_w = voxel_oracle(pts[i], pairs)
        assert w[i] == want_w
        assert tsdf[i] == pytest.approx(want_v, abs=1e-6)
    band = np.abs(pts[:, 2] - 2.0) < TAU / 2
    central = band & (np.abs(pts[:, 0]) < 0.2) & (np.abs(pts[:, 1]) < 0.2)
    assert np.all(w[central] == 2)
    for ix, iy in central_columns(vol, 0.2):
        (z,) = zero_crossings(vol, ix, iy)
        assert abs(z - 2.0) <= S / 2


def test_integrate_rejects_mismatched_camera_and_small_truncation():
    m = plane_map(axis_camera())
    with pytest.raises(ConfigError):
        integrate(plane_volume(), m, TAU, camera=axis_camera(width=33))
    with pytest.raises(DomainError):
        integrate(plane_volume(), m, 1.5 * S)
    with pytest.raises(DataError):
        DepthMap(np.zeros((3, 3)), axis_camera())


def test_freeze_counts():
    assert freeze(plane_volume()) == 0
    vol = integrate(plane_volume(), plane_map(axis_camera()), TAU)
    observed_columns = np.count_nonzero(vol.weight.max(axis=2) > 0)
    # each observed column holds the open band |z - 2| < tau: between 2*tau/s - 1 and 2*tau/s voxels
    per_column = 2 * TAU / S
    assert (per_column - 1) * observed_columns <= freeze(vol, 1.0) <= per_column * observed_columns
    fresh = integrate(plane_volume(), plane_map(axis_camera()), TAU)
    assert freeze(fresh, np.inf) == 0
    with pytest.raises(DomainError):
        freeze(fresh, 0.0)


def test_frozen_voxels_bit_identical():
    vol = integrate(plane_volume(), plane_map(axis_camera()), TAU)
    freeze(vol)
    before_s, before_w = vol.sdf_sum[vol.frozen].copy(), vol.weight_q[vol.frozen].copy()
    integrate(vol, plane_map(axis_camera(), z=2.03), TAU)
    assert np.array_equal(vol.sdf_sum[vol.frozen], before_s)
    assert np.array_equal(vol.weight_q[vol.frozen], before_w)
    assert vol.weight[~vol.frozen].max() == 2


@settings(max_examples=60, deadline=None)
@given(z=st.floats(1.8, 2.2), shift=st.floats(-0.3, 0.3))
def test_integrate_stays_in_frustum_and_band(z, shift):
    cam = Camera(fx=20, fy=20, cx=8, cy=8, width=16, height=16, rotation=np.eye(3),
                 position=np.array([shift, 0.0, 0.0]))
    m = plane_map(cam, z)
    vol = integrate(plane_volume(), m, TAU)
    pts = vol.centers().reshape(-1, 3)
    w = vol.weight.reshape(-1)
    u, v, depth_z = cam.project(pts)
    inside = (depth_z > 0) & (u >= 0) & (u < 16) & (v >= 0) & (v < 16)
    assert np.all(w[~inside] == 0)
    dist = np.linalg.norm(pts - cam.position, axis=1)
    far = dist > m.depth.max() + TAU
    assert np.all(w[far] == 0)
    assert np.all(np.abs(vol.tsdf) <= 1)


small_maps = st.lists(
    st.tuples(st.integers(0, 3), st.lists(st.floats(0.0, 3.0), min_size=16, max_size=16)),
    min_size=1, max_size=5,
)


def _small_cameras():
    cams = []
    for i, pos in enumerate([(0, 0, -1.0), (1.5, 0, 0.5), (-1.5, 0.2, 0.5), (0, 1.5, 0.5)]):
        rot = look_at_rotation(np.array(pos), (0, 0, 0.5), up=(0, 0, 1) if i != 0 else (0, 1, 0))
        cams.append(Camera(fx=4, fy=4, cx=2, cy=2, width=4, height=4, rotation=rot, position=np.array(pos), id=i))
    return cams


CAMS = _small_cameras()


@settings(max_examples=200, deadline=None)
@given(maps=small_maps, seed=st.integers(0, 2**16))
def test_view_order_invariance(maps, seed):
    dmaps = [DepthMap(np.array(d, np.float32).reshape(4, 4), CAMS[c]) for c, d in maps]
    order = np.random.default_rng(seed).permutation(len(dmaps))
    base = TsdfVolume.around((-0.4, -0.4, 0.1), (0.4, 0.4, 0.9), 0.1)
    a = naive_fuse(dmaps, base, 0.25)
    b = naive_fuse([dmaps[i] for i in order], base, 0.25)
    assert np.array_equal(a.tsdf, b.tsdf)
    assert np.array_equal(a.weight, b.weight)
    assert np.all(np.abs(a.tsdf) <= 1)
    # weight never decreases as maps are added
    grow = base.copy()
    prev = grow.weight.copy()
    for m in dmaps:
        integrate(grow, m, 0.25)
        assert np.all(grow.weight >= prev)
        prev = grow.weight.copy()


def test_progressive_without_inner_equals_plain_integration():
    maps = [plane_map(tilted_camera(x, i)) for i, x in enumerate((-0.4, 0.0, 0.4))]
    res = progressive_fuse(maps, [], plane_volume(), TAU)
    plain = naive_fuse(maps, plane_volume(), TAU)
    assert np.array_equal(res.shared.tsdf, plain.tsdf)
    assert np.array_equal(res.layers["outer"].tsdf, plain.tsdf)
    assert set(res.layers) == {"outer"}


def test_progressive_empty_outer_warns(caplog):
    m = plane_map(axis_camera())
    with caplog.at_level(logging.WARNING, logger="tspe.fusion"):
        res = progressive_fuse([], [m], plane_volume(), TAU)
    assert "single stage" in caplog.text
    assert res.frozen == 0 and np.array_equal(res.shared.tsdf, naive_fuse([m], plane_volume(), TAU).tsdf)


def test_progressive_inner_skips_frozen_and_stage_one_space():
    outer = plane_map(axis_camera(), 1.9)
    inner = plane_map(axis_camera(), 2.1)
    res = progressive_fuse([outer], [inner], plane_volume(), TAU)
    stage1 = integrate(plane_volume(), outer, TAU)
    frozen = res.shared.frozen
    assert frozen.any()
    assert np.array_equal(res.shared.sdf_sum[frozen], stage1.sdf_sum[frozen])
    assert np.all(res.layers["inner"].weight[stage1.weight > 0] == 0)
    assert np.array_equal(res.layers["outer"].tsdf, stage1.tsdf)


# --- meshes ------------------------------------------------------------------------

def sphere_volume(r=0.5, s=0.025):
    n = int(np.ceil(2 * (r + 0.2) / s)) + 1
    origin = np.full(3, -(r + 0.2))
    axis = origin[0] + s * np.arange(n)
    x, y, z = np.meshgrid(axis, axis, axis, indexing="ij")
    return TsdfVolume.from_values(origin, s, (np.sqrt(x**2 + y**2 + z**2) - r) / (4 * s)), s


def test_mesh_of_analytic_sphere():
    vol, s = sphere_volume()
    mesh = extract_mesh(vol)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) <= s / 2)
    assert mesh.faces.max() < len(mesh.vertices) and not np.isnan(mesh.vertices).any()
    assert mesh.area() == pytest.approx(4 * np.pi * 0.25, rel=0.02)


def test_mesh_of_positive_volume_is_empty():
    vol = TsdfVolume.from_values(np.zeros(3), 0.1, np.ones((5, 5, 5)))
    assert len(extract_mesh(vol)) == 0
    assert len(extract_mesh(TsdfVolume.empty(np.zeros(3), 0.1, (4, 4, 4)))) == 0


def test_mesh_of_plane_sdf():
    s = 0.05
    z = np.arange(20) * s
    vol = TsdfVolume.from_values(np.zeros(3), s, np.broadcast_to((0.52 - z) / (4 * s), (12, 10, 20)))
    mesh = extract_mesh(vol)
    assert len(mesh) > 0
    assert np.all(np.abs(mesh.vertices[:, 2] - 0.52) <= s / 2)


def test_mesh_drops_unobserved_voxels():
    s = 0.05
    z = np.arange(20) * s
    values = np.broadcast_to((0.52 - z) / (4 * s), (12, 10, 20)).copy()
    weight = np.ones_like(values)
    weight[:, :, 12:] = 0  # unobserved beyond the band: V reads +1 there
    vol = TsdfVolume.from_values(np.zeros(3), s, values, weight)
    mesh = extract_mesh(vol)
    assert np.all(np.abs(mesh.vertices[:, 2] - 0.52) <= s / 2)


def test_mesh_export_roundtrip(tmp_path):
    vol, _ = sphere_volume(0.3, 0.05)
    mesh = extract_mesh(vol)
    mesh.write_ply(tmp_path / "m.ply")
    back = read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert np.array_equal(back.faces, mesh.faces)
    mesh.write_obj(tmp_path / "m.obj")
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(line.startswith("v ") for line in lines) == len(mesh.vertices)
    assert lines[-1] == "f " + " ".join(str(i + 1) for i in mesh.faces[-1])


def test_volume_dump(tmp_path):
    vol = integrate(plane_volume(), plane_map(axis_camera()), TAU)
    vol.write(tmp_path / "vol")
    raw = np.fromfile(tmp_path / "vol.f32", "<f4")
    n = int(np.prod(vol.dims))
    assert raw.size == 2 * n
    np.testing.assert_allclose(raw[:n].reshape(vol.dims, order="F"), vol.tsdf, atol=1e-6)
    meta = json.loads((tmp_path / "vol.json").read_text())
    assert meta["dims"] == list(vol.dims) and meta["voxel_size"] == S


def test_empty_mesh_container():
    assert len(TriangleMesh.empty()) == 0
