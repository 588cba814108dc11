"""TSDF volumes, layered integration with voxel freezing, and mesh extraction."""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .errors import ConfigError, DataError, DomainError
from .transmittance import DepthMap

log = logging.getLogger(__name__)

# Observations are accumulated as integers so the running average does not
# depend on integration order: sdf in units of 2**-24, weights of 2**-8.
_SDF_SCALE = float(1 << 24)
_W_SCALE = 256.0

VOXELS_PER_DIAMETER = 128
TRUNCATION_VOXELS = 4.0
DEFAULT_FREEZE_WEIGHT = 1.0


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple[int, int, int]
    sdf_sum: np.ndarray = field(repr=False)
    weight_q: np.ndarray = field(repr=False)
    frozen: np.ndarray = field(repr=False)

    @classmethod
    def empty(cls, origin, voxel_size: float, dims) -> "TsdfVolume":
        if not voxel_size > 0:
            raise DomainError("voxel size must be positive")
        dims = tuple(int(d) for d in dims)
        if min(dims) < 2:
            raise DomainError("volume needs at least 2 voxels per axis")
        return cls(np.asarray(origin, dtype=np.float64), float(voxel_size), dims,
                   np.zeros(dims, np.int64), np.zeros(dims, np.int64), np.zeros(dims, bool))

    @classmethod
    def around(cls, lo, hi, voxel_size: float, pad: float = 0.0) -> "TsdfVolume":
        """Volume whose voxel centres cover ``[lo - pad, hi + pad]``."""
        lo = np.asarray(lo, dtype=np.float64) - pad
        hi = np.asarray(hi, dtype=np.float64) + pad
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return cls.empty(lo, voxel_size, dims)

    @classmethod
    def from_values(cls, origin, voxel_size: float, tsdf, weight=1.0) -> "TsdfVolume":
        """Volume holding the given normalised distances (clamped to [-1, 1])."""
        tsdf = np.clip(np.asarray(tsdf, dtype=np.float64), -1.0, 1.0)
        vol = cls.empty(origin, voxel_size, tsdf.shape)
        wq = np.rint(np.broadcast_to(np.asarray(weight, dtype=np.float64), tsdf.shape) * _W_SCALE).astype(np.int64)
        vol.weight_q[...] = wq
        vol.sdf_sum[...] = np.rint(tsdf * _SDF_SCALE).astype(np.int64) * wq
        return vol

    @property
    def weight(self) -> np.ndarray:
        return self.weight_q / _W_SCALE

    @property
    def tsdf(self) -> np.ndarray:
        """Normalised signed distance; unobserved voxels read as +1."""
        out = np.ones(self.dims)
        seen = self.weight_q > 0
        out[seen] = self.sdf_sum[seen] / (_SDF_SCALE * self.weight_q[seen])
        return out

    def centers(self, z: slice | None = None) -> np.ndarray:
        """World positions of voxel centres, shape (nx, ny, nz, 3)."""
        axes = [self.origin[i] + self.voxel_size * np.arange(n) for i, n in enumerate(self.dims)]
        if z is not None:
            axes[2] = axes[2][z]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def copy(self) -> "TsdfVolume":
        return copy.deepcopy(self)

    def write(self, path) -> None:
        """Raw little-endian float32 V then W (x fastest) plus a JSON sidecar."""
        path = Path(path)
        with open(path.with_suffix(".f32"), "wb") as fh:
            fh.write(self.tsdf.astype("<f4").tobytes(order="F"))
            fh.write(self.weight.astype("<f4").tobytes(order="F"))
        meta = {"origin": self.origin.tolist(), "voxel_size": self.voxel_size, "dims": list(self.dims),
                "layout": "V then W, float32 little-endian, x fastest"}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_volume(path) -> TsdfVolume:
    """Inverse of :meth:`TsdfVolume.write` (values come back at float32 precision)."""
    path = Path(path)
    try:
        meta = json.loads(path.with_suffix(".json").read_text())
        raw = np.fromfile(path.with_suffix(".f32"), dtype="<f4")
        dims = tuple(int(d) for d in meta["dims"])
    except (OSError, ValueError, KeyError) as err:
        raise DataError(f"cannot read volume {path}: {err}") from err
    n = int(np.prod(dims))
    if raw.size != 2 * n:
        raise DataError(f"volume {path} holds {raw.size} values, expected {2 * n}")
    tsdf = raw[:n].reshape(dims, order="F").astype(np.float64)
    weight = raw[n:].reshape(dims, order="F").astype(np.float64)
    return TsdfVolume.from_values(meta["origin"], float(meta["voxel_size"]), tsdf, weight)


def default_voxel_size(diameter: float) -> float:
    return diameter / VOXELS_PER_DIAMETER


def volume_for_bounds(lo, hi, voxel_size: float | None = None, truncation: float | None = None):
    """Volume over an AABB padded by the truncation band plus two voxels."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    s = voxel_size or default_voxel_size(float(np.max(hi - lo)))
    tau = truncation or TRUNCATION_VOXELS * s
    return TsdfVolume.around(lo, hi, s, pad=tau + 2 * s), tau


def integrate(volume: TsdfVolume, depth_map: DepthMap, truncation: float, camera=None,
              weight: float = 1.0, skip: np.ndarray | None = None, chunk: int = 16) -> TsdfVolume:
    """Fuse one depth map into ``volume`` in place.

    Voxels are looked up at the nearest pixel.  Those with a valid depth and
    signed distance above ``-truncation`` move toward ``clamp(sdf / truncation)``.
    Voxels in ``skip`` (default: the volume's frozen set) are left untouched.
    """
    cam = depth_map.camera
    if camera is not None and not camera.matches(cam):
        raise ConfigError("depth map was rendered from a different camera")
    if depth_map.depth.shape != (cam.height, cam.width):
        raise ConfigError(f"depth map shape {depth_map.depth.shape} does not match camera "
                          f"{cam.height}x{cam.width}")
    if truncation < 2 * volume.voxel_size:
        raise DomainError("truncation must be at least two voxel sizes")
    if not weight > 0:
        raise DomainError("observation weight must be positive")
    skip = volume.frozen if skip is None else skip
    wq = int(round(weight * _W_SCALE))
    depth = depth_map.depth
    nz = volume.dims[2]
    for start in range(0, nz, chunk):
        zs = slice(start, min(nz, start + chunk))
        pts = volume.centers(zs).reshape(-1, 3)
        u, v, z = cam.project(pts)
        px = np.floor(u).astype(np.int64)
        py = np.floor(v).astype(np.int64)
        ok = (z > 0) & (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height)
        idx = np.flatnonzero(ok)
        d = depth[py[idx], px[idx]].astype(np.float64)
        dist = np.linalg.norm(pts[idx] - cam.position, axis=1)
        sdf = d - dist
        keep = (d > 0) & (sdf > -truncation)
        idx, sdf = idx[keep], sdf[keep]
        obs = np.rint(np.clip(sdf / truncation, -1.0, 1.0) * _SDF_SCALE).astype(np.int64)
        block_sum = volume.sdf_sum[:, :, zs].reshape(-1)
        block_w = volume.weight_q[:, :, zs].reshape(-1)
        free = ~skip[:, :, zs].reshape(-1)[idx]
        idx, obs = idx[free], obs[free]
        block_sum[idx] += obs * wq
        block_w[idx] += wq
        volume.sdf_sum[:, :, zs] = block_sum.reshape(volume.dims[0], volume.dims[1], -1)
        volume.weight_q[:, :, zs] = block_w.reshape(volume.dims[0], volume.dims[1], -1)
    return volume


def freeze(volume: TsdfVolume, weight_threshold: float = DEFAULT_FREEZE_WEIGHT) -> int:
    """Flag observed voxels inside the truncation band; returns how many qualified."""
    if not weight_threshold > 0:
        raise DomainError("freeze weight threshold must be positive")
    hit = (volume.weight >= weight_threshold) & (np.abs(volume.tsdf) < 1.0)
    volume.frozen |= hit
    return int(hit.sum())


@dataclass
class FusionResult:
    shared: TsdfVolume
    layers: dict[str, TsdfVolume]
    frozen: int


def naive_fuse(maps, template: TsdfVolume, truncation: float) -> TsdfVolume:
    """All maps into one volume, no freezing."""
    vol = template.copy()
    for m in maps:
        integrate(vol, m, truncation)
    return vol


def progressive_fuse(outer, inner, template: TsdfVolume, truncation: float,
                     freeze_weight: float = DEFAULT_FREEZE_WEIGHT) -> FusionResult:
    """Two-stage fusion: outer maps, freeze, then inner maps around the frozen voxels.

    The shared volume follows the two stages directly.  The outer layer volume
    is the shared state after stage 1; the inner layer volume holds only the
    stage-2 contributions to voxels that stage 1 left unobserved.
    """
    outer, inner = list(outer), list(inner)
    shared = template.copy()
    if not outer:
        log.warning("no outer-layer maps; fusing inner maps in a single stage")
        for m in inner:
            integrate(shared, m, truncation)
        return FusionResult(shared, {"inner": shared.copy()} if inner else {}, 0)
    for m in outer:
        integrate(shared, m, truncation)
    layers = {"outer": shared.copy()}
    count = freeze(shared, freeze_weight)
    if inner:
        # the inner layer only claims space the outer stage never observed
        claimed = shared.weight_q > 0
        inner_vol = template.copy()
        for m in inner:
            integrate(shared, m, truncation)
            integrate(inner_vol, m, truncation, skip=claimed)
        layers["inner"] = inner_vol
    return FusionResult(shared, layers, count)


# --- meshes ------------------------------------------------------------------------

@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def write_obj(self, path) -> None:
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in self.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines) + "\n")

    def write_ply(self, path) -> None:
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(self.vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(self.faces)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        )
        face_rec = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        faces = np.zeros(len(self.faces), dtype=face_rec)
        faces["n"] = 3
        faces["idx"] = self.faces
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.vertices.astype("<f4").tobytes())
            fh.write(faces.tobytes())


def read_ply(path) -> TriangleMesh:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = int(next(line.split()[2] for line in header if line.startswith("element vertex")))
    nf = int(next(line.split()[2] for line in header if line.startswith("element face")))
    verts = np.frombuffer(data, "<f4", nv * 3, end).reshape(nv, 3).astype(np.float64)
    off = end + nv * 12
    faces = np.empty((nf, 3), np.int64)
    for i in range(nf):
        n, a, b, c = struct.unpack_from("<B3i", data, off + i * 13)
        faces[i] = (a, b, c)
    return TriangleMesh(verts, faces)


def extract_mesh(volume: TsdfVolume) -> TriangleMesh:
    """Zero isosurface of the TSDF, dropping faces that touch unobserved voxels."""
    v = volume.tsdf
    if v.min() >= 0 or v.max() <= 0:
        return TriangleMesh.empty()
    verts, faces, _, _ = marching_cubes(v, level=0.0, allow_degenerate=False)
    seen = volume.weight_q > 0
    lo = np.floor(verts).astype(np.int64)
    hi = np.minimum(np.ceil(verts).astype(np.int64), np.array(volume.dims) - 1)
    good = seen[lo[:, 0], lo[:, 1], lo[:, 2]] & seen[hi[:, 0], hi[:, 1], hi[:, 2]]
    faces = faces[good[faces].all(axis=1)]
    if faces.size == 0:
        return TriangleMesh.empty()
    used, faces = np.unique(faces, return_inverse=True)
    world = volume.origin + verts[used] * volume.voxel_size
    return TriangleMesh(world, faces.reshape(-1, 3).astype(np.int64))
