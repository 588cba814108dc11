"""Analytic scenes, pinhole cameras and ray-cast fragment generation.

A scene is a handful of analytic primitives (spheres, axis-aligned boxes and
square plane patches), each with a uniform surface opacity.  Casting a ray
through the scene yields one fragment per ray/surface intersection, which is
what a perfectly converged splat model would composite along that ray.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidCameraError, InvalidFragmentError, SceneError

KINDS = ("sphere", "box", "plane")
LAYERS = ("outer", "inner")
# Spurious primitives: rendered, but never part of the ground truth.
FLOATER = "floater"

_NEAR = 1e-9


@dataclass(frozen=True)
class Primitive:
    kind: str
    center: tuple[float, float, float]
    opacity: float
    layer: str = "outer"
    color: tuple[float, float, float] = (0.8, 0.8, 0.8)
    radius: float | None = None
    half_extents: tuple[float, float, float] | None = None
    # plane patches: unit normal and half side length of the square
    normal: tuple[float, float, float] | None = None
    extent: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SceneError(f"unknown primitive kind {self.kind!r}", "kind")
        if not (0.0 < self.opacity <= 1.0) or not math.isfinite(self.opacity):
            raise SceneError(f"opacity {self.opacity} outside (0, 1]", "opacity")
        if self.layer not in LAYERS + (FLOATER,):
            raise SceneError(f"unknown layer {self.layer!r}", "layer")
        if self.kind == "sphere":
            if self.radius is None or not self.radius > 0:
                raise SceneError("radius must be positive", "radius")
        elif self.kind == "box":
            if self.half_extents is None or min(self.half_extents) <= 0:
                raise SceneError("half_extents must be positive", "half_extents")
        else:
            if self.extent is None or not self.extent > 0:
                raise SceneError("extent must be positive", "extent")
            n = np.asarray(self.normal if self.normal is not None else (0, 0, 0), float)
            if not np.linalg.norm(n) > 0:
                raise SceneError("plane normal must be non-zero", "normal")
            object.__setattr__(self, "normal", tuple(float(v) for v in n / np.linalg.norm(n)))

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, float)
        if self.kind == "sphere":
            return c - self.radius, c + self.radius
        if self.kind == "box":
            h = np.asarray(self.half_extents, float)
            return c - h, c + h
        u, w = _plane_axes(np.asarray(self.normal))
        corners = np.array([c + su * self.extent * u + sw * self.extent * w
                            for su in (-1, 1) for sw in (-1, 1)])
        return corners.min(0), corners.max(0)

    def area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * math.pi * self.radius**2
        if self.kind == "box":
            hx, hy, hz = self.half_extents
            return 8.0 * (hx * hy + hy * hz + hx * hz)
        return 4.0 * self.extent**2


def _plane_axes(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors spanning the plane orthogonal to ``normal``."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(normal, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with an OpenCV-style frame (+x right, +y down, +z forward).

    ``rotation`` maps camera-frame directions to world directions and
    ``position`` is the camera centre in world units.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    position: np.ndarray
    id: int = 0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidCameraError("image size must be positive")
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise InvalidCameraError("rotation must be orthonormal with determinant +1")
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        rot.flags.writeable = False
        pos.flags.writeable = False
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "position", pos)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def matches(self, other: "Camera", atol: float = 1e-9) -> bool:
        """Same intrinsics, image size and pose (ids may differ)."""
        return (
            (self.width, self.height) == (other.width, other.height)
            and np.allclose([self.fx, self.fy, self.cx, self.cy], [other.fx, other.fy, other.cx, other.cy], atol=atol)
            and np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.position, other.position, atol=atol)
        )

    def ray_directions(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit world-space directions through continuous image coordinates."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        if not np.all(norm > 0) or not np.all(np.isfinite(norm)):
            raise InvalidCameraError("degenerate ray direction")
        return (d / norm) @ self.rotation.T

    def pixel_directions(self) -> np.ndarray:
        """Directions through every pixel centre, shape (H*W, 3), row-major."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return self.ray_directions(u.ravel() + 0.5, v.ravel() + 0.5)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return continuous image coordinates (u, v) and camera-frame z."""
        q = self.world_to_camera(points)
        z = q[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * q[..., 0] / z + self.cx
            v = self.fy * q[..., 1] / z + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {
            "id": self.id, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.position.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                   width=int(d["width"]), height=int(d["height"]),
                   rotation=np.asarray(d["rotation"], float),
                   position=np.asarray(d["translation"], float), id=int(d.get("id", 0)))


def look_at_rotation(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    position = np.asarray(position, float)
    forward = np.asarray(target, float) - position
    if not np.linalg.norm(forward) > 0:
        raise InvalidCameraError("camera position coincides with its target")
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, float)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def orbit_cameras(count: int, radius: float, elevation_deg: float | Sequence[float],
                  center=(0.0, 0.0, 0.0), *, width: int, height: int, fx: float, fy: float,
                  cx: float | None = None, cy: float | None = None) -> list[Camera]:
    """Ring of ``count`` cameras looking at ``center``.

    ``elevation_deg`` may be a list, in which case consecutive cameras cycle
    through the listed elevations.
    """
    if count < 1:
        raise SceneError("orbit count must be >= 1", "cameras.orbit.count")
    if not radius > 0:
        raise SceneError("orbit radius must be positive", "cameras.orbit.radius")
    elevations = [elevation_deg] if np.isscalar(elevation_deg) else list(elevation_deg)
    center = np.asarray(center, float)
    cams = []
    for i in range(count):
        az = 2.0 * math.pi * i / count
        el = math.radians(elevations[i % len(elevations)])
        pos = center + radius * np.array([math.cos(el) * math.cos(az),
                                          math.cos(el) * math.sin(az),
                                          math.sin(el)])
        cams.append(Camera(fx=fx, fy=fy, cx=width / 2 if cx is None else cx,
                           cy=height / 2 if cy is None else cy, width=width, height=height,
                           rotation=look_at_rotation(pos, center), position=pos, id=i))
    return cams


@dataclass(frozen=True)
class SceneConfig:
    primitives: tuple[Primitive, ...]
    cameras: tuple[Camera, ...]
    name: str = "scene"
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def layers(self) -> list[str]:
        present = {p.layer for p in self.primitives}
        return [name for name in LAYERS if name in present]

    def bounds(self, include_floaters: bool = False) -> tuple[np.ndarray, np.ndarray]:
        prims = [p for p in self.primitives if include_floaters or p.layer != FLOATER]
        if not prims:
            raise SceneError("scene has no primitives", "primitives")
        lo = np.min([p.bounds()[0] for p in prims], axis=0)
        hi = np.max([p.bounds()[1] for p in prims], axis=0)
        return lo, hi

    def diameter(self) -> float:
        lo, hi = self.bounds()
        return float(np.max(hi - lo))


@dataclass(frozen=True)
class FragmentList:
    """Fragments along one ray, sorted by strictly increasing depth."""

    depths: np.ndarray
    alphas: np.ndarray
    colors: np.ndarray = field(default=None)

    def __post_init__(self):
        d = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        a = np.asarray(self.alphas, dtype=np.float64).reshape(-1)
        c = (np.zeros((d.size, 3)) if self.colors is None
             else np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))
        if a.shape != d.shape or c.shape[0] != d.size:
            raise InvalidFragmentError("depth, opacity and colour lists differ in length")
        if d.size and (np.any(~np.isfinite(d)) or np.any(d <= 0) or np.any(np.diff(d) <= 0)):
            raise InvalidFragmentError("fragment depths must be positive and strictly increasing")
        if np.any(~(a > 0)) or np.any(a > 1):
            raise InvalidFragmentError("fragment opacity outside (0, 1]")
        object.__setattr__(self, "depths", d)
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "colors", c)

    def __len__(self) -> int:
        return self.depths.size

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "FragmentList":
        pairs = list(pairs)
        if not pairs:
            return cls(np.zeros(0), np.zeros(0))
        d, a = zip(*pairs)
        return cls(np.array(d), np.array(a))


@dataclass
class FragmentBatch:
    """Fragments for many rays, padded to a common length.

    Padding entries carry depth ``inf`` and opacity 0; ``count`` holds the
    number of real fragments per ray.
    """

    depths: np.ndarray  # (P, K)
    alphas: np.ndarray  # (P, K)
    colors: np.ndarray  # (P, K, 3)
    count: np.ndarray  # (P,)

    def __len__(self) -> int:
        return self.depths.shape[0]

    def row(self, i: int) -> FragmentList:
        n = int(self.count[i])
        return FragmentList(self.depths[i, :n], self.alphas[i, :n], self.colors[i, :n])

    @classmethod
    def from_lists(cls, lists: Sequence[FragmentList]) -> "FragmentBatch":
        k = max([len(f) for f in lists] + [1])
        p = len(lists)
        depths = np.full((p, k), np.inf)
        alphas = np.zeros((p, k))
        colors = np.zeros((p, k, 3))
        count = np.zeros(p, dtype=np.int64)
        for i, f in enumerate(lists):
            n = len(f)
            depths[i, :n], alphas[i, :n], colors[i, :n] = f.depths, f.alphas, f.colors
            count[i] = n
        return cls(depths, alphas, colors, count)


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> list[np.ndarray]:
    """Positive hit distances of rays with one primitive; NaN where absent."""
    c = np.asarray(prim.center, float)
    n_rays = dirs.shape[0]
    if prim.kind == "sphere":
        oc = origin - c
        b = dirs @ oc
        disc = b * b - (oc @ oc - prim.radius**2)
        hit = disc > 1e-14
        root = np.sqrt(np.where(hit, disc, 0.0))
        t1 = np.where(hit, -b - root, np.nan)
        t2 = np.where(hit, -b + root, np.nan)
        return [t1, t2]
    if prim.kind == "box":
        h = np.asarray(prim.half_extents, float)
        lo, hi = c - h, c + h
        tmin = np.full(n_rays, -np.inf)
        tmax = np.full(n_rays, np.inf)
        for axis in range(3):
            d = dirs[:, axis]
            o = origin[axis]
            flat = np.abs(d) < 1e-15
            with np.errstate(divide="ignore", invalid="ignore"):
                ta = (lo[axis] - o) / d
                tb = (hi[axis] - o) / d
            near = np.where(flat, -np.inf if lo[axis] <= o <= hi[axis] else np.inf, np.minimum(ta, tb))
            far = np.where(flat, np.inf if lo[axis] <= o <= hi[axis] else -np.inf, np.maximum(ta, tb))
            tmin = np.maximum(tmin, near)
            tmax = np.minimum(tmax, far)
        hit = tmax > tmin + 1e-12
        return [np.where(hit, tmin, np.nan), np.where(hit, tmax, np.nan)]
    normal = np.asarray(prim.normal, float)
    denom = dirs @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - origin) @ normal) / denom
    ok = np.abs(denom) > 1e-15
    pts = origin + np.where(ok, t, 0.0)[:, None] * dirs
    u, w = _plane_axes(normal)
    rel = pts - c
    inside = (np.abs(rel @ u) <= prim.extent) & (np.abs(rel @ w) <= prim.extent)
    return [np.where(ok & inside, t, np.nan)]


def cast_rays(scene: SceneConfig, origin: np.ndarray, dirs: np.ndarray) -> FragmentBatch:
    """Intersect a bundle of rays sharing one origin with every primitive."""
    origin = np.asarray(origin, dtype=np.float64)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    if np.any(~(np.linalg.norm(dirs, axis=1) > 0)):
        raise InvalidCameraError("degenerate ray direction")
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    cols_t, cols_a, cols_c = [], [], []
    for prim in scene.primitives:
        for t in _intersect(prim, origin, dirs):
            cols_t.append(np.where(t > _NEAR, t, np.inf))
            cols_a.append(prim.opacity)
            cols_c.append(prim.color)
    n_rays = dirs.shape[0]
    if not cols_t:
        return FragmentBatch(np.full((n_rays, 1), np.inf), np.zeros((n_rays, 1)),
                             np.zeros((n_rays, 1, 3)), np.zeros(n_rays, dtype=np.int64))
    t = np.stack(cols_t, axis=1)
    a = np.broadcast_to(np.asarray(cols_a, float), t.shape).copy()
    col = np.broadcast_to(np.asarray(cols_c, float), t.shape + (3,)).copy()
    order = np.argsort(t, axis=1, kind="stable")
    t = np.take_along_axis(t, order, axis=1)
    a = np.take_along_axis(a, order, axis=1)
    col = np.take_along_axis(col, order[..., None], axis=1)
    a[~np.isfinite(t)] = 0.0

    with np.errstate(invalid="ignore"):
        dup = np.isfinite(t[:, 1:]) & (t[:, 1:] - t[:, :-1] <= 1e-12 * np.maximum(1.0, t[:, 1:]))
    for i in np.flatnonzero(dup.any(axis=1)):
        t[i], a[i], col[i] = _merge_coincident(t[i], a[i], col[i])

    # nothing is visible behind the first fully opaque fragment
    opaque = a >= 1.0
    behind = np.cumsum(opaque, axis=1) - opaque > 0
    t[behind] = np.inf
    a[behind] = 0.0
    col[behind] = 0.0
    count = np.isfinite(t).sum(axis=1)
    k = max(int(count.max()), 1)
    return FragmentBatch(t[:, :k], a[:, :k], col[:, :k], count)


def _merge_coincident(t, a, col):
    """Fold fragments at numerically identical depths into one."""
    keep_t, keep_a, keep_c = [], [], []
    for ti, ai, ci in zip(t, a, col):
        if keep_t and np.isfinite(ti) and ti - keep_t[-1] <= 1e-12 * max(1.0, ti):
            prev = keep_a[-1]
            merged = 1.0 - (1.0 - prev) * (1.0 - ai)
            keep_c[-1] = (keep_c[-1] * prev + ci * ai * (1 - prev)) / merged
            keep_a[-1] = merged
            continue
        keep_t.append(ti)
        keep_a.append(ai)
        keep_c.append(ci)
    pad = len(t) - len(keep_t)
    return (np.array(keep_t + [np.inf] * pad), np.array(keep_a + [0.0] * pad),
            np.array(keep_c + [np.zeros(3)] * pad))


def cast_fragments(scene: SceneConfig, camera: Camera, pixel) -> FragmentList:
    """Fragments along the ray through one pixel.

    Integer coordinates ``(x, y)`` address the pixel centre; float coordinates
    are taken as continuous image positions.
    """
    x, y = pixel
    if isinstance(x, (int, np.integer)) and isinstance(y, (int, np.integer)):
        if not (0 <= x < camera.width and 0 <= y < camera.height):
            raise InvalidCameraError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
        u, v = x + 0.5, y + 0.5
    else:
        u, v = float(x), float(y)
        if not (0 <= u <= camera.width and 0 <= v <= camera.height):
            raise InvalidCameraError(f"image point {pixel} outside the image")
    d = camera.ray_directions(np.array([u]), np.array([v]))
    return cast_rays(scene, camera.position, d).row(0)


def render_fragments(scene: SceneConfig, camera: Camera) -> FragmentBatch:
    """Fragments for every pixel of ``camera``, row-major."""
    return cast_rays(scene, camera.position, camera.pixel_directions())


def _sample_primitive(prim: Primitive, n: int, rng: np.random.Generator) -> np.ndarray:
    c = np.asarray(prim.center, float)
    if n == 0:
        return np.zeros((0, 3))
    if prim.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return c + prim.radius * v
    if prim.kind == "box":
        h = np.asarray(prim.half_extents, float)
        face_area = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        probs = np.repeat(face_area, 2) / (2 * face_area.sum())
        face = rng.choice(6, size=n, p=probs)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts[np.arange(n), axis] = sign * h[axis]
        return c + pts
    u, w = _plane_axes(np.asarray(prim.normal))
    st = rng.uniform(-prim.extent, prim.extent, size=(n, 2))
    return c + st[:, :1] * u + st[:, 1:] * w


def ground_truth_layers(scene: SceneConfig, samples_per_layer: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Uniform surface samples of every labelled layer, keyed by layer name."""
    if samples_per_layer < 1:
        raise ValueError("samples_per_layer must be >= 1")
    rng = np.random.default_rng(seed)
    clouds = {}
    for layer in scene.layers():
        prims = [p for p in scene.primitives if p.layer == layer]
        areas = np.array([p.area() for p in prims])
        counts = rng.multinomial(samples_per_layer, areas / areas.sum())
        clouds[layer] = np.concatenate([_sample_primitive(p, int(k), rng) for p, k in zip(prims, counts)])
    return clouds


# --- scene files ---------------------------------------------------------------

def _vec3(value, field_name: str) -> tuple[float, float, float]:
    try:
        arr = np.asarray(value, dtype=np.float64).reshape(3)
    except (TypeError, ValueError):
        raise SceneError("expected three numbers", field_name) from None
    if not np.all(np.isfinite(arr)):
        raise SceneError("non-finite value", field_name)
    return tuple(float(x) for x in arr)


def _number(value, field_name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SceneError("expected a number", field_name)
    return float(value)


def _parse_primitive(d: dict, where: str) -> Primitive:
    if not isinstance(d, dict):
        raise SceneError("expected an object", where)
    kind = d.get("kind")
    if kind not in KINDS:
        raise SceneError(f"kind must be one of {KINDS}", f"{where}.kind")
    if "center" not in d:
        raise SceneError("missing", f"{where}.center")
    if "opacity" not in d:
        raise SceneError("missing", f"{where}.opacity")
    opacity = _number(d["opacity"], f"{where}.opacity")
    if not 0.0 < opacity <= 1.0:
        raise SceneError(f"opacity {opacity} outside (0, 1]", f"{where}.opacity")
    kwargs = dict(kind=kind, center=_vec3(d["center"], f"{where}.center"), opacity=opacity,
                  layer=d.get("layer", "outer"),
                  color=_vec3(d.get("color", (0.8, 0.8, 0.8)), f"{where}.color"))
    try:
        if kind == "sphere":
            kwargs["radius"] = _number(d.get("radius"), f"{where}.radius")
        elif kind == "box":
            kwargs["half_extents"] = _vec3(d.get("half_extents"), f"{where}.half_extents")
        else:
            kwargs["normal"] = _vec3(d.get("normal"), f"{where}.normal")
            kwargs["extent"] = _number(d.get("extent", 1.0), f"{where}.extent")
        return Primitive(**kwargs)
    except SceneError as exc:
        if exc.field and exc.field.startswith(where):
            raise
        raise SceneError(str(exc).split(": ", 1)[-1], f"{where}.{exc.field}") from None


def _floaters(spec: dict, center: np.ndarray) -> list[Primitive]:
    """Small semi-transparent spheres scattered in a shell around the scene."""
    rng = np.random.default_rng(int(spec.get("seed", 0)))
    count = int(spec.get("count", 0))
    r_in, r_out = spec.get("shell", (1.2, 1.6))
    out = []
    for _ in range(count):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        dist = rng.uniform(r_in, r_out)
        out.append(Primitive(kind="sphere", center=tuple(center + dist * direction),
                             radius=float(spec.get("radius", 0.1)),
                             opacity=float(spec.get("opacity", 0.1)), layer=FLOATER,
                             color=(1.0, 1.0, 1.0)))
    return out


def scene_from_dict(data: dict, name: str = "scene") -> SceneConfig:
    if not isinstance(data, dict):
        raise SceneError("scene must be a JSON object")
    if "primitives" not in data or not isinstance(data["primitives"], list):
        raise SceneError("missing primitives array", "primitives")
    prims = [_parse_primitive(p, f"primitives[{i}]") for i, p in enumerate(data["primitives"])]
    if not prims:
        raise SceneError("at least one primitive required", "primitives")
    scene_lo = np.min([p.bounds()[0] for p in prims], axis=0)
    scene_hi = np.max([p.bounds()[1] for p in prims], axis=0)
    center = 0.5 * (scene_lo + scene_hi)
    if "floaters" in data:
        prims += _floaters(data["floaters"], center)

    if "image" not in data or not isinstance(data["image"], dict):
        raise SceneError("missing image block", "image")
    img = data["image"]
    try:
        width, height = int(img["width"]), int(img["height"])
        fx, fy = float(img["fx"]), float(img["fy"])
    except (KeyError, TypeError, ValueError):
        raise SceneError("image needs width, height, fx, fy", "image") from None
    cx = float(img.get("cx", width / 2))
    cy = float(img.get("cy", height / 2))

    if "cameras" not in data:
        raise SceneError("missing cameras", "cameras")
    cams_spec = data["cameras"]
    try:
        if isinstance(cams_spec, dict) and "orbit" in cams_spec:
            orbit = cams_spec["orbit"]
            cams = orbit_cameras(int(orbit["count"]), float(orbit["radius"]),
                                 orbit.get("elevation_deg", 0.0),
                                 orbit.get("center", center), width=width, height=height,
                                 fx=fx, fy=fy, cx=cx, cy=cy)
        elif isinstance(cams_spec, list) and cams_spec:
            cams = []
            for i, c in enumerate(cams_spec):
                if "rotation" in c:
                    rot = np.asarray(c["rotation"], float)
                    pos = _vec3(c["translation"], f"cameras[{i}].translation")
                else:
                    pos = _vec3(c["position"], f"cameras[{i}].position")
                    rot = look_at_rotation(pos, c.get("look_at", center), c.get("up", (0, 0, 1)))
                cams.append(Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                                   rotation=rot, position=np.asarray(pos), id=i))
        else:
            raise SceneError("expected a non-empty list or an orbit block", "cameras")
    except InvalidCameraError as exc:
        raise SceneError(str(exc), "cameras") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneError(f"malformed camera entry ({exc})", "cameras") from None
    background = _vec3(data.get("background", (0.0, 0.0, 0.0)), "background")
    return SceneConfig(tuple(prims), tuple(cams), name=data.get("name", name), background=background)


def load_scene(path) -> SceneConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise SceneError(f"scene file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise SceneError(f"invalid JSON: {exc}") from None
    return scene_from_dict(data, name=path.stem)


def bundled_scene_path(name: str) -> Path:
    """Path of a scene file shipped with the package (``two_layer``, ...)."""
    path = Path(__file__).parent / "data" / f"{name}.json"
    if not path.exists():
        raise SceneError(f"no bundled scene named {name!r}")
    return path
