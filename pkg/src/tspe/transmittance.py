"""Front-to-back compositing and depth extraction at transmittance thresholds.

Depths are distances along the (unit) pixel ray.  A depth map value of 0.0
marks a pixel whose transmittance never drops below the requested threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DomainError, InvalidFragmentError
from .scene import Camera, FragmentBatch, FragmentList, SceneConfig, render_fragments

SENTINEL = 0.0
DEFAULT_THRESHOLDS = 64


@dataclass(frozen=True)
class TransmittanceProfile:
    depths: np.ndarray
    alphas: np.ndarray
    t_before: np.ndarray
    t_after: np.ndarray
    t_final: float
    color: np.ndarray
    opacity: float

    def __len__(self) -> int:
        return self.depths.size

    @property
    def weights(self) -> np.ndarray:
        """Per-fragment blending weight ``T_before - T_after``."""
        return self.t_before - self.t_after


def composite(fragments: FragmentList, tau: float = 0.0, background=(0.0, 0.0, 0.0)) -> TransmittanceProfile:
    """Composite fragments front to back.

    Fragments with opacity below ``tau`` are dropped first.  A fragment with
    opacity exactly 1 terminates the ray; anything behind it is ignored.
    """
    d = np.asarray(fragments.depths, dtype=np.float64)
    a = np.asarray(fragments.alphas, dtype=np.float64)
    c = np.asarray(fragments.colors, dtype=np.float64)
    if np.any(~(a > 0)) or np.any(a > 1):
        raise InvalidFragmentError("fragment opacity outside (0, 1]")
    if tau > 0:
        keep = a >= tau
        d, a, c = d[keep], a[keep], c[keep]
    opaque = np.flatnonzero(a >= 1.0)
    if opaque.size:
        end = opaque[0] + 1
        d, a, c = d[:end], a[:end], c[:end]
    t_after = np.cumprod(1.0 - a)
    t_before = np.concatenate([[1.0], t_after[:-1]])
    t_final = float(t_after[-1]) if t_after.size else 1.0
    weights = t_before - t_after
    color = weights @ c + t_final * np.asarray(background, dtype=np.float64)
    return TransmittanceProfile(d, a, t_before, t_after, t_final, color, 1.0 - t_final)


def _check_threshold(threshold: float) -> None:
    # T' = 1 is part of the uniform grid k/N and is handled like any other level
    if not (0.0 < threshold <= 1.0):
        raise DomainError(f"transmittance threshold {threshold} outside (0, 1]")


def depth_at_transmittance(profile: TransmittanceProfile, threshold: float) -> float | None:
    """Depth of the first fragment after which transmittance is below ``threshold``.

    Returns None when the ray never gets that dark (``T_final >= threshold``).
    """
    _check_threshold(threshold)
    idx = int(np.searchsorted(-profile.t_after, -threshold, side="right"))
    if idx >= len(profile):
        return None
    return float(profile.depths[idx])


def expected_depth(profile: TransmittanceProfile) -> float | None:
    """Blend-weighted depth; residual transmittance contributes zero depth."""
    if len(profile) == 0:
        return None
    return float(profile.weights @ profile.depths)


def median_depth(profile: TransmittanceProfile) -> float | None:
    return depth_at_transmittance(profile, 0.5)


def _span_starts(profile: TransmittanceProfile, start: float | None) -> np.ndarray:
    first = profile.depths[0] if start is None else float(start)
    if first > profile.depths[0]:
        raise DomainError("start lies behind the first fragment")
    return np.concatenate([[first], profile.depths[:-1]])


def continuous_transmittance(profile: TransmittanceProfile, depth: float, start: float | None = None) -> float:
    """Transmittance under exponential interpolation of opacity within each span.

    Fragment ``g`` attenuates uniformly in log-space over the span
    ``(d_{g-1}, d_g]``.  The first span begins at ``start`` (default: the first
    fragment itself, i.e. its opacity acts as a step).  Zero-length spans and
    fully opaque fragments act as steps at ``d_g``.
    """
    if depth < 0:
        raise DomainError("depth must be non-negative")
    if len(profile) == 0:
        return 1.0
    starts = _span_starts(profile, start)
    g = int(np.searchsorted(profile.depths, depth, side="left"))
    if g >= len(profile):
        return profile.t_final
    if depth == profile.depths[g]:
        return float(profile.t_after[g])
    lo, hi = starts[g], profile.depths[g]
    if depth <= lo:
        return float(profile.t_before[g])
    if profile.alphas[g] >= 1.0:
        return float(profile.t_before[g])
    frac = (depth - lo) / (hi - lo)
    return float(profile.t_before[g] * math.exp(math.log1p(-profile.alphas[g]) * frac))


def continuous_depth_at_transmittance(profile: TransmittanceProfile, threshold: float,
                                      start: float | None = None) -> float | None:
    """Depth where the continuous transmittance curve first falls to ``threshold``."""
    _check_threshold(threshold)
    idx = int(np.searchsorted(-profile.t_after, -threshold, side="right"))
    if idx >= len(profile):
        return None
    starts = _span_starts(profile, start)
    lo, hi = starts[idx], profile.depths[idx]
    a = profile.alphas[idx]
    if a >= 1.0 or hi == lo:
        return float(hi)
    frac = math.log(threshold / profile.t_before[idx]) / math.log1p(-a)
    return float(lo + min(max(frac, 0.0), 1.0) * (hi - lo))


# --- batched rendering -------------------------------------------------------------

def composite_batch(batch: FragmentBatch, tau: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(t_before, t_after)`` arrays of shape (P, K) for a fragment batch."""
    alphas = batch.alphas
    if tau > 0:
        alphas = np.where(alphas >= tau, alphas, 0.0)
    t_after = np.cumprod(1.0 - alphas, axis=1)
    t_before = np.concatenate([np.ones((t_after.shape[0], 1)), t_after[:, :-1]], axis=1)
    return t_before, t_after


def thresholds(n: int) -> np.ndarray:
    """Uniform transmittance levels ``k/n`` for ``k = 1..n``."""
    if n < 2:
        raise DomainError("need at least two thresholds")
    return np.arange(1, n + 1, dtype=np.float64) / n


def depths_at_thresholds(batch: FragmentBatch, levels: np.ndarray, tau: float = 0.0) -> np.ndarray:
    """Crossing depths for every ray and level in one sweep, shape (P, len(levels))."""
    levels = np.asarray(levels, dtype=np.float64)
    if np.any(levels <= 0) or np.any(levels > 1):
        raise DomainError("transmittance thresholds must lie in (0, 1]")
    _, t_after = composite_batch(batch, tau)
    # t_after is non-increasing, so entries >= level form a prefix
    idx = (t_after[:, :, None] >= levels[None, None, :]).sum(axis=1)
    valid = idx < batch.count[:, None]
    depth = np.take_along_axis(batch.depths, np.minimum(idx, batch.depths.shape[1] - 1), axis=1)
    return np.where(valid, depth, SENTINEL)


def expected_depths(batch: FragmentBatch, tau: float = 0.0) -> np.ndarray:
    t_before, t_after = composite_batch(batch, tau)
    w = t_before - t_after
    d = np.where(np.isfinite(batch.depths), batch.depths, 0.0)
    return np.where(batch.count > 0, (w * d).sum(axis=1), SENTINEL)


def final_transmittance(batch: FragmentBatch, tau: float = 0.0) -> np.ndarray:
    return composite_batch(batch, tau)[1][:, -1]


@dataclass
class DepthMap:
    depth: np.ndarray  # (H, W) float32, 0 = no crossing
    camera: Camera
    threshold: float | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        if self.depth.shape != self.camera.shape:
            raise DataError(f"depth map shape {self.depth.shape} does not match camera {self.camera.shape}")

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


@dataclass
class TStack:
    camera: Camera
    thresholds: np.ndarray  # (N,)
    depths: np.ndarray  # (N, H, W) float32

    @property
    def n(self) -> int:
        return self.thresholds.size

    def map(self, k: int) -> DepthMap:
        return DepthMap(self.depths[k], self.camera, float(self.thresholds[k]))


def render_tstack(source, camera: Camera, n: int = DEFAULT_THRESHOLDS, tau: float = 0.0) -> TStack:
    """Depth maps at ``T' = k/n`` for one view.

    ``source`` is either a scene (fragments are ray cast) or a precomputed
    :class:`FragmentBatch` for the camera's pixels.
    """
    levels = thresholds(n)
    batch = render_fragments(source, camera) if isinstance(source, SceneConfig) else source
    d = depths_at_thresholds(batch, levels, tau)
    stack = d.T.reshape(n, camera.height, camera.width).astype(np.float32)
    return TStack(camera, levels, stack)


# --- T-stack files -----------------------------------------------------------------

MANIFEST = "tstack.json"


def write_tstacks(directory, stacks: list[TStack]) -> Path:
    """Write a manifest plus one raw little-endian float32 file per view."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for stack in stacks:
        fname = f"view_{stack.camera.id:03d}.f32"
        np.ascontiguousarray(stack.depths, dtype="<f4").tofile(directory / fname)
        views.append({"camera_id": stack.camera.id, "camera": stack.camera.to_dict(),
                      "width": stack.camera.width, "height": stack.camera.height,
                      "N": stack.n, "thresholds": stack.thresholds.tolist(), "file": fname})
    path = directory / MANIFEST
    path.write_text(json.dumps({"format": "tspe-tstack/1", "views": views}, indent=1))
    return path


def read_tstacks(directory) -> list[TStack]:
    directory = Path(directory)
    path = directory / MANIFEST if directory.is_dir() else directory
    try:
        manifest = json.loads(path.read_text())
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read T-stack manifest {path}: {exc}") from None
    stacks = []
    for view in manifest.get("views", []):
        cam = Camera.from_dict(view["camera"])
        n, w, h = int(view["N"]), int(view["width"]), int(view["height"])
        raw = np.fromfile(path.parent / view["file"], dtype="<f4")
        if raw.size != n * w * h:
            raise DataError(f"{view['file']}: expected {n * w * h} floats, found {raw.size}")
        stacks.append(TStack(cam, np.asarray(view["thresholds"], dtype=np.float64),
                             raw.reshape(n, h, w).astype(np.float32)))
    if not stacks:
        raise DataError(f"{path} lists no views")
    return stacks
