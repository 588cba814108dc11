"""Depth probability densities, per-view aggregation and peak detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import find_peaks, peak_prominences

from .errors import DomainError, InsufficientDataError
from .transmittance import SENTINEL, TransmittanceProfile, TStack

log = logging.getLogger(__name__)

GRID_SIZE = 512
DEFAULT_PEAK_THRESHOLD = 0.15


@dataclass(frozen=True)
class DensityEstimate:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float | None

    @property
    def spacing(self) -> float:
        return float(self.grid[1] - self.grid[0])

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))

    def cdf(self) -> np.ndarray:
        """Cumulative trapezoid integral, i.e. ``1 - T_d`` on the grid."""
        steps = 0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.grid)
        c = np.concatenate([[0.0], np.cumsum(steps)])
        return np.clip(c / c[-1], 0.0, 1.0) if c[-1] > 0 else c

    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.density, self.grid) / self.integral())

    def median(self) -> float:
        return float(np.interp(0.5, self.cdf(), self.grid))


def silverman_bandwidth(x: np.ndarray) -> float:
    std = float(np.std(x, ddof=1))
    q75, q25 = np.percentile(x, [75, 25])
    iqr = (q75 - q25) / 1.34
    spread = min(std, iqr) if iqr > 0 else std
    return 0.9 * spread * x.size ** (-0.2)


def _gaussian_mixture(grid: np.ndarray, centers: np.ndarray, masses: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros_like(grid)
    norm = 1.0 / (h * np.sqrt(2.0 * np.pi))
    for start in range(0, centers.size, 4096):
        c = centers[start:start + 4096]
        z = (grid[:, None] - c[None, :]) / h
        out += np.exp(-0.5 * z * z) @ masses[start:start + 4096]
    return out * norm


def kde(samples, bandwidth: float | None = None, grid_size: int = GRID_SIZE,
        weights=None) -> DensityEstimate:
    """Gaussian KDE on a uniform grid spanning ``[min - 3h, max + 3h]``.

    Sentinel zeros and non-finite values are dropped.  The bandwidth follows
    Silverman's rule unless given.  Identical samples fall back to a bandwidth
    of one grid step.  The result is renormalised to unit trapezoid mass.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    keep = np.isfinite(x) & (x != SENTINEL)
    x, w = x[keep], w[keep]
    if x.size < 2:
        raise InsufficientDataError(f"KDE needs at least 2 samples, got {x.size}")
    if np.ptp(x) == 0:
        half = max(abs(x[0]) * 1e-3, 1e-6)
        grid = np.linspace(x[0] - half, x[0] + half, grid_size)
        h = float(grid[1] - grid[0]) if bandwidth is None else float(bandwidth)
    else:
        h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
        if not h > 0:
            raise DomainError("bandwidth must be positive")
        grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_size)
    dens = _gaussian_mixture(grid, x, w / w.sum(), h)
    dens /= np.trapezoid(dens, grid)
    return DensityEstimate(grid, dens, h)


def pdf_from_profile(profile: TransmittanceProfile, grid_size: int = GRID_SIZE, *,
                     bandwidth: float | None = None, start: float | None = None,
                     grid: np.ndarray | None = None) -> DensityEstimate:
    """Density ``-dT/dd`` of the exponentially interpolated transmittance curve.

    Each fragment's blending weight is spread over the span since the previous
    fragment (the first span starts at ``start``, default the first fragment).
    Opaque fragments and zero-length spans become point masses.  With
    ``bandwidth`` the density is convolved with the same Gaussian kernel a KDE
    would use, so the two can be compared directly.  The density is normalised
    by the absorbed fraction ``1 - T_final``.
    """
    if len(profile) == 0 or profile.t_final >= 1.0:
        raise InsufficientDataError("profile absorbs no light")
    d = profile.depths
    lo = np.concatenate([[d[0] if start is None else float(start)], d[:-1]])
    if grid is None:
        span = max(d[-1] - lo[0], 1e-6)
        pad = 3 * bandwidth if bandwidth else 0.05 * span
        grid = np.linspace(lo[0] - pad, d[-1] + pad, grid_size)
    grid = np.asarray(grid, dtype=np.float64)
    absorbed = 1.0 - profile.t_final
    point = (profile.alphas >= 1.0) | (d - lo <= 0)

    if bandwidth is None:
        dens = np.zeros_like(grid)
        step = grid[1] - grid[0]
        for g in np.flatnonzero(point):
            dens[np.argmin(np.abs(grid - d[g]))] += profile.weights[g] / step
        for g in np.flatnonzero(~point):
            rate = np.log1p(-profile.alphas[g]) / (d[g] - lo[g])
            inside = (grid > lo[g]) & (grid <= d[g])
            dens[inside] += -rate * profile.t_before[g] * np.exp(rate * (grid[inside] - lo[g]))
        return DensityEstimate(grid, dens / absorbed, None)

    centers = [d[point]]
    masses = [profile.weights[point]]
    nodes, qw = np.polynomial.legendre.leggauss(8)
    for g in np.flatnonzero(~point):
        width = d[g] - lo[g]
        rate = np.log1p(-profile.alphas[g]) / width
        pieces = max(1, int(np.ceil(4 * width / bandwidth)))
        edges = np.linspace(lo[g], d[g], pieces + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        xs = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        ws = (half[:, None] * qw[None, :]).ravel()
        centers.append(xs)
        masses.append(ws * -rate * profile.t_before[g] * np.exp(rate * (xs - lo[g])))
    dens = _gaussian_mixture(grid, np.concatenate(centers), np.concatenate(masses), bandwidth)
    return DensityEstimate(grid, dens / absorbed, bandwidth)


def l1_distance(a: DensityEstimate, b: DensityEstimate) -> float:
    """Trapezoid L1 distance, evaluating ``b`` on ``a``'s grid."""
    other = np.interp(a.grid, b.grid, b.density, left=0.0, right=0.0)
    return float(np.trapezoid(np.abs(a.density - other), a.grid))


# --- per-view aggregation --------------------------------------------------------

@dataclass
class AggregatedSequence:
    thresholds: np.ndarray
    means: np.ndarray  # NaN where no pixel was valid
    counts: np.ndarray
    camera_id: int = 0

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    def values(self) -> np.ndarray:
        return self.means[self.present]


def residual_mask(tstack: TStack, level: float) -> np.ndarray:
    """Pixels whose final transmittance is below ``level``.

    A pixel has a crossing at ``T'_k`` exactly when its residual transmittance
    is below ``T'_k``, so the mask reads off the map at the smallest threshold
    not below ``level``.
    """
    k = int(np.searchsorted(tstack.thresholds, level - 1e-12))
    k = min(k, tstack.n - 1)
    return tstack.depths[k] > 0


def default_mask(tstack: TStack) -> np.ndarray:
    """Pixels that cross every threshold; falls back to ``T_final < 0.5``."""
    full = tstack.depths[0] > 0
    if full.any():
        return full
    return residual_mask(tstack, 0.5)


def aggregate_mean_depths(tstack: TStack, mask=None) -> AggregatedSequence:
    """Mean depth over valid pixels at each threshold.

    ``mask`` may be None (see :func:`default_mask`), a residual-transmittance
    level, or a boolean image.
    """
    if tstack.n < 2:
        raise DomainError("need at least two thresholds")
    if mask is None:
        mask = default_mask(tstack)
    elif np.isscalar(mask):
        mask = residual_mask(tstack, float(mask))
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tstack.depths.shape[1:]:
        raise DomainError(f"mask shape {mask.shape} does not match image {tstack.depths.shape[1:]}")
    means = np.full(tstack.n, np.nan)
    counts = np.zeros(tstack.n, dtype=np.int64)
    for k in range(tstack.n):
        vals = tstack.depths[k][mask].astype(np.float64)
        vals = vals[vals > 0]
        counts[k] = vals.size
        if vals.size:
            # shifting by one sample keeps a constant map exact
            means[k] = vals[0] + np.mean(vals - vals[0])
    if not counts.any():
        raise InsufficientDataError(f"view {tstack.camera.id}: no valid pixels at any threshold")
    seq = AggregatedSequence(tstack.thresholds.copy(), means, counts, tstack.camera.id)
    m = seq.values()
    if np.any(np.diff(m) > 1e-6 * max(1.0, float(np.abs(m).max()))):
        log.info("view %d: mean depth increases with T' (validity mask changes across thresholds)",
                 tstack.camera.id)
    return seq


def aggregated_density(seq: AggregatedSequence, bandwidth: float | None = None,
                       grid_size: int = GRID_SIZE) -> DensityEstimate:
    """KDE over the per-threshold mean depths, uniform weights."""
    return kde(seq.values(), bandwidth=bandwidth, grid_size=grid_size)


# --- peaks -------------------------------------------------------------------------

@dataclass(frozen=True)
class Peak:
    depth: float
    score: float
    threshold: float | None = None
    index: int | None = None  # position of the matched threshold in the stack
    rank: int | None = None  # 1 = outermost layer


@dataclass
class PeakSet:
    peaks: list[Peak]
    conflicts: list[Peak] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.peaks)

    def __iter__(self):
        return iter(self.peaks)

    @property
    def depths(self) -> np.ndarray:
        return np.array([p.depth for p in self.peaks])


def _refine(density: np.ndarray, grid: np.ndarray, i: int) -> float:
    y0, y1, y2 = density[i - 1], density[i], density[i + 1]
    denom = y0 - 2 * y1 + y2
    offset = 0.5 * (y0 - y2) / denom if denom < 0 else 0.0
    return float(grid[i] + np.clip(offset, -0.5, 0.5) * (grid[1] - grid[0]))


def detect_peaks(density: DensityEstimate, threshold: float = DEFAULT_PEAK_THRESHOLD) -> PeakSet:
    """Local maxima whose prominence relative to the global maximum is at least ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise DomainError("peak score threshold must lie in (0, 1)")
    y = density.density
    top = float(y.max())
    if not top > 0:
        return PeakSet([])
    idx, props = find_peaks(y, plateau_size=1)
    if idx.size == 0:
        return PeakSet([])
    prom = peak_prominences(y, idx)[0]
    peaks = []
    for i, p, left, right in zip(idx, prom, props["left_edges"], props["right_edges"]):
        score = float(p / top)
        if score < threshold:
            continue
        if right > left:
            depth = 0.5 * float(density.grid[left] + density.grid[right])
        else:
            depth = _refine(y, density.grid, int(i))
        peaks.append(Peak(depth, score))
    return PeakSet(sorted(peaks, key=lambda p: p.depth))


def peaks_to_thresholds(peaks: PeakSet, seq: AggregatedSequence) -> PeakSet:
    """Attach to each peak the threshold whose mean depth is nearest.

    Ties go to the larger threshold.  Peaks that land on an already claimed
    threshold keep only the higher score; the losers are listed in
    ``conflicts``.  The result is ordered outermost first (descending T').
    """
    present = np.flatnonzero(seq.present)
    if present.size == 0:
        raise InsufficientDataError("aggregated sequence is empty")
    means = seq.means[present]
    chosen: dict[int, Peak] = {}
    conflicts = []
    for peak in peaks:
        dist = np.abs(means - peak.depth)
        tol = 1e-9 * max(1.0, abs(peak.depth))
        candidates = present[dist <= dist.min() + tol]
        k = int(candidates.max())
        matched = replace(peak, threshold=float(seq.thresholds[k]), index=k)
        if k in chosen:
            keep, drop = sorted([chosen[k], matched], key=lambda p: -p.score)
            log.warning("peaks at %.4f and %.4f both map to T'=%.4f; keeping %.4f",
                        keep.depth, drop.depth, keep.threshold, keep.depth)
            chosen[k] = keep
            conflicts.append(drop)
        else:
            chosen[k] = matched
    ordered = sorted(chosen.values(), key=lambda p: -p.threshold)
    return PeakSet([replace(p, rank=r) for r, p in enumerate(ordered, start=1)], conflicts)


def analyze_view(tstack: TStack, threshold: float = DEFAULT_PEAK_THRESHOLD, bandwidth: float | None = None,
                 mask=None, grid_size: int = GRID_SIZE):
    """Aggregate, estimate the density and locate layer thresholds for one view."""
    seq = aggregate_mean_depths(tstack, mask)
    values = seq.values()
    if values.size < 2:
        # a single usable threshold still defines one layer
        k = int(np.flatnonzero(seq.present)[0])
        peak = Peak(float(values[0]), 1.0, float(seq.thresholds[k]), k, 1)
        return seq, None, PeakSet([peak])
    dens = aggregated_density(seq, bandwidth, grid_size)
    return seq, dens, peaks_to_thresholds(detect_peaks(dens, threshold), seq)
