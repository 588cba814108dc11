"""End-to-end reconstruction: render, analyse, build layer maps, fuse, score."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .depthdist import DEFAULT_PEAK_THRESHOLD, GRID_SIZE, AggregatedSequence, DensityEstimate, PeakSet, analyze_view
from .dip import DipResult, dip_test
from .errors import ConfigError, TspeError
from .evaluation import MetricReport, chamfer, precision, sample_mesh
from .fusion import (
    DEFAULT_FREEZE_WEIGHT,
    FusionResult,
    TriangleMesh,
    TsdfVolume,
    extract_mesh,
    naive_fuse,
    progressive_fuse,
    volume_for_bounds,
)
from .scene import Camera, FragmentBatch, SceneConfig, ground_truth_layers, render_fragments
from .transmittance import (
    DEFAULT_THRESHOLDS,
    DepthMap,
    TStack,
    depths_at_thresholds,
    expected_depths,
    final_transmittance,
    thresholds,
)

log = logging.getLogger(__name__)

OUTER, INNER = "outer", "inner"


@dataclass(frozen=True)
class PipelineParams:
    n_thresholds: int = DEFAULT_THRESHOLDS
    theta: float = DEFAULT_PEAK_THRESHOLD
    bandwidth: float | None = None
    grid_size: int = GRID_SIZE
    opacity_cutoff: float = 0.0
    mask_level: float | None = None
    voxel_size: float | None = None
    truncation: float | None = None
    freeze_weight: float = DEFAULT_FREEZE_WEIGHT
    gt_samples: int = 100_000
    mesh_samples: int = 50_000
    precision_voxels: float = 2.0
    bootstrap: int = 500
    dip_pixels: int = 100
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        checks = [
            (self.n_thresholds >= 2, "n_thresholds must be at least 2"),
            (0.0 < self.theta < 1.0, "theta must lie in (0, 1)"),
            (self.bandwidth is None or self.bandwidth > 0, "bandwidth must be positive"),
            (self.grid_size >= 16, "grid_size must be at least 16"),
            (0.0 <= self.opacity_cutoff < 1.0, "opacity_cutoff must lie in [0, 1)"),
            (self.mask_level is None or 0.0 < self.mask_level <= 1.0, "mask_level must lie in (0, 1]"),
            (self.voxel_size is None or self.voxel_size > 0, "voxel_size must be positive"),
            (self.truncation is None or self.truncation > 0, "truncation must be positive"),
            (self.freeze_weight > 0, "freeze_weight must be positive"),
            (self.gt_samples > 0 and self.mesh_samples > 0, "sample counts must be positive"),
            (self.precision_voxels > 0, "precision_voxels must be positive"),
            (self.bootstrap >= 100, "bootstrap must be at least 100"),
            (self.dip_pixels > 0, "dip_pixels must be positive"),
            (self.workers >= 0, "workers must be non-negative"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def seeds(self, count: int) -> list[int]:
        """Child seeds for independent random stages, all derived from ``seed``."""
        return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(self.seed).spawn(count)]


@contextmanager
def stage(name: str, timings: dict | None = None):
    start = time.perf_counter()
    yield
    elapsed = time.perf_counter() - start
    log.info("stage %s: %.2fs", name, elapsed)
    if timings is not None:
        timings[name] = timings.get(name, 0.0) + elapsed


@dataclass
class View:
    camera: Camera
    fragments: FragmentBatch
    stack: TStack


@dataclass
class ViewAnalysis:
    camera: Camera
    sequence: AggregatedSequence
    density: DensityEstimate | None
    peaks: PeakSet


def render_view(scene: SceneConfig, cam: Camera, params: PipelineParams) -> View:
    levels = thresholds(params.n_thresholds)
    batch = render_fragments(scene, cam)
    depths = depths_at_thresholds(batch, levels, params.opacity_cutoff)
    return View(cam, batch, TStack(cam, levels, depths.T.reshape(len(levels), cam.height, cam.width).astype(np.float32)))


def render_views(scene: SceneConfig, params: PipelineParams) -> list[View]:
    """Views are independent; ``workers`` threads render them, results keep camera order."""
    if params.workers == 1 or len(scene.cameras) < 2:
        return [render_view(scene, cam, params) for cam in scene.cameras]
    with ThreadPoolExecutor(max_workers=params.workers or None) as pool:
        return list(pool.map(lambda cam: render_view(scene, cam, params), scene.cameras))


def analyze(stacks: list[TStack], params: PipelineParams, masks=None) -> list[ViewAnalysis]:
    """Per-view layer detection; ``masks`` optionally gives one boolean image per view."""
    out = []
    for i, st in enumerate(stacks):
        mask = params.mask_level if masks is None else masks[i]
        seq, dens, peaks = analyze_view(st, params.theta, params.bandwidth, mask, params.grid_size)
        if len(peaks) == 0:
            log.warning("view %d: no peak above theta=%.3g", st.camera.id, params.theta)
        out.append(ViewAnalysis(st.camera, seq, dens, peaks))
    return out


def layer_maps(stacks: list[TStack], analyses: list[ViewAnalysis]) -> dict[str, list[DepthMap]]:
    """Depth map at each peak's threshold; rank 1 is the outer layer, deeper ranks are inner."""
    maps: dict[str, list[DepthMap]] = {OUTER: [], INNER: []}
    for st, an in zip(stacks, analyses):
        for peak in an.peaks:
            maps[OUTER if peak.rank == 1 else INNER].append(st.map(peak.index))
    return maps


def single_depth_maps(views: list[View], kind: str, params: PipelineParams) -> list[DepthMap]:
    """Median or normalised expected depth per pixel; pixels with T_final >= 0.5 are left empty."""
    maps = []
    for v in views:
        cam = v.camera
        t_final = final_transmittance(v.fragments, params.opacity_cutoff)
        if kind == "median":
            d = depths_at_thresholds(v.fragments, np.array([0.5]), params.opacity_cutoff)[:, 0]
        elif kind == "expected":
            absorbed = 1.0 - t_final
            with np.errstate(invalid="ignore", divide="ignore"):
                d = np.where(absorbed > 0, expected_depths(v.fragments, params.opacity_cutoff) / absorbed, 0.0)
        else:
            raise ConfigError(f"unknown single-depth strategy {kind!r}")
        d = np.where(t_final < 0.5, d, 0.0)
        maps.append(DepthMap(d.reshape(cam.height, cam.width).astype(np.float32), cam))
    return maps


def back_project(maps: list[DepthMap]) -> np.ndarray:
    pts = []
    for m in maps:
        cam = m.camera
        dirs = cam.pixel_directions().reshape(cam.height, cam.width, 3)
        ok = m.valid
        pts.append(cam.position + dirs[ok] * m.depth[ok].astype(np.float64)[:, None])
    return np.concatenate(pts) if pts else np.zeros((0, 3))


@dataclass
class Reconstruction:
    params: PipelineParams
    analyses: list[ViewAnalysis]
    maps: dict[str, list[DepthMap]]
    fusion: FusionResult
    meshes: dict[str, TriangleMesh]
    template: TsdfVolume
    truncation: float
    timings: dict = field(default_factory=dict)


def fusion_volume(scene: SceneConfig, params: PipelineParams) -> tuple[TsdfVolume, float]:
    lo, hi = scene.bounds()
    return volume_for_bounds(lo, hi, params.voxel_size, params.truncation)


def reconstruct(scene: SceneConfig, params: PipelineParams = PipelineParams(),
                views: list[View] | None = None) -> Reconstruction:
    timings: dict = {}
    if views is None:
        with stage("render", timings):
            views = render_views(scene, params)
    recon = reconstruct_from_stacks([v.stack for v in views], scene, params)
    recon.timings = {**timings, **recon.timings}
    return recon


def reconstruct_from_stacks(stacks: list[TStack], scene: SceneConfig, params: PipelineParams,
                            analyses: list[ViewAnalysis] | None = None) -> Reconstruction:
    timings: dict = {}
    if analyses is None:
        with stage("analyze", timings):
            analyses = analyze(stacks, params)
    maps = layer_maps(stacks, analyses)
    template, tau = fusion_volume(scene, params)
    with stage("fuse", timings):
        result = progressive_fuse(maps[OUTER], maps[INNER], template, tau, params.freeze_weight)
    with stage("mesh", timings):
        meshes = {name: extract_mesh(vol) for name, vol in result.layers.items()}
    return Reconstruction(params, analyses, maps, result, meshes, template, tau, timings)


def _layer_chamfer(mesh: TriangleMesh, truth: np.ndarray, n: int, seed: int) -> tuple[float, int]:
    if len(mesh) == 0:
        return float("inf"), 0
    pts = sample_mesh(mesh, n, seed)
    return chamfer(pts, truth), len(pts)


def score_layers(meshes: dict[str, TriangleMesh], truth: dict[str, np.ndarray], strategy: str,
                 params: PipelineParams) -> list[MetricReport]:
    """Chamfer of each layer's own mesh against that layer's ground truth."""
    seed = params.seeds(2)[1]
    reports = []
    for name, gt in truth.items():
        value, n = _layer_chamfer(meshes.get(name, TriangleMesh.empty()), gt, params.mesh_samples, seed)
        reports.append(MetricReport(strategy, name, value, None, n, len(gt)))
    return reports


def score_single_mesh(mesh: TriangleMesh, truth: dict[str, np.ndarray], strategy: str,
                      params: PipelineParams) -> list[MetricReport]:
    """A single-depth reconstruction offers the same mesh for every layer."""
    return score_layers({name: mesh for name in truth}, truth, strategy, params)


def union_chamfer(meshes: dict[str, TriangleMesh], truth: dict[str, np.ndarray], params: PipelineParams) -> float:
    """Chamfer between all extracted layers together and all ground-truth layers together."""
    seed = params.seeds(2)[1]
    kept = [m for m in meshes.values() if len(m)]
    if not kept:
        return float("inf")
    per = max(1, params.mesh_samples // len(kept))
    pts = np.concatenate([sample_mesh(m, per, seed + i) for i, m in enumerate(kept)])
    return chamfer(pts, np.concatenate(list(truth.values())))


def ground_truth(scene: SceneConfig, params: PipelineParams) -> dict[str, np.ndarray]:
    return ground_truth_layers(scene, params.gt_samples, seed=params.seeds(1)[0])


def compare_strategies(scene: SceneConfig, params: PipelineParams = PipelineParams(),
                       views: list[View] | None = None, recon: Reconstruction | None = None,
                       truth: dict | None = None) -> list[MetricReport]:
    """Layered peaks versus median-only and expected-only reconstructions."""
    views = views if views is not None else render_views(scene, params)
    truth = truth if truth is not None else ground_truth(scene, params)
    recon = recon if recon is not None else reconstruct(scene, params, views)
    return score_strategies(views, truth, recon.meshes, recon.maps[OUTER] + recon.maps[INNER],
                            recon.template, recon.truncation, params)


def score_strategies(views: list[View], truth: dict[str, np.ndarray], peak_meshes: dict[str, TriangleMesh],
                     peak_maps: list[DepthMap], template: TsdfVolume, truncation: float,
                     params: PipelineParams) -> list[MetricReport]:
    tau_d = params.precision_voxels * template.voxel_size
    union = np.concatenate(list(truth.values()))
    prec = precision(back_project(peak_maps), union, tau_d)
    reports = [replace(r, precision=prec) for r in score_layers(peak_meshes, truth, "peak", params)]
    for kind in ("median", "expected"):
        try:
            maps = single_depth_maps(views, kind, params)
            mesh = extract_mesh(naive_fuse(maps, template, truncation))
            rows = score_single_mesh(mesh, truth, kind, params)
            prec = precision(back_project(maps), union, tau_d)
        except TspeError as err:
            raise type(err)(f"[{kind}] {err}") from err
        reports += [replace(r, precision=prec) for r in rows]
    return reports


def dip_samples(stacks: list[TStack], params: PipelineParams) -> list[tuple[int, int, np.ndarray]]:
    """Stepwise depth samples (one per threshold) of randomly chosen fully absorbing pixels.

    Returns ``(view id, flat pixel index, samples)`` triples.
    """
    rng = np.random.default_rng(params.seeds(3)[2])
    out = []
    for st in stacks:
        full = np.flatnonzero(st.depths[0].ravel() > 0)
        if full.size == 0:
            continue
        pick = np.sort(rng.choice(full, size=min(params.dip_pixels, full.size), replace=False))
        flat = st.depths.reshape(st.n, -1)
        out.extend((st.camera.id, int(p), flat[:, p].astype(np.float64)) for p in pick)
    return out


def dip_table(samples, params: PipelineParams) -> list[DipResult]:
    return [dip_test(x, params.bootstrap, params.seed) for _, _, x in samples]


def sweep(scene: SceneConfig, thetas, params: PipelineParams = PipelineParams()) -> list[dict]:
    """Chamfer against the peak threshold, reusing views, ground truth and repeated layer selections."""
    views = render_views(scene, params)
    stacks = [v.stack for v in views]
    truth = ground_truth(scene, params)
    cache: dict = {}
    rows = []
    for theta in thetas:
        p = replace(params, theta=float(theta))
        analyses = analyze(stacks, p)
        key = tuple((a.camera.id, pk.rank, pk.index) for a in analyses for pk in a.peaks)
        if key not in cache:
            recon = reconstruct_from_stacks(stacks, scene, p, analyses)
            layers = {r.layer: r.chamfer for r in score_layers(recon.meshes, truth, "peak", p)}
            cache[key] = (union_chamfer(recon.meshes, truth, p), layers)
        else:
            log.info("theta=%.3g selects the same layers as an earlier value; reusing it", theta)
        total, layers = cache[key]
        rows.append({
            "theta": float(theta),
            "chamfer": total,
            **{f"chamfer_{k}": v for k, v in layers.items()},
            "mean_layers": float(np.mean(layer_counts(analyses))),
        })
    return rows


def layer_counts(analyses: list[ViewAnalysis]) -> list[int]:
    return [len(a.peaks) for a in analyses]


def interior_minimum(rows: list[dict], key: str = "chamfer") -> bool:
    """True when some interior value is strictly below both endpoint values."""
    vals = [r[key] for r in rows]
    return len(vals) >= 3 and min(vals[1:-1]) < min(vals[0], vals[-1])
