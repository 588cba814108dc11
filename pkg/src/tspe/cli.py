"""Command-line entry point: ``tspe <render|analyze|fuse|mesh|eval|pipeline|sweep>``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .depthdist import Peak, PeakSet
from .errors import (
    ConfigError,
    DataError,
    DomainError,
    InsufficientDataError,
    InvalidCameraError,
    InvalidFragmentError,
    SceneError,
    TspeError,
)
from .fusion import extract_mesh, read_ply, read_volume
from .scene import SceneConfig, bundled_scene_path, load_scene
from .transmittance import read_tstacks, write_tstacks

log = logging.getLogger("tspe")

OUTPUT_ROOT_ENV = "TSPE_OUTPUT_ROOT"
DEFAULT_OUT = "tspe_out"
DEFAULT_THETAS = (0.02, 0.05, 0.1, 0.15, 0.25, 0.5, 0.9)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

TSTACKS, ANALYSIS, VOLUMES, MESHES, REPORT, SWEEP = "tstacks", "analysis", "volumes", "meshes", "report", "sweep"
MANIFEST = "manifest.json"

# flag name -> PipelineParams field
PARAM_FLAGS = {
    "n_thresholds": int, "theta": float, "bandwidth": float, "grid_size": int, "opacity_cutoff": float,
    "mask_level": float, "voxel_size": float, "truncation": float, "freeze_weight": float,
    "gt_samples": int, "mesh_samples": int, "precision_voxels": float, "bootstrap": int,
    "dip_pixels": int, "seed": int, "workers": int,
}
CONFIG_KEYS = {"scene", "out", "thetas", "mask"} | set(PARAM_FLAGS)


@dataclass
class PipelineConfig:
    scene_path: Path
    out: Path
    params: pl.PipelineParams
    thetas: tuple[float, ...] = DEFAULT_THETAS
    mask_file: Path | None = None
    resume: bool = False
    _scene: SceneConfig | None = field(default=None, repr=False)

    @property
    def scene(self) -> SceneConfig:
        if self._scene is None:
            self._scene = load_scene(self.scene_path)
        return self._scene

    def dir(self, name: str) -> Path:
        path = self.out / name
        path.mkdir(parents=True, exist_ok=True)
        return path


def resolve_scene(value: str | None) -> Path:
    if not value:
        raise ConfigError("no scene given (use --scene or the config file)")
    path = Path(value)
    if path.is_file():
        return path
    try:
        bundled = bundled_scene_path(value)
    except (TspeError, OSError):
        bundled = None
    if bundled is not None and bundled.is_file():
        return bundled
    raise ConfigError(f"scene {value!r} is neither a file nor a bundled scene name")


def load_config(args: argparse.Namespace) -> PipelineConfig:
    data: dict = {}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError(f"cannot read config {args.config}: {err}") from err
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            data[key] = flag
    params = pl.PipelineParams.from_dict({k: data[k] for k in PARAM_FLAGS if k in data})
    out = data.get("out") or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUT
    thetas = data.get("thetas", DEFAULT_THETAS)
    if isinstance(thetas, str):
        thetas = [float(t) for t in thetas.split(",") if t.strip()]
    thetas = tuple(float(t) for t in thetas)
    if any(not 0 < t < 1 for t in thetas) or not thetas:
        raise ConfigError("thetas must be a non-empty list of values in (0, 1)")
    mask = Path(data["mask"]) if data.get("mask") else None
    return PipelineConfig(resolve_scene(data.get("scene")), Path(out), params, thetas, mask,
                          bool(getattr(args, "resume", False)))


# --- manifest and resume ------------------------------------------------------------

def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _files(paths) -> list[Path]:
    out = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            out.extend(sorted(q for q in p.rglob("*") if q.is_file()))
        elif p.is_file():
            out.append(p)
    return out


def _rel(cfg: PipelineConfig, path: Path) -> str:
    try:
        return path.resolve().relative_to(cfg.out.resolve()).as_posix()
    except ValueError:
        return path.as_posix()


def input_hash(cfg: PipelineConfig, stage: str, inputs) -> str:
    h = hashlib.sha256()
    h.update(stage.encode())
    h.update(json.dumps(cfg.params.to_dict(), sort_keys=True).encode())
    h.update(json.dumps(list(cfg.thetas)).encode())
    for f in _files(inputs):
        h.update(_rel(cfg, f).encode())
        h.update(file_hash(f).encode())
    return h.hexdigest()


def read_manifest(cfg: PipelineConfig) -> dict:
    path = cfg.out / MANIFEST
    if path.is_file():
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            log.warning("ignoring unreadable manifest %s", path)
    return {"format": "tspe-manifest/1", "stages": {}}


def run_stage(cfg: PipelineConfig, stage: str, inputs, action) -> list[Path]:
    """Run ``action`` unless ``--resume`` finds identical inputs and intact outputs."""
    missing = [str(p) for p in inputs if not Path(p).exists()]
    if missing:
        raise DataError(f"stage {stage}: missing input(s) {', '.join(missing)}")
    manifest = read_manifest(cfg)
    key = input_hash(cfg, stage, inputs)
    entry = manifest["stages"].get(stage)
    if cfg.resume and entry and entry.get("inputs") == key:
        intact = all((cfg.out / p).is_file() and file_hash(cfg.out / p) == h for p, h in entry["outputs"].items())
        if intact:
            log.info("stage %s: inputs unchanged, skipping", stage)
            return [cfg.out / p for p in entry["outputs"]]
    start = time.perf_counter()
    outputs = action(cfg)
    log.info("stage %s: %.2fs", stage, time.perf_counter() - start)
    manifest = read_manifest(cfg)
    manifest["stages"][stage] = {
        "inputs": key,
        "outputs": {_rel(cfg, p): file_hash(p) for p in sorted(outputs)},
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return outputs


# --- file helpers -----------------------------------------------------------------

def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "inf" if np.isinf(x) else format(float(x), ".12g")
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def json_safe(x):
    if isinstance(x, dict):
        return {k: json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, (float, np.floating)):
        return None if not np.isfinite(x) else float(x)
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path: Path, data) -> Path:
    path.write_text(json.dumps(json_safe(data), indent=2, sort_keys=True) + "\n")
    return path


def load_masks(cfg: PipelineConfig, stacks):
    if cfg.mask_file is None:
        return None
    try:
        arr = np.load(cfg.mask_file).astype(bool)
    except (OSError, ValueError) as err:
        raise DataError(f"cannot read mask {cfg.mask_file}: {err}") from err
    shapes = {st.camera.shape for st in stacks}
    if arr.ndim == 2 and arr.shape in shapes and len(shapes) == 1:
        return [arr] * len(stacks)
    if arr.ndim == 3 and len(arr) == len(stacks) and all(m.shape == st.camera.shape for m, st in zip(arr, stacks)):
        return list(arr)
    raise DataError(f"mask shape {arr.shape} fits neither one image nor {len(stacks)} views")


def read_layers(cfg: PipelineConfig, stacks) -> list[pl.ViewAnalysis]:
    path = cfg.out / ANALYSIS / "layers.json"
    try:
        table = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read {path}: {err}") from err
    by_id = {v["camera_id"]: v["layers"] for v in table["views"]}
    out = []
    for st in stacks:
        peaks = [Peak(p["depth"], p["score"], p["threshold"], p["index"], p["rank"])
                 for p in by_id.get(st.camera.id, [])]
        out.append(pl.ViewAnalysis(st.camera, None, None, PeakSet(peaks)))
    return out


def read_stacks(cfg: PipelineConfig):
    stacks = read_tstacks(cfg.out / TSTACKS)
    if len(stacks) != len(cfg.scene.cameras):
        raise DataError(f"{len(stacks)} T-stacks on disk but the scene has {len(cfg.scene.cameras)} cameras")
    return stacks


# --- stages -----------------------------------------------------------------------

def do_render(cfg: PipelineConfig) -> list[Path]:
    views = pl.render_views(cfg.scene, cfg.params)
    manifest = write_tstacks(cfg.dir(TSTACKS), [v.stack for v in views])
    return [manifest] + sorted(manifest.parent.glob("view_*.f32"))


def do_analyze(cfg: PipelineConfig) -> list[Path]:
    stacks = read_stacks(cfg)
    analyses = pl.analyze(stacks, cfg.params, load_masks(cfg, stacks))
    d = cfg.dir(ANALYSIS)
    seq_rows, dens_rows, peak_rows, views = [], [], [], []
    for an in analyses:
        cid = an.camera.id
        for k, (t, m, c) in enumerate(zip(an.sequence.thresholds, an.sequence.means, an.sequence.counts)):
            seq_rows.append((cid, k, float(t), None if np.isnan(m) else float(m), int(c)))
        if an.density is not None:
            dens_rows += [(cid, float(x), float(y)) for x, y in zip(an.density.grid, an.density.density)]
        peak_rows += [(cid, p.rank, p.depth, p.score, p.threshold, p.index) for p in an.peaks]
        views.append({"camera_id": cid, "layers": [
            {"rank": p.rank, "index": p.index, "threshold": p.threshold, "depth": p.depth, "score": p.score}
            for p in an.peaks]})
    samples = pl.dip_samples(stacks, cfg.params)
    dips = pl.dip_table(samples, cfg.params)
    dip_rows = [(cid, pix, r.n, r.dip, r.p_value, r.bootstrap) for (cid, pix, _), r in zip(samples, dips)]
    return [
        write_csv(d / "sequence.csv", ["view", "k", "threshold", "mean_depth", "count"], seq_rows),
        write_csv(d / "density.csv", ["view", "depth", "density"], dens_rows),
        write_csv(d / "peaks.csv", ["view", "rank", "depth", "score", "threshold", "index"], peak_rows),
        write_csv(d / "dip.csv", ["view", "pixel", "n", "dip", "p_value", "bootstrap"], dip_rows),
        write_json(d / "layers.json", {"theta": cfg.params.theta, "views": views}),
    ]


def do_fuse(cfg: PipelineConfig) -> list[Path]:
    stacks = read_stacks(cfg)
    recon = pl.reconstruct_from_stacks(stacks, cfg.scene, cfg.params, read_layers(cfg, stacks))
    d = cfg.dir(VOLUMES)
    out = []
    for name, vol in [("shared", recon.fusion.shared), *recon.fusion.layers.items()]:
        vol.write(d / name)
        out += [d / f"{name}.f32", d / f"{name}.json"]
    return out + do_mesh(cfg)


def do_mesh(cfg: PipelineConfig) -> list[Path]:
    vol_dir = cfg.out / VOLUMES
    names = sorted(p.stem for p in vol_dir.glob("*.json") if p.stem != "shared")
    if not names:
        raise DataError(f"no layer volumes in {vol_dir}")
    d = cfg.dir(MESHES)
    out = []
    for name in names:
        mesh = extract_mesh(read_volume(vol_dir / name))
        mesh.write_ply(d / f"{name}.ply")
        mesh.write_obj(d / f"{name}.obj")
        out += [d / f"{name}.ply", d / f"{name}.obj"]
        log.info("mesh %s: %d vertices, %d faces", name, len(mesh.vertices), len(mesh))
    return out


def do_eval(cfg: PipelineConfig) -> list[Path]:
    stacks = read_stacks(cfg)
    analyses = read_layers(cfg, stacks)
    maps = pl.layer_maps(stacks, analyses)
    meshes = {p.stem: read_ply(p) for p in sorted((cfg.out / MESHES).glob("*.ply"))}
    views = pl.render_views(cfg.scene, cfg.params)
    truth = pl.ground_truth(cfg.scene, cfg.params)
    template, tau = pl.fusion_volume(cfg.scene, cfg.params)
    reports = pl.score_strategies(views, truth, meshes, maps[pl.OUTER] + maps[pl.INNER], template, tau, cfg.params)
    s = template.voxel_size
    name = cfg.scene.name
    d = cfg.dir(REPORT)
    rows = [(name, r.strategy, r.layer, r.chamfer, r.chamfer / s, r.precision, r.points, r.truth_points)
            for r in reports]
    summary = {
        "scene": name,
        "voxel_size": s,
        "precision_threshold": cfg.params.precision_voxels * s,
        "layers_per_view": pl.layer_counts(analyses),
        "metrics": [r.as_dict() for r in reports],
        "params": cfg.params.to_dict(),
    }
    return [
        write_csv(d / "metrics.csv", ["scene", "strategy", "layer", "chamfer", "chamfer_voxels", "precision",
                                      "points", "truth_points"], rows),
        write_json(d / "report.json", summary),
    ]


def do_sweep(cfg: PipelineConfig) -> list[Path]:
    rows = pl.sweep(cfg.scene, cfg.thetas, cfg.params)
    layers = sorted({k for r in rows for k in r if k.startswith("chamfer_")})
    header = ["theta", "chamfer", *layers, "mean_layers"]
    verdict = "interior" if pl.interior_minimum(rows) else "not interior"
    log.info("sweep minimum over theta is %s", verdict)
    return [write_csv(cfg.dir(SWEEP) / "sweep.csv", header, [[r.get(k) for k in header] for r in rows])]


def stage_inputs(cfg: PipelineConfig, stage: str) -> list[Path]:
    out = cfg.out
    extra = [cfg.mask_file] if cfg.mask_file else []
    return {
        "render": [cfg.scene_path],
        "analyze": [out / TSTACKS, *extra],
        "fuse": [cfg.scene_path, out / TSTACKS, out / ANALYSIS / "layers.json"],
        "mesh": [out / VOLUMES],
        "eval": [cfg.scene_path, out / TSTACKS, out / ANALYSIS / "layers.json", out / MESHES],
        "sweep": [cfg.scene_path],
    }[stage]


ACTIONS = {"render": do_render, "analyze": do_analyze, "fuse": do_fuse, "mesh": do_mesh,
           "eval": do_eval, "sweep": do_sweep}


def run(cfg: PipelineConfig, command: str) -> None:
    stages = ["render", "analyze", "fuse", "eval"] if command == "pipeline" else [command]
    for name in stages:
        run_stage(cfg, name, stage_inputs(cfg, name), ACTIONS[name])


# --- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--scene", help="scene JSON file or bundled scene name")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--mask", help=".npy boolean mask, one image or one per view")
    common.add_argument("--resume", action="store_true", help="skip stages whose inputs are unchanged")
    for name, typ in PARAM_FLAGS.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="tspe", description="Layered depth extraction and TSDF fusion.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "render": "render per-view T-stacks from a scene",
        "analyze": "aggregate depths, detect layer peaks, run dip tests",
        "fuse": "progressive fusion into per-layer volumes, then meshes",
        "mesh": "extract meshes from saved layer volumes",
        "eval": "score peak, median and expected-depth reconstructions",
        "pipeline": "render, analyze, fuse and eval in one go",
        "sweep": "Chamfer distance across peak thresholds",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "sweep":
            p.add_argument("--thetas", help="comma-separated peak thresholds")
    return parser


def _error(code: int, err: BaseException) -> int:
    payload = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        run(cfg, args.command)
    except (ConfigError, SceneError, DomainError, InvalidCameraError) as err:
        return _error(EXIT_CONFIG, err)
    except (DataError, InsufficientDataError, InvalidFragmentError) as err:
        return _error(EXIT_DATA, err)
    except (TspeError, AssertionError) as err:
        return _error(EXIT_INTERNAL, err)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
