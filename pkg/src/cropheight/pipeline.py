"""Pipeline stages, configuration, and run manifests.

Configuration is a flat key-value text file with dotted section keys
(``filter.min_view_angle = 1.5``). Every default matches the source method's
stated value where one exists: 1.5 rad view angle, 5 degree slope, 0.8
confidence, 5% cropland gate, 4% tall gate, third-order harmonics with unit
frequency, and the peak-index quality threshold of 4.

Stages communicate through files under the run directory, each writing a
JSON manifest (inputs, outputs, config hash, seed, version) with no
wall-clock content, so reruns with the same config and seed are
byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from . import __version__, celltrainer, evaluator, forest, gridder, harmonics
from . import heightmodel, synth
from .core import (
    HeightClass,
    Raster,
    canonical_json_bytes,
    derive_seed,
    read_raster,
    read_reference,
    write_raster,
    write_reference,
)
from .gedi import (
    FilterConfig,
    apply_quality_filters,
    beam_day_mean_view_angle,
    filter_confident,
    read_shot_table,
    sample_slope,
    write_filter_report,
    write_shot_table,
)

ENV_PREFIX = "CROPHEIGHT_"

STAGES = ("synth", "filter-shots", "train-height", "classify-shots", "fit-harmonics",
          "grid", "train-cells", "predict", "mosaic", "evaluate", "aggregate", "report")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    pass


DEFAULTS: dict = {
    "seed": 42,
    "workers": 1,
    "out": "runs/demo",
    # synthetic scene
    "scene.lat_min": 42.0,
    "scene.lat_max": 42.0256,
    "scene.lon_min": -90.0128,
    "scene.lon_max": -89.9872,
    "scene.pixel_size": 0.0001,
    "scene.years": (2019,),
    "scene.field_px_min": 16,
    "scene.field_px_max": 32,
    "scene.noncrop_fraction": 0.04,
    "scene.low_biomass_fraction": 0.0,
    "scene.cloud_fraction": 0.1,
    "scene.passes_per_month": 1,
    "scene.track_spacing_px": 80,
    "scene.shot_spacing_px": 24,
    "scene.bad_quality_fraction": 0.02,
    "scene.degrade_fraction": 0.02,
    "scene.dem": "flat",
    "scene.corrupt_days": (),
    "scene.n_reference": 2000,
    # shot filtering
    "filter.min_view_angle": 1.5,
    "filter.max_slope": 5.0,
    "filter.min_confidence": 0.8,
    "filter.per_shot_angle": False,
    "filter.resample_slope": False,
    # harmonic regression
    "harmonic.order": 3,
    "harmonic.omega": 1.0,
    "harmonic.min_obs": 10,
    "harmonic.cloud_prob_max": 40.0,
    # forests
    "rf.n_trees": 100,
    "rf.max_features": None,
    "rf.min_leaf": 1,
    "rf.max_depth": None,
    # spatial splitting
    "split.block_size": 0.5,
    "split.train_fraction": 0.8,
    # height model
    "height.month": 8,
    "height.tall_crops": ("maize", "sugarcane"),
    # analysis grid
    "grid.cell_size": 5.0,
    "grid.lat_min": -51.6,
    "grid.lat_max": 51.6,
    "grid.cropland_gate": 0.05,
    "grid.tall_gate": 0.04,
    "grid.min_month_shots": 20,
    # per-cell models
    "cells.buffer_deg": 0.5,
    "cells.min_train_shots": 50,
    "cells.peak_window_3mo": False,
    # evaluation
    "eval.top_k": 10,
    "eval.n_repeats": 5,
    "eval.tall_crops": ("maize", "sugarcane"),
    # coarse aggregation ("10 km equivalent" for desk scenes)
    "aggregate.coarse_factor": 16,
}


def _convert(key: str, text: str):
    default = DEFAULTS[key]
    text = text.strip()
    if text.lower() in ("none", "null"):
        return None
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes", "on"):
            return True
        if text.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {text!r}")
    if isinstance(default, tuple):
        if text == "":
            return ()
        items = [t.strip() for t in text.split(",") if t.strip()]
        element = default[0] if default else None
        if isinstance(element, int):
            return tuple(int(t) for t in items)
        return tuple(items)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected integer, got {text!r}") from None
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected number, got {text!r}") from None
    if default is None:
        # Nullable numeric knobs (rf.max_features, rf.max_depth).
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected integer or none, got {text!r}") from None
    return text


class PipelineConfig:
    """Immutable view of the merged defaults / file / environment / overrides."""

    def __init__(self, values: dict):
        self.values = dict(DEFAULTS)
        for key, value in values.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def out(self) -> Path:
        return Path(self.values["out"])

    @property
    def workers(self) -> int:
        return max(1, int(self.values["workers"]))

    def config_hash(self) -> str:
        payload = {k: list(v) if isinstance(v, tuple) else v
                   for k, v in sorted(self.values.items())}
        return hashlib.sha256(canonical_json_bytes(payload)).hexdigest()

    def dump(self, path: Path) -> None:
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            elif value is None:
                text = "none"
            else:
                text = str(value)
            lines.append(f"{key} = {text}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, text = (part.strip() for part in line.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _convert(key, text)
    return values


def env_overrides(environ=None) -> dict:
    """CROPHEIGHT_SECTION__KEY=value (double underscore for the dot)."""
    environ = os.environ if environ is None else environ
    values = {}
    for name, text in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        if key not in DEFAULTS:
            raise ConfigError(f"environment variable {name} maps to unknown key {key!r}")
        values[key] = _convert(key, text)
    return values


def load_config(config_path=None, overrides: dict | None = None,
                environ=None) -> PipelineConfig:
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    values.update(env_overrides(environ))
    for key, text in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _convert(key, text) if isinstance(text, str) else text
    return PipelineConfig(values)


# ---------------------------------------------------------------------------
# Run layout and manifests
# ---------------------------------------------------------------------------

class RunPaths:
    def __init__(self, out: Path):
        self.out = Path(out)
        self.scene = self.out / "scene"
        self.filtered = self.out / "filtered"
        self.height = self.out / "height"
        self.classified = self.out / "classified"
        self.features = self.out / "features"
        self.grid = self.out / "grid"
        self.cells = self.out / "cells"
        self.predict = self.out / "predict"
        self.mosaic = self.out / "mosaic"
        self.evaluation = self.out / "eval"
        self.aggregate = self.out / "agg"
        self.report = self.out / "report"
        self.manifests = self.out / "manifests"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(cfg: PipelineConfig, stage: str, inputs: list, outputs: list) -> Path:
    paths = RunPaths(cfg.out)
    paths.manifests.mkdir(parents=True, exist_ok=True)
    manifest = {
        "stage": stage,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {str(p): _sha256(Path(p)) for p in outputs},
    }
    target = paths.manifests / f"{stage}.json"
    with open(target, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return target


def _parallel_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    ctx = concurrent.futures.ProcessPoolExecutor(
        max_workers=min(workers, len(items)))
    try:
        return list(ctx.map(fn, items))
    finally:
        ctx.shutdown()


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------

def scene_config_from(cfg: PipelineConfig) -> synth.SceneConfig:
    return synth.SceneConfig(
        seed=derive_seed(cfg.seed, "synth"),
        lat_min=cfg["scene.lat_min"],
        lat_max=cfg["scene.lat_max"],
        lon_min=cfg["scene.lon_min"],
        lon_max=cfg["scene.lon_max"],
        pixel_size=cfg["scene.pixel_size"],
        years=tuple(cfg["scene.years"]),
        field_px_min=cfg["scene.field_px_min"],
        field_px_max=cfg["scene.field_px_max"],
        noncrop_fraction=cfg["scene.noncrop_fraction"],
        low_biomass_fraction=cfg["scene.low_biomass_fraction"],
        cloud_fraction=cfg["scene.cloud_fraction"],
        passes_per_month=cfg["scene.passes_per_month"],
        track_spacing_px=cfg["scene.track_spacing_px"],
        shot_spacing_px=cfg["scene.shot_spacing_px"],
        bad_quality_fraction=cfg["scene.bad_quality_fraction"],
        degrade_fraction=cfg["scene.degrade_fraction"],
        dem=cfg["scene.dem"],
        corrupt_days=tuple(cfg["scene.corrupt_days"]),
    )


def filter_config_from(cfg: PipelineConfig) -> FilterConfig:
    return FilterConfig(
        min_view_angle=cfg["filter.min_view_angle"],
        max_slope=cfg["filter.max_slope"],
        min_confidence=cfg["filter.min_confidence"],
        per_shot_angle=cfg["filter.per_shot_angle"],
    )


def harmonic_config_from(cfg: PipelineConfig) -> harmonics.HarmonicConfig:
    return harmonics.HarmonicConfig(
        order=cfg["harmonic.order"],
        omega=cfg["harmonic.omega"],
        min_obs=cfg["harmonic.min_obs"],
        cloud_prob_max=cfg["harmonic.cloud_prob_max"],
    )


def rf_config_from(cfg: PipelineConfig, seed: int) -> forest.RFConfig:
    return forest.RFConfig(
        n_trees=cfg["rf.n_trees"],
        max_features=cfg["rf.max_features"],
        min_leaf=cfg["rf.min_leaf"],
        max_depth=cfg["rf.max_depth"],
        seed=seed,
    )


def grid_spec_from(cfg: PipelineConfig) -> gridder.GridSpec:
    return gridder.GridSpec(
        cell_size=cfg["grid.cell_size"],
        lat_min=cfg["grid.lat_min"],
        lat_max=cfg["grid.lat_max"],
        cropland_gate=cfg["grid.cropland_gate"],
        tall_gate=cfg["grid.tall_gate"],
        min_month_shots=cfg["grid.min_month_shots"],
    )


def run_synth(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    scene = synth.generate_scene(scene_config_from(cfg))
    synth.write_scene(scene, paths.scene)
    records = synth.sample_reference(scene, cfg["scene.n_reference"])
    write_reference(records, paths.scene / "reference.jsonl")
    outputs = sorted(str(p) for p in paths.scene.iterdir())
    write_manifest(cfg, "synth", [], outputs)
    return outputs


def _scene_manifest(paths: RunPaths) -> dict:
    with open(paths.scene / "scene_manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def run_filter_shots(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.filtered.mkdir(parents=True, exist_ok=True)
    shots_path = paths.scene / "shots.csv"
    dem_path = paths.scene / "dem.asc"
    shots = read_shot_table(shots_path)
    inputs = [shots_path]
    if cfg["filter.resample_slope"] or any(math.isnan(s.slope) for s in shots):
        dem = read_raster(dem_path)
        shots = sample_slope(shots, dem)
        inputs.append(dem_path)
    table = beam_day_mean_view_angle(shots)
    kept, dropped = apply_quality_filters(shots, table, filter_config_from(cfg))
    write_shot_table(kept, paths.filtered / "shots_filtered.csv")
    write_filter_report(dropped, len(kept), paths.filtered / "filter_report.json")
    angles_path = paths.filtered / "beam_day_angles.json"
    with open(angles_path, "w", encoding="utf-8", newline="\n") as fh:
        rows = [{"beam": beam, "date": date.isoformat(), "mean_angle": mean, "count": count}
                for (beam, date), (mean, count) in sorted(table.entries.items(),
                                                          key=lambda kv: (kv[0][1], kv[0][0]))]
        json.dump(rows, fh, indent=2)
        fh.write("\n")
    outputs = [paths.filtered / "shots_filtered.csv",
               paths.filtered / "filter_report.json", angles_path]
    write_manifest(cfg, "filter-shots", inputs, outputs)
    return [str(p) for p in outputs]


def run_train_height(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.height.mkdir(parents=True, exist_ok=True)
    shots_path = paths.filtered / "shots_filtered.csv"
    labels_path = paths.scene / "crop_labels.asc"
    shots = read_shot_table(shots_path)
    labels = read_raster(labels_path)
    manifest = _scene_manifest(paths)
    crop_names = {int(k): v for k, v in manifest["crop_names"].items()}
    month = cfg["height.month"]
    month_shots = [s for s in shots if s.date.month == month]
    tall_set = frozenset(name.lower() for name in cfg["height.tall_crops"])
    dataset = heightmodel.build_training_set(
        month_shots, labels, crop_names, tall_set,
        block_size=cfg["split.block_size"])
    spec = heightmodel.SplitSpec(
        train_fraction=cfg["split.train_fraction"],
        block_size=cfg["split.block_size"],
        seed=derive_seed(cfg.seed, "height-split"),
    )
    train, test = heightmodel.spatial_block_split(dataset, spec)
    model = heightmodel.train_height_model(
        train, rf_config_from(cfg, derive_seed(cfg.seed, "height-rf")))
    accuracy = heightmodel.heldout_accuracy(model, test) if len(test) else None
    model_path = paths.height / "height_model.json"
    model_path.write_bytes(forest.serialize(model) + b"\n")
    report = {
        "training_month": month,
        "n_total": len(dataset),
        "n_train": len(train),
        "n_test": len(test),
        "heldout_accuracy": accuracy,
        "train_blocks": sorted(set(train.block_id.tolist())),
        "test_blocks": sorted(set(test.block_id.tolist())),
    }
    report_path = paths.height / "height_report.json"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    write_manifest(cfg, "train-height", [shots_path, labels_path],
                   [model_path, report_path])
    return [str(model_path), str(report_path)]


def run_classify_shots(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.classified.mkdir(parents=True, exist_ok=True)
    model_path = paths.height / "height_model.json"
    shots_path = paths.filtered / "shots_filtered.csv"
    model = forest.deserialize(model_path.read_bytes())
    shots = read_shot_table(shots_path)
    classified = heightmodel.classify_shots(model, shots)
    confident = filter_confident(classified, filter_config_from(cfg))
    classified_path = paths.classified / "shots_classified.csv"
    confident_path = paths.classified / "shots_confident.csv"
    write_shot_table(classified, classified_path)
    write_shot_table(confident, confident_path)
    write_manifest(cfg, "classify-shots", [model_path, shots_path],
                   [classified_path, confident_path])
    return [str(classified_path), str(confident_path)]


def run_fit_harmonics(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.features.mkdir(parents=True, exist_ok=True)
    mask_path = paths.scene / "crop_mask.asc"
    crop_mask = read_raster(mask_path)
    config = harmonic_config_from(cfg)
    manifest = _scene_manifest(paths)
    outputs = []
    inputs = [mask_path]
    for year in manifest["years"]:
        stack_path = paths.scene / f"s2_{year}.npz"
        inputs.append(stack_path)
        stack = harmonics.load_stack(stack_path)
        features = harmonics.build_feature_stack(stack, crop_mask, config)
        year_dir = paths.features / str(year)
        year_dir.mkdir(parents=True, exist_ok=True)
        for i, name in enumerate(harmonics.FEATURE_NAMES):
            target = year_dir / f"{name}.asc"
            write_raster(features.as_raster(i), target)
            outputs.append(target)
        validity_path = year_dir / "validity.asc"
        write_raster(features.validity_raster(), validity_path)
        outputs.append(validity_path)
    write_manifest(cfg, "fit-harmonics", inputs, outputs)
    return [str(p) for p in outputs]


def load_feature_stack(cfg: PipelineConfig, year: int) -> harmonics.FeatureStack:
    paths = RunPaths(cfg.out)
    year_dir = paths.features / str(year)
    first = read_raster(year_dir / f"{harmonics.FEATURE_NAMES[0]}.asc")
    data = np.empty((len(harmonics.FEATURE_NAMES),) + first.values.shape)
    for i, name in enumerate(harmonics.FEATURE_NAMES):
        raster = first if i == 0 else read_raster(year_dir / f"{name}.asc")
        values = raster.values.copy()
        values[values == raster.nodata] = np.nan
        data[i] = values
    validity = read_raster(year_dir / "validity.asc")
    return harmonics.FeatureStack(
        origin=first.origin, cell_size=first.cell_size, data=data,
        validity=validity.values.astype(np.int64))


def run_grid(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.grid.mkdir(parents=True, exist_ok=True)
    mask_path = paths.scene / "crop_mask.asc"
    shots_path = paths.classified / "shots_confident.csv"
    crop_mask = read_raster(mask_path)
    shots = read_shot_table(shots_path)
    spec = grid_spec_from(cfg)
    cells = gridder.build_grid(crop_mask, spec)
    gridder.populate_cells(cells, shots, spec)
    grid_path = paths.grid / "cells.jsonl"
    gridder.write_grid(cells, grid_path)
    write_manifest(cfg, "grid", [mask_path, shots_path], [grid_path])
    return [str(grid_path)]


# Worker context inherited by forked processes; set before pool creation.
_WORKER_CTX: dict = {}


def _train_cell_task(item):
    cell_id, year, month = item
    ctx = _WORKER_CTX
    cell = ctx["cells"][cell_id]
    cfg = ctx["cfg"]
    try:
        x, y = celltrainer.build_training_set(
            cell, year, month, ctx["shots"], ctx["features"][year],
            buffer_deg=cfg["cells.buffer_deg"],
            min_train_shots=cfg["cells.min_train_shots"])
        rf = rf_config_from(cfg, celltrainer.cell_month_seed(cfg.seed, cell_id, year, month))
        cm = celltrainer.train_cell_month(x, y, rf, cell_id, year, month)
        return (cell_id, year, month), cm, None
    except celltrainer.SkipCellMonth as exc:
        return (cell_id, year, month), None, str(exc)


def run_train_cells(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.cells.mkdir(parents=True, exist_ok=True)
    grid_path = paths.grid / "cells.jsonl"
    shots_path = paths.classified / "shots_confident.csv"
    cells = gridder.read_grid(grid_path)
    shots = read_shot_table(shots_path)
    manifest = _scene_manifest(paths)
    years = manifest["years"]
    features = {year: load_feature_stack(cfg, year) for year in years}
    spec = grid_spec_from(cfg)

    tasks = []
    skipped = []
    for cell in cells:
        if cell.optimal_month is None:
            skipped.append({"cell_id": cell.cell_id, "year": None, "month": None,
                            "reason": "no optimal month"})
            continue
        # Gate on the peak (optimal-month) tall percentage, the per-cell
        # scalar the month selection maximizes.
        tall_fraction = cell.monthly_hist.tall_fraction(cell.optimal_month)
        if tall_fraction is None or tall_fraction <= spec.tall_gate:
            skipped.append({"cell_id": cell.cell_id, "year": None, "month": None,
                            "reason": f"peak tall fraction {tall_fraction} below gate"})
            continue
        window = gridder.month_window(cell.optimal_month, cell.hemisphere)
        for year in years:
            for month in window:
                tasks.append((cell.cell_id, int(year), int(month)))

    global _WORKER_CTX
    _WORKER_CTX = {
        "cells": {c.cell_id: c for c in cells},
        "cfg": cfg,
        "shots": shots,
        "features": features,
    }
    results = _parallel_map(_train_cell_task, tasks, cfg.workers)
    _WORKER_CTX = {}

    outputs = []
    trained = []
    for key, cm, reason in sorted(results, key=lambda r: r[0]):
        cell_id, year, month = key
        if cm is None:
            skipped.append({"cell_id": cell_id, "year": year, "month": month,
                            "reason": reason})
            continue
        target = paths.cells / f"model_c{cell_id}_y{year}_m{month:02d}.json"
        celltrainer.save_cell_model(cm, target)
        outputs.append(target)
        trained.append({"cell_id": cell_id, "year": year, "month": month,
                        "heldout_accuracy": cm.heldout_accuracy,
                        "n_train_shots": cm.n_train_shots})
    report_path = paths.cells / "training_report.json"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"trained": trained, "skipped": skipped}, fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs.append(report_path)
    write_manifest(cfg, "train-cells", [grid_path, shots_path], outputs)
    return [str(p) for p in outputs]


def _predict_cell_task(item):
    cell_id, year = item
    ctx = _WORKER_CTX
    cfg = ctx["cfg"]
    cell = ctx["cells"][cell_id]
    models = ctx["models"].get((cell_id, year), [])
    try:
        prediction = celltrainer.predict_cell(
            models, ctx["features"][year], ctx["crop_mask"], cell, year,
            buffer_deg=cfg["cells.buffer_deg"])
    except celltrainer.SkipCellMonth as exc:
        return (cell_id, year), None, None, str(exc)
    peak_full = ctx["peaks"][(cell_id, year)]
    window = _window_slice(prediction.combined, peak_full)
    return (cell_id, year), prediction, window, None


def _window_slice(window_raster: Raster, full: Raster) -> Raster:
    """Cut the full-extent raster down to the window raster's extent."""
    cs = full.cell_size
    r0 = int(round((full.lat_max - window_raster.lat_max) / cs))
    c0 = int(round((window_raster.origin.lon - full.origin.lon) / cs))
    values = full.values[r0:r0 + window_raster.n_rows, c0:c0 + window_raster.n_cols]
    return Raster(origin=window_raster.origin, cell_size=cs,
                  values=values.copy(), nodata=full.nodata)


def run_predict(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.predict.mkdir(parents=True, exist_ok=True)
    cells = gridder.read_grid(paths.grid / "cells.jsonl")
    manifest = _scene_manifest(paths)
    years = [int(y) for y in manifest["years"]]
    crop_mask = read_raster(paths.scene / "crop_mask.asc")
    hconfig = harmonic_config_from(cfg)
    features = {year: load_feature_stack(cfg, year) for year in years}

    models: dict = {}
    for model_path in sorted(paths.cells.glob("model_c*_y*_m*.json")):
        cm = celltrainer.load_cell_model(model_path)
        models.setdefault((cm.cell_id, cm.year), []).append(cm)
    for key in models:
        models[key].sort(key=lambda cm: cm.month)

    # Peak-index rasters share the month window of each cell's models.
    peaks: dict = {}
    stacks = {year: harmonics.load_stack(paths.scene / f"s2_{year}.npz") for year in years}
    cells_by_id = {c.cell_id: c for c in cells}
    for (cell_id, year), cms in models.items():
        cell = cells_by_id[cell_id]
        if cfg["cells.peak_window_3mo"]:
            window = gridder.month_window(cell.optimal_month, cell.hemisphere)
        else:
            window = [cell.optimal_month]
        peaks[(cell_id, year)] = harmonics.peak_gcvi_raster(
            stacks[year], crop_mask, window, hconfig)

    tasks = sorted(models.keys())
    global _WORKER_CTX
    _WORKER_CTX = {
        "cfg": cfg,
        "cells": cells_by_id,
        "models": models,
        "features": features,
        "crop_mask": crop_mask,
        "peaks": peaks,
    }
    results = _parallel_map(_predict_cell_task, tasks, cfg.workers)
    _WORKER_CTX = {}

    outputs = []
    unprocessed = []
    for key, prediction, peak, reason in sorted(results, key=lambda r: r[0]):
        cell_id, year = key
        if prediction is None:
            unprocessed.append({"cell_id": cell_id, "year": year, "reason": reason})
            continue
        cell_dir = paths.predict / f"cell{cell_id}_y{year}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_raster(prediction.combined, cell_dir / "combined.asc")
        outputs.append(cell_dir / "combined.asc")
        for month, raster in sorted(prediction.months.items()):
            target = cell_dir / f"month_{month:02d}.asc"
            write_raster(raster, target)
            outputs.append(target)
        write_raster(peak, cell_dir / "peak_gcvi.asc")
        outputs.append(cell_dir / "peak_gcvi.asc")
        meta = {"cell_id": cell_id, "year": year, "accuracy": prediction.accuracy,
                "months": sorted(prediction.months)}
        with open(cell_dir / "meta.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, sort_keys=True, indent=2)
            fh.write("\n")
        outputs.append(cell_dir / "meta.json")
    report_path = paths.predict / "unprocessed.json"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(unprocessed, fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs.append(report_path)
    write_manifest(cfg, "predict", [paths.grid / "cells.jsonl"], outputs)
    return [str(p) for p in outputs]


def run_mosaic(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.mosaic.mkdir(parents=True, exist_ok=True)
    manifest = _scene_manifest(paths)
    years = [int(y) for y in manifest["years"]]
    outputs = []
    for year in years:
        entries = []
        peak_entries = []
        for cell_dir in sorted(paths.predict.glob(f"cell*_y{year}")):
            with open(cell_dir / "meta.json", "r", encoding="utf-8") as fh:
                meta = json.load(fh)
            combined = read_raster(cell_dir / "combined.asc")
            peak = read_raster(cell_dir / "peak_gcvi.asc")
            entries.append((combined, meta["accuracy"], meta["cell_id"]))
            peak_entries.append((peak, meta["accuracy"], meta["cell_id"]))
        if not entries:
            raise StageError(f"no cell predictions found for year {year}")
        class_mosaic = celltrainer.mosaic_rasters(entries)
        peak_mosaic = celltrainer.mosaic_rasters(peak_entries)
        quality = celltrainer.quality_layer(peak_mosaic)
        for name, raster in (("mosaic", class_mosaic), ("peak_gcvi", peak_mosaic),
                             ("quality", quality)):
            target = paths.mosaic / f"{name}_y{year}.asc"
            write_raster(raster, target)
            outputs.append(target)
    write_manifest(cfg, "mosaic", [], outputs)
    return [str(p) for p in outputs]


def run_evaluate(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.evaluation.mkdir(parents=True, exist_ok=True)
    manifest = _scene_manifest(paths)
    years = [int(y) for y in manifest["years"]]
    records = read_reference(paths.scene / "reference.jsonl")
    tall_set = frozenset(name.lower() for name in cfg["eval.tall_crops"])
    k = cfg["eval.top_k"]
    report: dict = {"config_hash": cfg.config_hash(), "years": {}}
    for year in years:
        mosaic_path = paths.mosaic / f"mosaic_y{year}.asc"
        peak_path = paths.mosaic / f"peak_gcvi_y{year}.asc"
        prediction = read_raster(mosaic_path)
        peak = read_raster(peak_path)
        year_records = [r for r in records if r.year == year] or records
        m, cm, drops = evaluator.evaluate_map(prediction, year_records, tall_set, k)

        features = load_feature_stack(cfg, year)
        local_rf = rf_config_from(cfg, derive_seed(cfg.seed, "s2local", year))
        local_mean, local_repeats = evaluator.s2_local_benchmark(
            year_records, features, local_rf,
            n_repeats=cfg["eval.n_repeats"], tall_set=tall_set, k=k,
            block_size=cfg["split.block_size"],
            train_fraction=cfg["split.train_fraction"])

        keep = set(evaluator.top_k_crops(year_records, k))
        pred_classes, ref_tall, peaks = [], [], []
        for rec in year_records:
            name = rec.crop_name.strip().lower()
            if name not in keep:
                continue
            if not prediction.contains(rec.location.lat, rec.location.lon):
                continue
            value = prediction.value_at(rec.location.lat, rec.location.lon)
            peak_value = peak.value_at(rec.location.lat, rec.location.lon)
            if value == prediction.nodata or peak_value == peak.nodata:
                continue
            pred_classes.append(HeightClass(int(value)))
            ref_tall.append(evaluator.binarize(name, tall_set) == HeightClass.TALL)
            peaks.append(peak_value)
        recalls, counts = evaluator.recall_by_gcvi_bin(pred_classes, ref_tall, peaks)

        report["years"][str(year)] = {
            "gedi_s2": {"metrics": m.to_dict(), "confusion": cm.to_dict(), "drops": drops},
            "s2_local": {"mean_metrics": local_mean.to_dict(),
                         "repeats": [r.to_dict() for r in local_repeats]},
            "recall_by_peak_gcvi": {
                "bin_edges": [e if math.isfinite(e) else None
                              for e in evaluator.DEFAULT_GCVI_BIN_EDGES],
                "recall": recalls,
                "tall_reference_counts": counts,
            },
        }
    report_path = paths.evaluation / "eval_report.json"
    with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    write_manifest(cfg, "evaluate", [paths.scene / "reference.jsonl"], [report_path])
    return [str(report_path)]


def run_aggregate(cfg: PipelineConfig) -> list:
    paths = RunPaths(cfg.out)
    paths.aggregate.mkdir(parents=True, exist_ok=True)
    manifest = _scene_manifest(paths)
    years = [int(y) for y in manifest["years"]]
    factor = int(cfg["aggregate.coarse_factor"])
    outputs = []
    summary: dict = {}
    truth_path = paths.scene / "truth.asc"
    truth = read_raster(truth_path) if truth_path.exists() else None
    for year in years:
        prediction = read_raster(paths.mosaic / f"mosaic_y{year}.asc")
        coarse = prediction.cell_size * factor
        agg = evaluator.aggregate_tall(prediction, coarse)
        target = paths.aggregate / f"tall_fraction_y{year}.asc"
        write_raster(agg, target)
        outputs.append(target)
        if truth is not None:
            truth_window = _align_to(truth, prediction)
            truth_agg = evaluator.aggregate_tall(truth_window, coarse)
            truth_target = paths.aggregate / f"truth_fraction_y{year}.asc"
            write_raster(truth_agg, truth_target)
            outputs.append(truth_target)
            summary[str(year)] = {
                "correlation": evaluator.spatial_correlation(truth_agg, agg),
                "coarse_cell_size": coarse,
            }
    summary_path = paths.aggregate / "aggregation_summary.json"
    with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    outputs.append(summary_path)
    write_manifest(cfg, "aggregate", [], outputs)
    return [str(p) for p in outputs]


def _align_to(source: Raster, template: Raster) -> Raster:
    """Window of ``source`` matching the template's extent (same lattice)."""
    cs = template.cell_size
    r0 = int(round((source.lat_max - template.lat_max) / cs))
    c0 = int(round((template.origin.lon - source.origin.lon) / cs))
    values = source.values[r0:r0 + template.n_rows, c0:c0 + template.n_cols]
    return Raster(origin=template.origin, cell_size=cs, values=values.copy(),
                  nodata=source.nodata)


def run_report(cfg: PipelineConfig) -> list:
    from . import report as report_mod

    outputs = report_mod.render_all(cfg)
    write_manifest(cfg, "report", [], outputs)
    return [str(p) for p in outputs]


_STAGE_FUNCS = {
    "synth": run_synth,
    "filter-shots": run_filter_shots,
    "train-height": run_train_height,
    "classify-shots": run_classify_shots,
    "fit-harmonics": run_fit_harmonics,
    "grid": run_grid,
    "train-cells": run_train_cells,
    "predict": run_predict,
    "mosaic": run_mosaic,
    "evaluate": run_evaluate,
    "aggregate": run_aggregate,
    "report": run_report,
}


def run_stage(name: str, cfg: PipelineConfig) -> list:
    if name == "all":
        outputs = []
        for stage in STAGES:
            outputs.extend(_STAGE_FUNCS[stage](cfg))
        return outputs
    if name not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {name!r}")
    return _STAGE_FUNCS[name](cfg)
