"""Per-cell optical models: training on shot labels, prediction, mosaicking.

One 2-class model is trained per (grid cell, season year, window month) on
the confident filtered shots inside the cell plus its buffer; tree-class
shots are excluded because the lidar footprint is far larger than an optical
pixel and tree labels are unreliable there. Monthly predictions combine as
tall-if-any-month. Buffered cell predictions are mosaicked by held-out
accuracy, ties to the lower cell id.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import forest
from .core import CODE_NODATA, HeightClass, LatLon, Raster, derive_seed
from .gedi import ShotTable
from .gridder import GridCell, season_date_range
from .harmonics import FeatureStack

DEFAULT_BUFFER_DEG = 0.5
DEFAULT_MIN_TRAIN_SHOTS = 50
GCVI_QUALITY_THRESHOLD = 4.0


class SkipCellMonth(RuntimeError):
    """Cell-month cannot be trained; the reason lands in the skip report."""


@dataclass
class CellMonthModel:
    cell_id: int
    year: int
    month: int
    model: forest.ForestModel      # 2-class short/tall forest
    heldout_accuracy: float
    n_train_shots: int


@dataclass
class CellPrediction:
    """Class rasters over a cell plus its buffer, clipped to the feature extent."""

    cell_id: int
    year: int
    combined: Raster               # short/tall/nodata codes
    months: dict                   # month -> class Raster
    accuracy: float                # mean held-out accuracy over used months


def date_in_cell_month(date, year: int, month: int, hemisphere: str) -> bool:
    start, end = season_date_range(year, hemisphere)
    return start <= date < end and date.month == month


def build_training_set(cell: GridCell, year: int, month: int, shots: ShotTable,
                       features: FeatureStack,
                       buffer_deg: float = DEFAULT_BUFFER_DEG,
                       min_train_shots: int = DEFAULT_MIN_TRAIN_SHOTS):
    """Feature matrix and short/tall labels for one cell-month.

    Tree-class shots and shots on invalid-feature pixels are dropped.
    Raises SkipCellMonth when fewer than ``min_train_shots`` rows remain or a
    class is absent.
    """
    lat0, lat1, lon0, lon1 = cell.buffered_bounds(buffer_deg)
    n_rows, n_cols = features.validity.shape
    rows = []
    labels = []
    for shot in shots:
        if shot.pred_class is None:
            raise ValueError(f"shot {shot.id} is unclassified")
        if shot.pred_class == HeightClass.TREE:
            continue
        loc = shot.location
        if not (lat0 <= loc.lat < lat1 and lon0 <= loc.lon < lon1):
            continue
        if not date_in_cell_month(shot.date, year, month, cell.hemisphere):
            continue
        r = int((features.origin.lat + n_rows * features.cell_size - loc.lat)
                / features.cell_size)
        c = int((loc.lon - features.origin.lon) / features.cell_size)
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            continue
        vec = features.vector_at(r, c)
        if vec is None:
            continue
        rows.append(vec)
        labels.append(int(shot.pred_class))
    if len(rows) < min_train_shots:
        raise SkipCellMonth(
            f"cell {cell.cell_id} {year}-{month:02d}: {len(rows)} usable shots "
            f"< {min_train_shots}")
    y = np.array(labels)
    if len(set(labels)) < 2:
        only = HeightClass(labels[0]).label
        raise SkipCellMonth(
            f"cell {cell.cell_id} {year}-{month:02d}: single class ({only})")
    return np.array(rows), y


def train_cell_month(x: np.ndarray, y: np.ndarray, rf_config: forest.RFConfig,
                     cell_id: int = 0, year: int = 0, month: int = 0) -> CellMonthModel:
    """Fit on a seeded 80% shot split; accuracy comes from the held-out 20%."""
    n = x.shape[0]
    rng = np.random.Generator(np.random.Philox(key=np.array([rf_config.seed, 0xce11], dtype=np.uint64)))
    order = rng.permutation(n)
    n_test = max(1, int(round(0.2 * n)))
    test_idx = order[:n_test]
    train_idx = order[n_test:]
    if len(set(y[train_idx].tolist())) < 2:
        raise SkipCellMonth(
            f"cell {cell_id} {year}-{month:02d}: holdout split left one class")
    model = forest.fit(x[train_idx], y[train_idx].tolist(), rf_config,
                       classes=[int(HeightClass.SHORT), int(HeightClass.TALL)])
    pred, _ = forest.predict_class_many(model, x[test_idx])
    accuracy = float(np.mean(np.array(pred) == y[test_idx]))
    return CellMonthModel(cell_id=cell_id, year=year, month=month, model=model,
                          heldout_accuracy=accuracy, n_train_shots=int(train_idx.size))


def cell_month_seed(base_seed: int, cell_id: int, year: int, month: int) -> int:
    """Documented seed derivation so parallel and serial runs agree."""
    return derive_seed(base_seed, "cell", cell_id, year, month)


def predict_cell(models: list, features: FeatureStack, crop_mask: Raster,
                 cell: GridCell, year: int,
                 buffer_deg: float = DEFAULT_BUFFER_DEG) -> CellPrediction:
    """Predict the cell's buffered extent; combine months as tall-if-any.

    Off-crop and invalid-feature pixels are nodata. At least one month model
    must be available.
    """
    if not models:
        raise SkipCellMonth(f"cell {cell.cell_id} {year}: no month models")
    lat0, lat1, lon0, lon1 = cell.buffered_bounds(buffer_deg)
    n_rows, n_cols = features.validity.shape
    cs = features.cell_size
    top_lat = features.origin.lat + n_rows * cs
    r0 = max(0, int(math.floor((top_lat - lat1) / cs)))
    r1 = min(n_rows, int(math.ceil((top_lat - lat0) / cs)))
    c0 = max(0, int(math.floor((lon0 - features.origin.lon) / cs)))
    c1 = min(n_cols, int(math.ceil((lon1 - features.origin.lon) / cs)))
    if r1 <= r0 or c1 <= c0:
        raise SkipCellMonth(f"cell {cell.cell_id} {year}: no feature coverage")

    window_origin = LatLon(top_lat - r1 * cs, features.origin.lon + c0 * cs)
    predictable = ((features.validity[r0:r1, c0:c1] == 1)
                   & (crop_mask.values[r0:r1, c0:c1] == 1))
    rows, cols = np.nonzero(predictable)
    x = features.data[:, r0 + rows, c0 + cols].T

    month_rasters = {}
    any_tall = np.zeros(rows.shape[0], dtype=bool)
    for cm in models:
        classes, _ = forest.predict_class_many(cm.model, x)
        codes = np.array([int(c) for c in classes])
        any_tall |= codes == int(HeightClass.TALL)
        values = np.full((r1 - r0, c1 - c0), float(CODE_NODATA))
        values[rows, cols] = codes
        month_rasters[cm.month] = Raster(origin=window_origin, cell_size=cs,
                                         values=values, nodata=float(CODE_NODATA))
    combined_values = np.full((r1 - r0, c1 - c0), float(CODE_NODATA))
    combined_values[rows, cols] = np.where(any_tall, int(HeightClass.TALL),
                                           int(HeightClass.SHORT))
    combined = Raster(origin=window_origin, cell_size=cs, values=combined_values,
                      nodata=float(CODE_NODATA))
    accuracy = float(np.mean([cm.heldout_accuracy for cm in models]))
    return CellPrediction(cell_id=cell.cell_id, year=year, combined=combined,
                          months=month_rasters, accuracy=accuracy)


def _check_aligned(rasters: list) -> float:
    cs = rasters[0].cell_size
    ref = rasters[0].origin
    for r in rasters[1:]:
        if abs(r.cell_size - cs) > 1e-12:
            raise ValueError("mosaic inputs have differing cell sizes")
        for delta in ((r.origin.lat - ref.lat) / cs, (r.origin.lon - ref.lon) / cs):
            if abs(delta - round(delta)) > 1e-6:
                raise ValueError("mosaic inputs are not on a shared pixel lattice")
    return cs


def mosaic_rasters(entries: list) -> Raster:
    """Merge (raster, accuracy, cell_id) entries; best accuracy wins per pixel.

    Ties go to the lower cell id. Painting order makes the result independent
    of input order: entries are sorted worst-first so better cells overwrite.
    """
    if not entries:
        raise ValueError("nothing to mosaic")
    rasters = [e[0] for e in entries]
    cs = _check_aligned(rasters)
    nodata = rasters[0].nodata
    lat0 = min(r.origin.lat for r in rasters)
    lon0 = min(r.origin.lon for r in rasters)
    lat1 = max(r.lat_max for r in rasters)
    lon1 = max(r.lon_max for r in rasters)
    n_rows = int(round((lat1 - lat0) / cs))
    n_cols = int(round((lon1 - lon0) / cs))
    out = np.full((n_rows, n_cols), nodata)
    # Ascending accuracy; equal accuracies paint the lower cell_id last.
    ordered = sorted(entries, key=lambda e: (e[1], -e[2]))
    for raster, _, _ in ordered:
        rr0 = int(round((lat1 - raster.lat_max) / cs))
        cc0 = int(round((raster.origin.lon - lon0) / cs))
        out[rr0:rr0 + raster.n_rows, cc0:cc0 + raster.n_cols] = raster.values
    return Raster(origin=LatLon(lat0, lon0), cell_size=cs, values=out, nodata=nodata)


def mosaic(cell_predictions: list) -> Raster:
    """Combined class mosaic over all predicted cells."""
    entries = [(p.combined, p.accuracy, p.cell_id) for p in cell_predictions]
    return mosaic_rasters(entries)


def quality_layer(peak_gcvi_raster: Raster) -> Raster:
    """Flag raster: 1 where peak GCVI < 4, 0 otherwise, nodata propagated."""
    vals = peak_gcvi_raster.values
    valid = vals != peak_gcvi_raster.nodata
    flags = np.where(valid, np.where(vals < GCVI_QUALITY_THRESHOLD, 1.0, 0.0),
                     float(CODE_NODATA))
    return Raster(origin=peak_gcvi_raster.origin, cell_size=peak_gcvi_raster.cell_size,
                  values=flags, nodata=float(CODE_NODATA))


def save_cell_model(cm: CellMonthModel, path) -> None:
    obj = {
        "cell_id": cm.cell_id,
        "year": cm.year,
        "month": cm.month,
        "heldout_accuracy": cm.heldout_accuracy,
        "n_train_shots": cm.n_train_shots,
        "forest": forest.model_to_dict(cm.model),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_cell_model(path) -> CellMonthModel:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return CellMonthModel(
        cell_id=obj["cell_id"],
        year=obj["year"],
        month=obj["month"],
        model=forest.model_from_dict(obj["forest"]),
        heldout_accuracy=obj["heldout_accuracy"],
        n_train_shots=obj["n_train_shots"],
    )
