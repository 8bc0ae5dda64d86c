"""Map evaluation: binarized metrics, local benchmark, coarse aggregation.

Reference crop names are reduced to the ten most common, binarized against
the tall-crop set (maize and sugarcane by default), and compared with the
predicted class at the containing pixel. The tall class is the positive
class everywhere. Metrics with a zero denominator are reported as an
explicit undefined marker (None), never silently coerced to zero.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import forest
from .core import HeightClass, Raster
from .harmonics import FeatureStack
from .heightmodel import SplitSpec, block_index, split_blocks

DEFAULT_TALL_SET = frozenset({"maize", "sugarcane"})
DEFAULT_GCVI_BIN_EDGES = (-math.inf, 2.0, 3.0, 4.0, math.inf)


@dataclass
class ConfusionMatrix:
    """Binary counts with tall as the positive class."""

    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def swapped(self) -> "ConfusionMatrix":
        """Counts with the class roles exchanged (short as positive)."""
        return ConfusionMatrix(tp=self.tn, fp=self.fn, tn=self.tp, fn=self.fp)

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn}


@dataclass
class EvalMetrics:
    accuracy: float | None
    f1_short: float | None
    f1_tall: float | None
    precision_short: float | None
    precision_tall: float | None
    recall_short: float | None
    recall_tall: float | None
    kappa: float | None

    def to_dict(self) -> dict:
        # Key order mirrors the reporting layout: accuracy, F1, precision,
        # recall pairs (short, tall), then kappa.
        return {
            "accuracy": self.accuracy,
            "f1_short": self.f1_short,
            "f1_tall": self.f1_tall,
            "precision_short": self.precision_short,
            "precision_tall": self.precision_tall,
            "recall_short": self.recall_short,
            "recall_tall": self.recall_tall,
            "kappa": self.kappa,
        }


def top_k_crops(records: list, k: int = 10) -> list:
    """The k most frequent crop names; ties broken lexicographically."""
    if not records:
        raise ValueError("no reference records")
    counts = Counter(rec.crop_name.strip().lower() for rec in records)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [name for name, _ in ranked[:k]]


def binarize(crop_name: str, tall_set: frozenset = DEFAULT_TALL_SET) -> HeightClass:
    if crop_name.strip().lower() in tall_set:
        return HeightClass.TALL
    return HeightClass.SHORT


def confusion(pred: list, ref: list) -> ConfusionMatrix:
    if len(pred) != len(ref):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(ref)} references")
    cm = ConfusionMatrix()
    for p, r in zip(pred, ref):
        if p == HeightClass.TALL:
            if r == HeightClass.TALL:
                cm.tp += 1
            else:
                cm.fp += 1
        else:
            if r == HeightClass.TALL:
                cm.fn += 1
            else:
                cm.tn += 1
    return cm


def _precision(tp: int, fp: int) -> float | None:
    return tp / (tp + fp) if tp + fp > 0 else None


def _recall(tp: int, fn: int) -> float | None:
    return tp / (tp + fn) if tp + fn > 0 else None


def _f1(precision: float | None, recall: float | None) -> float | None:
    if precision is None or recall is None or precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def metrics(cm: ConfusionMatrix) -> EvalMetrics:
    """Accuracy, per-class precision/recall/F1, and chance-corrected kappa."""
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = (cm.tp + cm.tn) / total
    p_tall = _precision(cm.tp, cm.fp)
    r_tall = _recall(cm.tp, cm.fn)
    swapped = cm.swapped()
    p_short = _precision(swapped.tp, swapped.fp)
    r_short = _recall(swapped.tp, swapped.fn)
    p_e = ((cm.tp + cm.fp) * (cm.tp + cm.fn)
           + (cm.fn + cm.tn) * (cm.fp + cm.tn)) / (total * total)
    kappa = (accuracy - p_e) / (1.0 - p_e) if p_e != 1.0 else None
    return EvalMetrics(
        accuracy=accuracy,
        f1_short=_f1(p_short, r_short),
        f1_tall=_f1(p_tall, r_tall),
        precision_short=p_short,
        precision_tall=p_tall,
        recall_short=r_short,
        recall_tall=r_tall,
        kappa=kappa,
    )


def evaluate_map(prediction: Raster, records: list,
                 tall_set: frozenset = DEFAULT_TALL_SET, k: int = 10):
    """Compare the class raster with reference points.

    Returns (EvalMetrics, ConfusionMatrix, drops) where drops counts points
    excluded as outside the top-k crops, off the raster, or on nodata pixels.
    """
    keep = set(top_k_crops(records, k))
    drops = {"not_top_k": 0, "outside_extent": 0, "nodata_pixel": 0}
    pred_classes = []
    ref_classes = []
    for rec in records:
        name = rec.crop_name.strip().lower()
        if name not in keep:
            drops["not_top_k"] += 1
            continue
        if not prediction.contains(rec.location.lat, rec.location.lon):
            drops["outside_extent"] += 1
            continue
        value = prediction.value_at(rec.location.lat, rec.location.lon)
        if value == prediction.nodata:
            drops["nodata_pixel"] += 1
            continue
        pred_classes.append(HeightClass(int(value)))
        ref_classes.append(binarize(name, tall_set))
    if not pred_classes:
        raise ValueError("no usable reference points on the prediction raster")
    cm = confusion(pred_classes, ref_classes)
    return metrics(cm), cm, drops


def _mean_defined(values: list) -> float | None:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def s2_local_benchmark(records: list, features: FeatureStack, rf_config: forest.RFConfig,
                       n_repeats: int = 5, tall_set: frozenset = DEFAULT_TALL_SET,
                       k: int = 10, block_size: float = 0.5,
                       train_fraction: float = 0.8):
    """Benchmark: forests trained on true labels at the reference locations.

    Repeats block-wise train/test splits with distinct seeds and averages the
    metrics over repeats. Returns (mean EvalMetrics, per-repeat EvalMetrics).
    """
    keep = set(top_k_crops(records, k))
    n_rows, n_cols = features.validity.shape
    top_lat = features.origin.lat + n_rows * features.cell_size
    xs, ys, blocks = [], [], []
    for rec in records:
        name = rec.crop_name.strip().lower()
        if name not in keep:
            continue
        r = int((top_lat - rec.location.lat) / features.cell_size)
        c = int((rec.location.lon - features.origin.lon) / features.cell_size)
        if not (0 <= r < n_rows and 0 <= c < n_cols):
            continue
        vec = features.vector_at(r, c)
        if vec is None:
            continue
        xs.append(vec)
        ys.append(int(binarize(name, tall_set)))
        blocks.append(block_index(rec.location, block_size))
    if not xs:
        raise ValueError("no reference points with valid features")
    x = np.array(xs)
    y = np.array(ys)
    block_id = np.array(blocks, dtype=np.int64)

    repeats = []
    for rep in range(n_repeats):
        spec = SplitSpec(train_fraction=train_fraction, block_size=block_size,
                         seed=rf_config.seed + rep)
        train_blocks, _ = split_blocks(block_id, spec)
        in_train = np.isin(block_id, list(train_blocks))
        if len(set(y[in_train].tolist())) < 2 or not (~in_train).any():
            raise ValueError(f"repeat {rep}: degenerate block split")
        model = forest.fit(
            x[in_train], y[in_train].tolist(),
            forest.RFConfig(
                n_trees=rf_config.n_trees, max_features=rf_config.max_features,
                min_leaf=rf_config.min_leaf, max_depth=rf_config.max_depth,
                seed=rf_config.seed + rep, bootstrap=rf_config.bootstrap),
            classes=[int(HeightClass.SHORT), int(HeightClass.TALL)])
        pred, _ = forest.predict_class_many(model, x[~in_train])
        cm = confusion([HeightClass(int(p)) for p in pred],
                       [HeightClass(int(t)) for t in y[~in_train]])
        repeats.append(metrics(cm))
    fields = EvalMetrics.__dataclass_fields__
    mean = EvalMetrics(**{f: _mean_defined([getattr(m, f) for m in repeats]) for f in fields})
    return mean, repeats


def aggregate_tall(prediction: Raster, coarse_cell_size: float) -> Raster:
    """Tall fraction per coarse cell: tall / (tall + short); no crop -> nodata."""
    ratio = coarse_cell_size / prediction.cell_size
    factor = int(round(ratio))
    if abs(ratio - factor) > 1e-6 or factor < 1:
        raise ValueError(
            f"coarse cell size {coarse_cell_size} is not an integer multiple "
            f"of {prediction.cell_size}")
    n_rows = math.ceil(prediction.n_rows / factor)
    n_cols = math.ceil(prediction.n_cols / factor)
    out = np.full((n_rows, n_cols), -9999.0)
    vals = prediction.values
    for i in range(n_rows):
        # Coarse rows anchor at the raster's lower-left corner.
        r1 = prediction.n_rows - i * factor
        r0 = max(0, r1 - factor)
        for j in range(n_cols):
            c0 = j * factor
            block = vals[r0:r1, c0:c0 + factor]
            tall = int((block == int(HeightClass.TALL)).sum())
            short = int((block == int(HeightClass.SHORT)).sum())
            if tall + short > 0:
                out[n_rows - 1 - i, j] = tall / (tall + short)
    return Raster(origin=prediction.origin, cell_size=coarse_cell_size,
                  values=out, nodata=-9999.0)


def spatial_correlation(grid_a: Raster, grid_b: Raster) -> float:
    """Pearson correlation over cells valid in both grids."""
    if grid_a.values.shape != grid_b.values.shape:
        raise ValueError("grids have different shapes")
    if grid_a.cell_size != grid_b.cell_size or grid_a.origin != grid_b.origin:
        raise ValueError("grids are not aligned")
    mask = grid_a.valid_mask() & grid_b.valid_mask()
    a = grid_a.values[mask]
    b = grid_b.values[mask]
    if a.size < 2:
        raise ValueError("fewer than 2 co-valid cells")
    if np.std(a) == 0 or np.std(b) == 0:
        raise ValueError("zero variance in a grid")
    return float(np.corrcoef(a, b)[0, 1])


def recall_by_gcvi_bin(pred_classes, ref_is_tall, peak_values,
                       bin_edges=DEFAULT_GCVI_BIN_EDGES):
    """Tall recall within left-open peak-GCVI bins.

    Inputs are aligned sequences; returns (recalls, tall_counts) per bin with
    None marking bins that contain no tall reference samples.
    """
    pred = np.asarray([int(p) for p in pred_classes])
    ref = np.asarray(ref_is_tall, dtype=bool)
    peak = np.asarray(peak_values, dtype=np.float64)
    if not (pred.shape == ref.shape == peak.shape):
        raise ValueError("inputs must be aligned")
    edges = list(bin_edges)
    recalls = []
    counts = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = ref & (peak > lo) & (peak <= hi)
        n_tall = int(in_bin.sum())
        counts.append(n_tall)
        if n_tall == 0:
            recalls.append(None)
        else:
            recalls.append(float(np.mean(pred[in_bin] == int(HeightClass.TALL))))
    return recalls, counts
