"""Deterministic random-forest classifier.

Used both for the 3-class shot height model and the per-cell 2-class
optical models. Training is a pure function of (features, labels, seed):
per-tree random streams come from the counter-based Philox generator keyed
by (seed, tree_index), so trees can be built in any order — or in parallel —
and still come out identical.

Split rule: Gini impurity over candidate thresholds at midpoints between
consecutive sorted unique feature values. All ties (split score, leaf vote,
ensemble vote) break toward the lowest index / lowest threshold, which makes
the whole model reproducible bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import canonical_json_bytes

_MODEL_FORMAT = "cropheight-forest"
_MODEL_VERSION = 1


class ModelFormatError(ValueError):
    """Raised when a serialized model cannot be decoded."""


@dataclass(frozen=True)
class RFConfig:
    """Forest hyperparameters.

    ``max_features`` of ``None`` means ceil(sqrt(n_features)), resolved at
    fit time. ``bootstrap`` draws n rows with replacement per tree; turning
    it off trains every tree on the full sample.
    """

    n_trees: int = 100
    max_features: int | None = None
    min_leaf: int = 1
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.max_features is not None and self.max_features < 1:
            raise ValueError("max_features must be >= 1")


@dataclass
class DecisionTree:
    """Flat array encoding: internal nodes carry (feature, threshold, children),
    leaves carry class counts. ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray     # (n_nodes,) int32, -1 for leaves
    threshold: np.ndarray   # (n_nodes,) float64
    left: np.ndarray        # (n_nodes,) int32
    right: np.ndarray       # (n_nodes,) int32
    counts: np.ndarray      # (n_nodes, n_classes) int64 class counts at node

    def predict_class_index(self, x: np.ndarray) -> np.ndarray:
        """Vote of this tree for each row of x: leaf argmax, lowest index wins ties."""
        x = np.asarray(x, dtype=np.float64)
        node = np.zeros(x.shape[0], dtype=np.int32)
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            f = feat[idx]
            go_left = x[idx, f] <= self.threshold[node[idx]]
            node[idx] = np.where(go_left, self.left[node[idx]], self.right[node[idx]])
        return np.argmax(self.counts[node], axis=1).astype(np.int32)


@dataclass
class ForestModel:
    """Immutable fitted forest; safe to share across threads."""

    config: RFConfig
    trees: list[DecisionTree]
    classes: list
    n_features: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, ForestModel):
            return NotImplemented
        return serialize(self) == serialize(other)


def _tree_rng(seed: int, tree_index: int) -> np.random.Generator:
    # Philox is counter-based: the (seed, tree) key fully determines the stream.
    key = np.array([seed % (1 << 64), tree_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _best_split(x_node: np.ndarray, y_node: np.ndarray, n_classes: int,
                candidates: np.ndarray, min_leaf: int):
    """Gini-optimal (feature, threshold) over candidate features.

    Returns (score, feature, threshold) or None when no valid split exists.
    Ties break toward the lowest feature index, then the lowest threshold;
    candidates must therefore be sorted ascending.
    """
    n = y_node.shape[0]
    onehot = np.zeros((n, n_classes), dtype=np.int64)
    onehot[np.arange(n), y_node] = 1
    best = None  # (score, feature, threshold)
    for f in candidates:
        xs_order = np.argsort(x_node[:, f], kind="stable")
        xs = x_node[xs_order, f]
        left_counts = np.cumsum(onehot[xs_order], axis=0)
        total = left_counts[-1]
        n_left = np.arange(1, n + 1, dtype=np.float64)
        n_right = n - n_left
        boundary = xs[:-1] != xs[1:]
        valid = boundary & (n_left[:-1] >= min_leaf) & (n_right[:-1] >= min_leaf)
        if not valid.any():
            continue
        cl = left_counts[:-1].astype(np.float64)
        cr = (total - left_counts[:-1]).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            gini_l = 1.0 - np.sum((cl / n_left[:-1, None]) ** 2, axis=1)
            gini_r = 1.0 - np.sum((cr / n_right[:-1, None]) ** 2, axis=1)
        score = (n_left[:-1] * gini_l + n_right[:-1] * gini_r) / n
        score[~valid] = np.inf
        i = int(np.argmin(score))  # first minimum = lowest threshold
        if best is None or score[i] < best[0]:
            thr = float((xs[i] + xs[i + 1]) / 2.0)
            best = (float(score[i]), int(f), thr)
    return best


def _grow_tree(x: np.ndarray, y: np.ndarray, n_classes: int, config: RFConfig,
               mtry: int, rng: np.random.Generator) -> DecisionTree:
    n_features = x.shape[1]
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    counts: list[np.ndarray] = []

    def new_node(idx: np.ndarray) -> int:
        node_id = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes).astype(np.int64))
        return node_id

    root_idx = np.arange(x.shape[0])
    root = new_node(root_idx)
    # Depth-first, left before right: feature subsets are drawn when a node
    # is expanded, so expansion order is part of the deterministic contract.
    stack: list[tuple[int, np.ndarray, int]] = [(root, root_idx, 0)]
    while stack:
        node_id, idx, depth = stack.pop()
        node_counts = counts[node_id]
        n_node = idx.shape[0]
        if (
            n_node < 2 * config.min_leaf
            or int(node_counts.max()) == n_node
            or (config.max_depth is not None and depth >= config.max_depth)
        ):
            continue
        if mtry >= n_features:
            cand = np.arange(n_features)
        else:
            cand = np.sort(rng.choice(n_features, size=mtry, replace=False))
        split = _best_split(x[idx], y[idx], n_classes, cand, config.min_leaf)
        if split is None:
            continue
        _, f, thr = split
        go_left = x[idx, f] <= thr
        left_idx = idx[go_left]
        right_idx = idx[~go_left]
        feature[node_id] = f
        threshold[node_id] = thr
        left_child = new_node(left_idx)
        right_child = new_node(right_idx)
        left[node_id] = left_child
        right[node_id] = right_child
        stack.append((right_child, right_idx, depth + 1))
        stack.append((left_child, left_idx, depth + 1))

    return DecisionTree(
        feature=np.array(feature, dtype=np.int32),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int32),
        right=np.array(right, dtype=np.int32),
        counts=np.array(counts, dtype=np.int64),
    )


def fit(features: np.ndarray, labels, config: RFConfig, classes: list | None = None) -> ForestModel:
    """Fit a forest; pure function of (features, labels, config.seed).

    ``classes`` fixes the class ordering (vote tie-breaks and probability
    vector layout); defaults to sorted unique labels.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = x.shape
    if n < 2:
        raise ValueError("need at least 2 training rows")
    if not np.isfinite(x).all():
        raise ValueError("features contain non-finite values")
    labels = list(labels)
    if len(labels) != n:
        raise ValueError(f"{n} feature rows but {len(labels)} labels")
    if classes is None:
        classes = sorted(set(labels))
    else:
        classes = list(classes)
        missing = set(labels) - set(classes)
        if missing:
            raise ValueError(f"labels outside declared classes: {sorted(missing)}")
    if len(set(labels)) < 2:
        raise ValueError("training data contains a single class")
    class_index = {c: i for i, c in enumerate(classes)}
    y = np.array([class_index[v] for v in labels], dtype=np.int64)

    mtry = config.max_features if config.max_features is not None else math.ceil(math.sqrt(d))
    if mtry > d:
        raise ValueError(f"max_features {mtry} exceeds n_features {d}")
    resolved = replace(config, max_features=mtry)

    trees = []
    for t in range(config.n_trees):
        rng = _tree_rng(config.seed, t)
        if config.bootstrap:
            rows = rng.integers(0, n, size=n)
        else:
            rows = np.arange(n)
        trees.append(_grow_tree(x[rows], y[rows], len(classes), resolved, mtry, rng))
    return ForestModel(config=resolved, trees=trees, classes=classes, n_features=d)


def predict_proba(model: ForestModel, feature_vector: np.ndarray) -> np.ndarray:
    """Per-class probability = exact fraction of trees voting that class."""
    return predict_proba_many(model, np.asarray(feature_vector, dtype=np.float64)[None, :])[0]


def predict_proba_many(model: ForestModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.n_features:
        raise ValueError(f"expected (*, {model.n_features}) feature matrix, got {x.shape}")
    votes = np.zeros((x.shape[0], len(model.classes)), dtype=np.int64)
    for tree in model.trees:
        idx = tree.predict_class_index(x)
        votes[np.arange(x.shape[0]), idx] += 1
    return votes / float(len(model.trees))


def predict_class(model: ForestModel, feature_vector: np.ndarray):
    """(class, confidence); argmax vote with ties broken by class order."""
    proba = predict_proba(model, feature_vector)
    i = int(np.argmax(proba))
    return model.classes[i], float(proba[i])


def predict_class_many(model: ForestModel, x: np.ndarray):
    proba = predict_proba_many(model, x)
    idx = np.argmax(proba, axis=1)
    conf = proba[np.arange(proba.shape[0]), idx]
    return [model.classes[i] for i in idx], conf


def serialize(model: ForestModel) -> bytes:
    """Canonical versioned JSON encoding."""
    obj = model_to_dict(model)
    return canonical_json_bytes(obj)


def model_to_dict(model: ForestModel) -> dict:
    return {
        "format": _MODEL_FORMAT,
        "version": _MODEL_VERSION,
        "config": {
            "n_trees": model.config.n_trees,
            "max_features": model.config.max_features,
            "min_leaf": model.config.min_leaf,
            "max_depth": model.config.max_depth,
            "seed": model.config.seed,
            "bootstrap": model.config.bootstrap,
        },
        "classes": list(model.classes),
        "n_features": model.n_features,
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "counts": t.counts.tolist(),
            }
            for t in model.trees
        ],
    }


def deserialize(data: bytes) -> ForestModel:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"cannot decode model: {exc}") from None
    return model_from_dict(obj)


def model_from_dict(obj: dict) -> ForestModel:
    if not isinstance(obj, dict) or obj.get("format") != _MODEL_FORMAT:
        raise ModelFormatError("not a forest model file")
    if obj.get("version") != _MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {obj.get('version')!r}")
    try:
        cfg = obj["config"]
        config = RFConfig(
            n_trees=cfg["n_trees"],
            max_features=cfg["max_features"],
            min_leaf=cfg["min_leaf"],
            max_depth=cfg["max_depth"],
            seed=cfg["seed"],
            bootstrap=cfg["bootstrap"],
        )
        trees = [
            DecisionTree(
                feature=np.array(t["feature"], dtype=np.int32),
                threshold=np.array(t["threshold"], dtype=np.float64),
                left=np.array(t["left"], dtype=np.int32),
                right=np.array(t["right"], dtype=np.int32),
                counts=np.array(t["counts"], dtype=np.int64),
            )
            for t in obj["trees"]
        ]
        model = ForestModel(
            config=config,
            trees=trees,
            classes=list(obj["classes"]),
            n_features=int(obj["n_features"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model payload: {exc}") from None
    if len(model.trees) != config.n_trees:
        raise ModelFormatError("tree count does not match config")
    return model
