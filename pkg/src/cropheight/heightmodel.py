"""Three-class shot height model: label generation, blocked split, training.

Labels come from a reference crop map sampled at the shot center, with one
override that always wins: any shot whose RH100 exceeds 10 m is labeled a
tree regardless of the mapped crop. Train/test splitting is done on whole
spatial blocks (0.5-degree lat/lon bins by default) so nearby shots never
straddle the split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import forest
from .core import HeightClass, LatLon, Raster
from .gedi import RH_NAMES, GediShot, ShotTable

TREE_RH100_METERS = 10.0
DEFAULT_TALL_CROPS = frozenset({"maize", "sugarcane"})


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    block_size: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction out of (0,1): {self.train_fraction}")
        if self.block_size <= 0:
            raise ValueError("block_size must be positive")


@dataclass
class HeightTrainingSet:
    """Aligned rows: 11 RH metrics, a class label, a spatial block id, a tag."""

    features: np.ndarray          # (n, 11)
    labels: list                  # n HeightClass
    block_id: np.ndarray          # (n,) int
    region_tag: list              # n str

    def __post_init__(self):
        n = self.features.shape[0]
        if self.features.shape != (n, len(RH_NAMES)):
            raise ValueError(f"features must be (n, {len(RH_NAMES)})")
        if not (len(self.labels) == n and self.block_id.shape == (n,) and len(self.region_tag) == n):
            raise ValueError("row count mismatch across columns")

    def __len__(self) -> int:
        return self.features.shape[0]

    def subset(self, mask: np.ndarray) -> "HeightTrainingSet":
        idx = np.nonzero(mask)[0]
        return HeightTrainingSet(
            features=self.features[idx],
            labels=[self.labels[i] for i in idx],
            block_id=self.block_id[idx],
            region_tag=[self.region_tag[i] for i in idx],
        )


def block_index(location: LatLon, block_size: float = 0.5) -> int:
    """Flat index of the lat/lon bin containing a point."""
    n_lon = int(round(360.0 / block_size))
    row = int(math.floor((location.lat + 90.0) / block_size))
    col = int(math.floor((location.lon + 180.0) / block_size))
    return row * n_lon + col


def assign_label(shot: GediShot, reference_crop: str,
                 tall_crops: frozenset = DEFAULT_TALL_CROPS) -> HeightClass:
    """Tree if RH100 > 10 m (checked first), else tall/short by crop name."""
    if not reference_crop:
        raise ValueError(f"shot {shot.id}: missing reference crop label")
    if shot.rh100 > TREE_RH100_METERS:
        return HeightClass.TREE
    if reference_crop.strip().lower() in tall_crops:
        return HeightClass.TALL
    return HeightClass.SHORT


def build_training_set(shots: ShotTable, reference: Raster, crop_names: dict,
                       tall_crops: frozenset = DEFAULT_TALL_CROPS,
                       block_size: float = 0.5,
                       region_tag: str = "scene") -> HeightTrainingSet:
    """Label shots from a crop-id raster (``crop_names`` maps id to name).

    Shots on nodata reference pixels are skipped.
    """
    rows = []
    labels = []
    blocks = []
    for shot in shots:
        if not reference.contains(shot.location.lat, shot.location.lon):
            continue
        code = reference.value_at(shot.location.lat, shot.location.lon)
        if code == reference.nodata:
            continue
        name = crop_names.get(int(code))
        if name is None:
            continue
        rows.append(shot.rh)
        labels.append(assign_label(shot, name, tall_crops))
        blocks.append(block_index(shot.location, block_size))
    if not rows:
        raise ValueError("no shots overlap the reference raster")
    return HeightTrainingSet(
        features=np.array(rows),
        labels=labels,
        block_id=np.array(blocks, dtype=np.int64),
        region_tag=[region_tag] * len(rows),
    )


def split_blocks(block_id: np.ndarray, spec: SplitSpec) -> tuple[set, set]:
    """Assign whole blocks to train/test.

    Blocks are shuffled with the split seed and taken greedily into the
    training side until its cumulative row count reaches the target
    fraction; at least one block is always left for test.
    """
    unique, counts = np.unique(block_id, return_counts=True)
    if unique.size < 2:
        raise ValueError("need at least 2 spatial blocks to split")
    rng = np.random.Generator(np.random.Philox(key=np.array([spec.seed, 0x5b17], dtype=np.uint64)))
    order = rng.permutation(unique.size)
    target = spec.train_fraction * counts.sum()
    train: set = set()
    taken = 0
    for pos in order:
        if len(train) == unique.size - 1:
            break
        train.add(int(unique[pos]))
        taken += int(counts[pos])
        if taken >= target:
            break
    test = {int(b) for b in unique} - train
    return train, test


def spatial_block_split(dataset: HeightTrainingSet,
                        spec: SplitSpec) -> tuple[HeightTrainingSet, HeightTrainingSet]:
    train_blocks, _ = split_blocks(dataset.block_id, spec)
    in_train = np.array([int(b) in train_blocks for b in dataset.block_id])
    return dataset.subset(in_train), dataset.subset(~in_train)


def train_height_model(train: HeightTrainingSet, rf_config: forest.RFConfig) -> forest.ForestModel:
    """Fit the 3-class forest on the 11 RH metrics."""
    present = set(train.labels)
    missing = [c.label for c in HeightClass if c not in present]
    if missing:
        raise ValueError(f"training data is missing classes: {missing}")
    return forest.fit(
        train.features,
        [int(label) for label in train.labels],
        rf_config,
        classes=[int(c) for c in HeightClass],
    )


def classify_shots(model: forest.ForestModel, shots: ShotTable) -> ShotTable:
    """Annotate every shot with the model class and its vote-fraction confidence."""
    if not shots:
        return []
    x = np.stack([s.rh for s in shots])
    classes, confidence = forest.predict_class_many(model, x)
    return [
        replace(shot, pred_class=HeightClass(int(cls)), confidence=float(conf))
        for shot, cls, conf in zip(shots, classes, confidence)
    ]


def heldout_accuracy(model: forest.ForestModel, test: HeightTrainingSet) -> float:
    classes, _ = forest.predict_class_many(model, test.features)
    truth = np.array([int(label) for label in test.labels])
    return float(np.mean(np.array(classes) == truth))
