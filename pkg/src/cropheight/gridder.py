"""Analysis grid: 5-degree cells, cropland gating, and optimal-month selection.

Cells are anchored at multiples of the cell size in both axes and clipped to
the lidar latitude coverage (51.6 degrees either side of the equator). A
cell is retained when more than 5% of the valid mask pixels inside it are
cropland. Monthly histograms pool the classified shots of all processing
years; the optimal month is the one with the highest tall fraction among
months with enough shots.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import DateStamp, HeightClass, LatLon, Raster
from .gedi import ShotTable

NORTH = "north"
SOUTH = "south"

# Months in within-season order: calendar year in the north, July-June in the south.
SEASON_MONTHS = {
    NORTH: tuple(range(1, 13)),
    SOUTH: tuple(list(range(7, 13)) + list(range(1, 7))),
}


@dataclass(frozen=True)
class GridSpec:
    cell_size: float = 5.0
    lat_min: float = -51.6
    lat_max: float = 51.6
    cropland_gate: float = 0.05
    tall_gate: float = 0.04
    min_month_shots: int = 20

    def __post_init__(self):
        if not 0.0 < self.cropland_gate < 1.0 or not 0.0 < self.tall_gate < 1.0:
            raise ValueError("gates must be in (0, 1)")
        if 360.0 % self.cell_size != 0:
            raise ValueError(f"cell_size must divide 360: {self.cell_size}")


@dataclass
class MonthHistogram:
    """Shot counts per calendar month and height class, pooled over years."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((12, 3), dtype=np.int64))

    def add(self, month: int, height_class: HeightClass, n: int = 1) -> None:
        self.counts[month - 1, int(height_class)] += n

    def month_total(self, month: int) -> int:
        return int(self.counts[month - 1].sum())

    def tall_fraction(self, month: int) -> float | None:
        total = self.month_total(month)
        if total == 0:
            return None
        return float(self.counts[month - 1, int(HeightClass.TALL)]) / total

    def total(self) -> int:
        return int(self.counts.sum())

    def overall_tall_fraction(self) -> float | None:
        total = self.total()
        if total == 0:
            return None
        return float(self.counts[:, int(HeightClass.TALL)].sum()) / total


@dataclass
class GridCell:
    cell_id: int
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cropland_fraction: float
    hemisphere: str
    monthly_hist: MonthHistogram = field(default_factory=MonthHistogram)
    optimal_month: int | None = None

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat < self.lat_max and self.lon_min <= lon < self.lon_max

    def buffered_bounds(self, buffer_deg: float) -> tuple[float, float, float, float]:
        return (self.lat_min - buffer_deg, self.lat_max + buffer_deg,
                self.lon_min - buffer_deg, self.lon_max + buffer_deg)


def cell_id_for(lat_anchor: float, lon_anchor: float, cell_size: float) -> int:
    """Deterministic id from the cell's unclipped anchor (multiples of cell_size)."""
    n_lon = int(round(360.0 / cell_size))
    row = int(round((lat_anchor + 90.0) / cell_size))
    col = int(round((lon_anchor + 180.0) / cell_size))
    return row * n_lon + col


def build_grid(crop_mask: Raster, spec: GridSpec = GridSpec()) -> list[GridCell]:
    """Cells overlapping the mask with cropland fraction above the gate."""
    vals = crop_mask.values
    bad = ~np.isin(vals, (0.0, 1.0, crop_mask.nodata))
    if bad.any():
        example = vals[bad].flat[0]
        raise ValueError(f"crop mask is not binary: contains {example}")

    cells: list[GridCell] = []
    size = spec.cell_size
    lat_lo_anchor = math.floor(crop_mask.origin.lat / size) * size
    lon_lo_anchor = math.floor(crop_mask.origin.lon / size) * size
    lat_anchor = lat_lo_anchor
    while lat_anchor < crop_mask.lat_max:
        lon_anchor = lon_lo_anchor
        while lon_anchor < crop_mask.lon_max:
            cell = _make_cell(crop_mask, spec, lat_anchor, lon_anchor)
            if cell is not None:
                cells.append(cell)
            lon_anchor += size
        lat_anchor += size
    cells.sort(key=lambda c: c.cell_id)
    return cells


def _make_cell(crop_mask: Raster, spec: GridSpec,
               lat_anchor: float, lon_anchor: float) -> GridCell | None:
    lat0 = max(lat_anchor, spec.lat_min)
    lat1 = min(lat_anchor + spec.cell_size, spec.lat_max)
    if lat1 <= lat0:
        return None
    lon0, lon1 = lon_anchor, lon_anchor + spec.cell_size
    window = _pixel_window(crop_mask, lat0, lat1, lon0, lon1)
    if window is None:
        return None
    r0, r1, c0, c1 = window
    block = crop_mask.values[r0:r1, c0:c1]
    valid = block != crop_mask.nodata
    n_valid = int(valid.sum())
    if n_valid == 0:
        return None
    fraction = float((block[valid] == 1).sum()) / n_valid
    if fraction <= spec.cropland_gate:
        return None
    center_lat = (lat0 + lat1) / 2.0
    return GridCell(
        cell_id=cell_id_for(lat_anchor, lon_anchor, spec.cell_size),
        lat_min=lat0,
        lat_max=lat1,
        lon_min=lon0,
        lon_max=lon1,
        cropland_fraction=fraction,
        hemisphere=NORTH if center_lat >= 0 else SOUTH,
    )


def _pixel_window(raster: Raster, lat0: float, lat1: float,
                  lon0: float, lon1: float) -> tuple[int, int, int, int] | None:
    """Half-open (row0, row1, col0, col1) window covering the bounds, or None."""
    eps = 1e-9
    c0 = max(0, int(math.ceil((lon0 - raster.origin.lon) / raster.cell_size - eps)))
    c1 = min(raster.n_cols, int(math.floor((lon1 - raster.origin.lon) / raster.cell_size + eps)))
    rb0 = max(0, int(math.ceil((lat0 - raster.origin.lat) / raster.cell_size - eps)))
    rb1 = min(raster.n_rows, int(math.floor((lat1 - raster.origin.lat) / raster.cell_size + eps)))
    if c1 <= c0 or rb1 <= rb0:
        return None
    # Rows count from the north; convert the bottom-up range.
    r0 = raster.n_rows - rb1
    r1 = raster.n_rows - rb0
    return r0, r1, c0, c1


def tall_fraction_by_month(cell: GridCell, shots: ShotTable) -> MonthHistogram:
    """Histogram classified, filtered shots inside the cell by calendar month.

    The tall fraction denominator includes tree shots: fractions are of all
    classified cropland shots, keeping the short/tall/tree percentages
    commensurable.
    """
    hist = MonthHistogram()
    for shot in shots:
        if shot.pred_class is None:
            raise ValueError(f"shot {shot.id} is unclassified")
        if cell.contains(shot.location.lat, shot.location.lon):
            hist.add(shot.date.month, shot.pred_class)
    return hist


def select_optimal_month(hist: MonthHistogram, hemisphere: str = NORTH,
                         min_month_shots: int = 20) -> int | None:
    """Month with the highest tall fraction among sufficiently sampled months.

    Ties resolve to the earliest month in season order; returns None when no
    month has enough shots.
    """
    best_month = None
    best_fraction = -1.0
    for month in SEASON_MONTHS[hemisphere]:
        if hist.month_total(month) < min_month_shots:
            continue
        fraction = hist.tall_fraction(month)
        if fraction > best_fraction:
            best_fraction = fraction
            best_month = month
    return best_month


def month_window(optimal_month: int, hemisphere: str = NORTH) -> list[int]:
    """Up to three months centered on the optimal month, in season order.

    Neighbors that fall outside the season window are dropped, so the first
    and last season months yield two-month windows.
    """
    months = SEASON_MONTHS[hemisphere]
    idx = months.index(optimal_month)
    window = []
    for j in (idx - 1, idx, idx + 1):
        if 0 <= j < len(months):
            window.append(months[j])
    return window


def season_date_range(year: int, hemisphere: str) -> tuple[DateStamp, DateStamp]:
    """Half-open [start, end) season window for a processing year."""
    if hemisphere == NORTH:
        return DateStamp(year, 1, 1), DateStamp(year + 1, 1, 1)
    if hemisphere == SOUTH:
        return DateStamp(year, 7, 1), DateStamp(year + 1, 7, 1)
    raise ValueError(f"unknown hemisphere {hemisphere!r}")


def season_year_for(date: DateStamp, hemisphere: str) -> int:
    """Processing year whose season window contains the date."""
    if hemisphere == NORTH:
        return date.year
    return date.year if date.month >= 7 else date.year - 1


def populate_cells(cells: list[GridCell], shots: ShotTable,
                   spec: GridSpec = GridSpec()) -> list[GridCell]:
    """Fill monthly histograms and optimal months for every cell."""
    for cell in cells:
        cell.monthly_hist = tall_fraction_by_month(cell, shots)
        cell.optimal_month = select_optimal_month(
            cell.monthly_hist, cell.hemisphere, spec.min_month_shots)
    return cells


def write_grid(cells: list[GridCell], path) -> None:
    """One JSON object per cell: bounds, fraction, histogram, optimal month."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cell in cells:
            obj = {
                "cell_id": cell.cell_id,
                "lat_min": cell.lat_min,
                "lat_max": cell.lat_max,
                "lon_min": cell.lon_min,
                "lon_max": cell.lon_max,
                "cropland_fraction": cell.cropland_fraction,
                "hemisphere": cell.hemisphere,
                "monthly": {str(m): cell.monthly_hist.counts[m - 1].tolist()
                            for m in range(1, 13)},
                "optimal_month": cell.optimal_month,
            }
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def read_grid(path) -> list[GridCell]:
    cells: list[GridCell] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            hist = MonthHistogram()
            for m_str, triple in obj["monthly"].items():
                hist.counts[int(m_str) - 1] = triple
            cells.append(GridCell(
                cell_id=obj["cell_id"],
                lat_min=obj["lat_min"],
                lat_max=obj["lat_max"],
                lon_min=obj["lon_min"],
                lon_max=obj["lon_max"],
                cropland_fraction=obj["cropland_fraction"],
                hemisphere=obj["hemisphere"],
                monthly_hist=hist,
                optimal_month=obj["optimal_month"],
            ))
    return cells
