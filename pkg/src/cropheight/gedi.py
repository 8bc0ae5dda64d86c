"""Lidar shot records, quality filtering, and terrain slope sampling.

Shots are kept only when all of these hold: quality flag set, zero degrade
flag, beam-day mean view angle at or above the cutoff (default 1.5 rad), and
terrain slope at or below the cutoff (default 5 degrees). Thresholds are
closed on the keep side. The view-angle filter operates on per-(beam, day)
mean angles rather than individual shots; per-shot filtering is available as
a config switch for synthetic experiments.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    DateStamp,
    HeightClass,
    LatLon,
    Raster,
    TableFormatError,
    fmt_number,
    parse_date,
)

RH_NAMES = ("rh0", "rh5", "rh10", "rh15", "rh20", "rh25", "rh30",
            "rh85", "rh90", "rh95", "rh100")

_MANDATORY_COLUMNS = ("id", "lat", "lon", "date", "beam", "view_angle_rad",
                      "slope_deg", "quality_flag", "degrade_flag") + RH_NAMES
_OPTIONAL_COLUMNS = ("pred_class", "confidence")

# Meters per degree of latitude; longitude scales by cos(lat).
METERS_PER_DEGREE = 111_320.0

DROP_REASONS = ("quality", "degrade", "angle", "slope")


@dataclass
class GediShot:
    """One lidar footprint with its 11 relative-height metrics.

    ``rh`` is ordered (RH0, RH5, RH10, RH15, RH20, RH25, RH30, RH85, RH90,
    RH95, RH100) in meters. The profile is not required to be monotone — real
    waveforms can dip at the low end — but RH100 must not fall below RH95.
    """

    id: str
    location: LatLon
    date: DateStamp
    beam: int
    rh: np.ndarray
    view_angle: float
    slope: float = math.nan
    quality_flag: int = 1
    degrade_flag: int = 0
    pred_class: HeightClass | None = None
    confidence: float | None = None

    def __post_init__(self):
        self.rh = np.asarray(self.rh, dtype=np.float64)
        if self.rh.shape != (len(RH_NAMES),):
            raise ValueError(f"rh must have {len(RH_NAMES)} entries, got {self.rh.shape}")
        if not np.isfinite(self.rh).all():
            raise ValueError("rh metrics must be finite")
        if self.rh[-1] < self.rh[-2]:
            raise ValueError(f"RH100 ({self.rh[-1]}) below RH95 ({self.rh[-2]})")
        if not 0.0 < self.view_angle <= math.pi / 2:
            raise ValueError(f"view angle out of (0, pi/2]: {self.view_angle}")
        if not 0 <= self.beam <= 7:
            raise ValueError(f"beam out of 0-7: {self.beam}")

    @property
    def rh100(self) -> float:
        return float(self.rh[-1])


ShotTable = list  # ordered GediShot records; ids unique within a table


@dataclass(frozen=True)
class FilterConfig:
    min_view_angle: float = 1.5
    max_slope: float = 5.0
    min_confidence: float = 0.8
    require_quality: bool = True
    require_zero_degrade: bool = True
    per_shot_angle: bool = False

    def __post_init__(self):
        if not 0.0 < self.min_view_angle <= math.pi / 2:
            raise ValueError(f"min_view_angle out of range: {self.min_view_angle}")
        if self.max_slope < 0 or self.max_slope > 90:
            raise ValueError(f"max_slope out of range: {self.max_slope}")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValueError(f"min_confidence out of range: {self.min_confidence}")


@dataclass
class BeamDayAngleTable:
    """Mean view angle and shot count per (beam, date)."""

    entries: dict = field(default_factory=dict)  # (beam, date) -> (mean, count)

    def mean(self, beam: int, date: DateStamp) -> float:
        return self.entries[(beam, date)][0]

    def count(self, beam: int, date: DateStamp) -> int:
        return self.entries[(beam, date)][1]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key) -> bool:
        return key in self.entries


def beam_day_mean_view_angle(shots: ShotTable) -> BeamDayAngleTable:
    """Arithmetic mean of shot view angles per (beam, day)."""
    sums: dict = {}
    for shot in shots:
        key = (shot.beam, shot.date)
        total, count = sums.get(key, (0.0, 0))
        sums[key] = (total + shot.view_angle, count + 1)
    return BeamDayAngleTable(
        entries={key: (total / count, count) for key, (total, count) in sums.items()}
    )


def apply_quality_filters(shots: ShotTable, table: BeamDayAngleTable,
                          config: FilterConfig) -> tuple[ShotTable, dict]:
    """Keep shots passing all quality predicates; tally drops by first failure.

    Reasons are evaluated in fixed order (quality, degrade, angle, slope) and
    only the first failing reason is charged per shot.
    """
    for shot in shots:
        if (shot.beam, shot.date) not in table:
            raise KeyError(f"(beam {shot.beam}, {shot.date}) missing from view-angle table")
    kept: ShotTable = []
    dropped = {reason: 0 for reason in DROP_REASONS}
    for shot in shots:
        if config.require_quality and shot.quality_flag != 1:
            dropped["quality"] += 1
            continue
        if config.require_zero_degrade and shot.degrade_flag != 0:
            dropped["degrade"] += 1
            continue
        angle = shot.view_angle if config.per_shot_angle else table.mean(shot.beam, shot.date)
        if angle < config.min_view_angle:
            dropped["angle"] += 1
            continue
        if not (shot.slope <= config.max_slope):  # NaN slope fails the predicate
            dropped["slope"] += 1
            continue
        kept.append(shot)
    return kept, dropped


def filter_confident(shots: ShotTable, config: FilterConfig) -> ShotTable:
    """Keep classified shots with confidence at or above the cutoff."""
    for shot in shots:
        if shot.pred_class is None or shot.confidence is None:
            raise ValueError(f"shot {shot.id} has no prediction; classify before filtering")
    return [s for s in shots if s.confidence >= config.min_confidence]


def slope_degrees(dem: Raster, row: int, col: int) -> float:
    """Terrain slope at a pixel from the 8-neighbor central-difference gradient.

    Uses the standard 3x3 weighted (Horn) stencil with edge replication, with
    per-degree meter scales that account for latitude in the east-west
    direction.
    """
    r0, r1 = max(row - 1, 0), min(row + 1, dem.n_rows - 1)
    c0, c1 = max(col - 1, 0), min(col + 1, dem.n_cols - 1)
    z = dem.values
    a, b, c = z[r0, c0], z[r0, col], z[r0, c1]
    d, f = z[row, c0], z[row, c1]
    g, h, i = z[r1, c0], z[r1, col], z[r1, c1]
    lat = dem.pixel_center(row, col).lat
    dx_m = dem.cell_size * METERS_PER_DEGREE * math.cos(math.radians(lat))
    dy_m = dem.cell_size * METERS_PER_DEGREE
    dz_dx = ((c + 2 * f + i) - (a + 2 * d + g)) / (8 * dx_m)
    # Row index grows southward, so the (g,h,i) row is the southern neighbor.
    dz_dy = ((a + 2 * b + c) - (g + 2 * h + i)) / (8 * dy_m)
    return math.degrees(math.atan(math.hypot(dz_dx, dz_dy)))


def sample_slope(shots: ShotTable, dem: Raster) -> ShotTable:
    """Return shots with ``slope`` populated from the DEM; order preserved."""
    out: ShotTable = []
    for shot in shots:
        if not dem.contains(shot.location.lat, shot.location.lon):
            raise ValueError(f"shot {shot.id} at ({shot.location.lat}, {shot.location.lon}) "
                             "outside DEM extent")
        row, col = dem.point_to_pixel(shot.location.lat, shot.location.lon)
        out.append(replace(shot, slope=slope_degrees(dem, row, col)))
    return out


def read_shot_table(path) -> ShotTable:
    """Read shots from CSV; unknown columns are ignored with a warning."""
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableFormatError("empty shot file (no header)") from None
        known = set(_MANDATORY_COLUMNS) | set(_OPTIONAL_COLUMNS)
        unknown = [c for c in header if c not in known]
        if unknown:
            logging.getLogger(__name__).warning("ignoring unknown shot columns: %s", unknown)
        missing = [c for c in _MANDATORY_COLUMNS if c not in header]
        if missing:
            raise TableFormatError(f"missing mandatory columns: {missing}")
        pos = {c: header.index(c) for c in header if c in known}
        has_pred = "pred_class" in pos and "confidence" in pos

        shots: ShotTable = []
        seen_ids: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                shot_id = row[pos["id"]]
                if shot_id in seen_ids:
                    raise TableFormatError(f"duplicate shot id {shot_id!r}")
                seen_ids.add(shot_id)
                pred_class = None
                confidence = None
                if has_pred and row[pos["pred_class"]] != "":
                    pred_class = HeightClass.from_label(row[pos["pred_class"]])
                    confidence = float(row[pos["confidence"]])
                slope_text = row[pos["slope_deg"]]
                shots.append(GediShot(
                    id=shot_id,
                    location=LatLon(float(row[pos["lat"]]), float(row[pos["lon"]])),
                    date=parse_date(row[pos["date"]]),
                    beam=int(row[pos["beam"]]),
                    rh=np.array([float(row[pos[name]]) for name in RH_NAMES]),
                    view_angle=float(row[pos["view_angle_rad"]]),
                    slope=math.nan if slope_text in ("", "nan") else float(slope_text),
                    quality_flag=int(row[pos["quality_flag"]]),
                    degrade_flag=int(row[pos["degrade_flag"]]),
                    pred_class=pred_class,
                    confidence=confidence,
                ))
            except TableFormatError:
                raise
            except (ValueError, IndexError) as exc:
                raise TableFormatError(f"line {lineno}: {exc}") from None
    return shots


def write_shot_table(shots: ShotTable, path) -> None:
    """Write shots in canonical CSV form; pred columns appear when any shot has them."""
    with_pred = any(s.pred_class is not None for s in shots)
    header = list(_MANDATORY_COLUMNS) + (list(_OPTIONAL_COLUMNS) if with_pred else [])
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for s in shots:
            fields = [
                s.id,
                fmt_number(s.location.lat),
                fmt_number(s.location.lon),
                s.date.isoformat(),
                str(s.beam),
                fmt_number(s.view_angle),
                "nan" if math.isnan(s.slope) else fmt_number(s.slope),
                str(s.quality_flag),
                str(s.degrade_flag),
            ]
            fields.extend(fmt_number(v) for v in s.rh)
            if with_pred:
                if s.pred_class is None:
                    fields.extend(["", ""])
                else:
                    fields.extend([s.pred_class.label, fmt_number(s.confidence)])
            fh.write(",".join(fields) + "\n")


def write_filter_report(dropped: dict, kept: int, path) -> None:
    report = {"kept": kept, "dropped": dropped, "total": kept + sum(dropped.values())}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
