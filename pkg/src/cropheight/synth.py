"""Deterministic synthetic scenes: crop fields, optical series, lidar shots.

A scene is a rectangular pixel grid tiled into rectangular fields, each
growing one crop. Crops carry a phenology template (a smooth seasonal bump
in the vegetation index, crop-specific band trajectories) and a canopy
template (11 relative-height metrics at full height). Two couplings drive
the interesting pipeline behavior:

* seasonal: canopy height follows a plateau-plus-ramp profile around the
  crop's peak date, so lidar shots far from the peak read short;
* biomass: the upper RH metrics scale with min(1, biomass / 4) squared,
  so tall crops with a peak vegetation index below ~4 read short — the
  failure mode behind the low-biomass quality flag.

All noise is bounded uniform (half-width 1.5 sigma), which makes the stated
value ranges guarantees rather than probabilities. Everything is a pure
function of (config, seed).
"""

from __future__ import annotations

import datetime
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import (
    CODE_NODATA,
    DateStamp,
    HeightClass,
    LatLon,
    Raster,
    ReferenceRecord,
    derive_seed,
    write_raster,
    write_reference,
)
from .gedi import GediShot, ShotTable, slope_degrees, write_shot_table
from .gridder import NORTH, SOUTH, season_date_range
from .harmonics import BANDS, S2Stack, save_stack
from .heightmodel import HeightTrainingSet, block_index

RH_UPPER_SATURATION_BIOMASS = 4.0


@dataclass(frozen=True)
class CropTemplate:
    """Phenology and canopy description of one crop."""

    name: str
    fraction: float
    kind: str                      # "short" | "tall" | "tree"
    biomass: float                 # target peak vegetation index
    peak_t: float                  # season fraction of peak greenness/height
    rh_lower: tuple                # RH0..RH30 base values (7), meters
    rh_upper: tuple                # RH85..RH100 at full height (4), meters
    swir1: tuple = (0.30, 0.12)    # (base, amplitude)
    swir2: tuple = (0.22, 0.10)
    rded4: tuple = (0.12, 0.16)
    seasonal: bool = True
    plateau_days: float = 16.0     # full height within +/- plateau of peak
    ramp_days: float = 25.0        # linear height decay beyond the plateau

    def truth_code(self) -> int:
        return int(HeightClass[self.kind.upper()])


def default_crops() -> tuple:
    return (
        CropTemplate(
            name="maize", fraction=0.38, kind="tall", biomass=5.0, peak_t=0.62,
            rh_lower=(-0.05, 0.0, 0.04, 0.08, 0.12, 0.18, 0.28),
            rh_upper=(2.0, 2.15, 2.3, 2.45),
            swir1=(0.30, 0.15), swir2=(0.22, 0.12), rded4=(0.12, 0.18),
        ),
        CropTemplate(
            name="soybean", fraction=0.38, kind="short", biomass=2.2, peak_t=0.60,
            rh_lower=(-0.05, 0.0, 0.03, 0.06, 0.10, 0.14, 0.22),
            rh_upper=(0.65, 0.75, 0.85, 0.95),
            swir1=(0.27, 0.09), swir2=(0.20, 0.07), rded4=(0.15, 0.12),
        ),
        CropTemplate(
            name="wheat", fraction=0.16, kind="short", biomass=2.8, peak_t=0.45,
            rh_lower=(-0.05, 0.0, 0.03, 0.07, 0.11, 0.15, 0.24),
            rh_upper=(0.70, 0.80, 0.90, 1.00),
            swir1=(0.33, 0.07), swir2=(0.25, 0.06), rded4=(0.10, 0.09),
        ),
        CropTemplate(
            name="trees", fraction=0.08, kind="tree", biomass=3.5, peak_t=0.5,
            rh_lower=(0.0, 0.4, 1.0, 1.8, 2.8, 4.0, 5.2),
            rh_upper=(10.5, 11.2, 12.0, 12.8),
            swir1=(0.14, 0.0), swir2=(0.09, 0.0), rded4=(0.28, 0.0),
            seasonal=False,
        ),
    )


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    lat_min: float = 42.0
    lat_max: float = 42.0256
    lon_min: float = -90.0128
    lon_max: float = -89.9872
    pixel_size: float = 0.0001
    years: tuple = (2019,)
    crops: tuple = field(default_factory=default_crops)
    field_px_min: int = 16
    field_px_max: int = 32
    noncrop_fraction: float = 0.04
    low_biomass_fraction: float = 0.0
    low_biomass_range: tuple = (1.5, 3.9)
    biomass_jitter: float = 0.2
    # optical series
    obs_interval_days: int = 5
    cloud_fraction: float = 0.1
    cloud_block_px: int = 32
    gcvi_sigma: float = 0.1
    band_sigma: float = 0.003
    green_base: float = 0.08
    # lidar geometry
    beam_count: int = 8
    track_spacing_px: int = 80
    shot_spacing_px: int = 24
    track_slant: float = 0.35      # cross-track drift in columns per row
    passes_per_month: int = 1
    rh_sigma: float = 0.15
    rh_elem_jitter: float = 0.02
    bad_quality_fraction: float = 0.02
    degrade_fraction: float = 0.02
    view_angle_base: float = 1.54
    view_angle_day_jitter: float = 0.015
    corrupt_days: tuple = ()       # ISO dates whose beams dip below the cutoff
    corrupt_angle: float = 1.2
    corrupt_noise_per_rad: float = 2.5
    dem: str = "flat"              # "flat" | "ramp:<slope_deg>" | "hills"
    dem_base_elevation: float = 120.0

    def __post_init__(self):
        total = sum(c.fraction for c in self.crops)
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"crop fractions must sum to 1, got {total}")
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise ValueError("empty scene extent")
        for sigma in (self.gcvi_sigma, self.band_sigma, self.rh_sigma):
            if sigma < 0:
                raise ValueError("noise sigmas must be >= 0")

    @property
    def n_rows(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.pixel_size))

    @property
    def n_cols(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.pixel_size))

    @property
    def hemisphere(self) -> str:
        return NORTH if (self.lat_min + self.lat_max) / 2 >= 0 else SOUTH


@dataclass
class CropScene:
    config: SceneConfig
    crop_mask: Raster
    labels: Raster                # crop id per pixel, -1 off-crop
    crop_names: dict              # id -> name
    truth: Raster                 # height-class codes, -1 off-crop
    dem: Raster
    biomass: np.ndarray           # (n_rows, n_cols) biomass parameter
    stacks: dict                  # year -> S2Stack
    shots: ShotTable


def _rng(config_seed: int, *tokens) -> np.random.Generator:
    key = np.array([derive_seed(config_seed, *tokens), 0], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _bounded(rng: np.random.Generator, sigma: float, size=None):
    """Uniform noise with half-width 1.5*sigma (hard bound, std ~0.87*sigma)."""
    hw = 1.5 * sigma
    return rng.uniform(-hw, hw, size=size)


def vegetation_shape(t: np.ndarray, peak_t: float) -> np.ndarray:
    """Smooth seasonal bump in [0, 1] peaking at peak_t (order-3 harmonic)."""
    return ((1.0 + np.cos(2.0 * math.pi * (np.asarray(t) - peak_t))) / 2.0) ** 3


def height_factor(t, peak_t: float, plateau_days: float, ramp_days: float,
                  season_days: float = 365.0):
    """Plateau-plus-ramp canopy height multiplier in [0, 1]."""
    delta = np.abs(np.asarray(t, dtype=np.float64) - peak_t) * season_days
    return np.clip(1.0 - (delta - plateau_days) / ramp_days, 0.0, 1.0)


def biomass_height_scale(biomass) -> np.ndarray:
    """Upper-RH attenuation: saturates at biomass 4, quadratic below."""
    return np.minimum(1.0, np.asarray(biomass, dtype=np.float64) / RH_UPPER_SATURATION_BIOMASS) ** 2


def corrupt_view_angle(config: SceneConfig, days) -> SceneConfig:
    """Mark days whose beams point well off the usable view-angle range.

    Shots on these days get the configured low angle plus additive RH noise
    whose sigma grows linearly as the angle drops below 1.5 rad.
    """
    iso = tuple(sorted(d.isoformat() if isinstance(d, DateStamp) else str(d) for d in days))
    return replace(config, corrupt_days=iso)


def view_angle_schedule(config: SceneConfig, year: int) -> dict:
    """Mean view angle per day of the season window."""
    start, end = season_date_range(year, config.hemisphere)
    corrupt = {DateStamp.fromisoformat(d) for d in config.corrupt_days}
    rng = _rng(config.seed, "angles", year)
    schedule = {}
    day = start
    while day < end:
        if day in corrupt:
            angle = config.corrupt_angle
        else:
            angle = config.view_angle_base + float(
                rng.uniform(-config.view_angle_day_jitter, config.view_angle_day_jitter))
        schedule[day] = angle
        day = day + dt_days(1)
    return schedule


# ---------------------------------------------------------------------------
# Field layout
# ---------------------------------------------------------------------------

def _field_layout(config: SceneConfig):
    """Tile the grid into rectangles; returns (field_id map, crop index per field,
    biomass per field, noncrop flag per field)."""
    rng = _rng(config.seed, "fields")
    n_rows, n_cols = config.n_rows, config.n_cols
    if n_rows < config.field_px_min or n_cols < config.field_px_min:
        raise ValueError("scene extent too small for a single field")
    field_ids = np.zeros((n_rows, n_cols), dtype=np.int64)
    next_id = 0
    r = 0
    while r < n_rows:
        h = int(rng.integers(config.field_px_min, config.field_px_max + 1))
        r1 = min(r + h, n_rows)
        c = 0
        while c < n_cols:
            w = int(rng.integers(config.field_px_min, config.field_px_max + 1))
            c1 = min(c + w, n_cols)
            field_ids[r:r1, c:c1] = next_id
            next_id += 1
            c = c1
        r = r1

    fractions = np.array([c.fraction for c in config.crops])
    crop_of_field = rng.choice(len(config.crops), size=next_id, p=fractions)
    noncrop = rng.random(next_id) < config.noncrop_fraction
    biomass = np.empty(next_id)
    for i in range(next_id):
        crop = config.crops[crop_of_field[i]]
        b = crop.biomass + float(rng.uniform(-config.biomass_jitter, config.biomass_jitter))
        if crop.kind == "tall" and float(rng.random()) < config.low_biomass_fraction:
            b = float(rng.uniform(*config.low_biomass_range))
        biomass[i] = b
    return field_ids, crop_of_field, biomass, noncrop


def _make_dem(config: SceneConfig) -> Raster:
    n_rows, n_cols = config.n_rows, config.n_cols
    base = config.dem_base_elevation
    if config.dem == "flat":
        z = np.full((n_rows, n_cols), base)
    elif config.dem.startswith("ramp:"):
        slope_deg = float(config.dem.split(":", 1)[1])
        rise_per_m = math.tan(math.radians(slope_deg))
        meters_per_px = config.pixel_size * 111_320.0
        northing = (n_rows - 1 - np.arange(n_rows, dtype=np.float64))[:, None]
        z = base + rise_per_m * meters_per_px * np.broadcast_to(
            northing, (n_rows, n_cols)).copy()
    elif config.dem == "hills":
        rng = _rng(config.seed, "dem")
        z = np.full((n_rows, n_cols), base)
        rows = np.arange(n_rows)[:, None]
        cols = np.arange(n_cols)[None, :]
        n_hills = max(3, (n_rows * n_cols) // 4000)
        for _ in range(n_hills):
            cr = rng.uniform(0, n_rows)
            cc = rng.uniform(0, n_cols)
            amp = rng.uniform(10.0, 45.0)
            width = rng.uniform(15.0, 40.0)
            z = z + amp * np.exp(-((rows - cr) ** 2 + (cols - cc) ** 2) / (2 * width**2))
    else:
        raise ValueError(f"unknown DEM generator {config.dem!r}")
    origin = LatLon(config.lat_min, config.lon_min)
    return Raster(origin=origin, cell_size=config.pixel_size, values=z, nodata=-9999.0)


# ---------------------------------------------------------------------------
# Optical series
# ---------------------------------------------------------------------------

def _observation_dates(config: SceneConfig, year: int) -> list:
    start, end = season_date_range(year, config.hemisphere)
    dates = []
    day = start
    step = dt_days(config.obs_interval_days)
    while day < end:
        dates.append(day)
        day = day + step
    return dates


def dt_days(n: int) -> datetime.timedelta:
    return datetime.timedelta(days=n)


def _generate_stack(config: SceneConfig, year: int, field_ids, crop_of_field,
                    biomass_field, noncrop_field) -> S2Stack:
    rng = _rng(config.seed, "s2", year)
    n_rows, n_cols = config.n_rows, config.n_cols
    dates = _observation_dates(config, year)
    start, end = season_date_range(year, config.hemisphere)
    span = (end - start).days
    t = np.array([(d - start).days / span for d in dates])

    crop_idx = crop_of_field[field_ids]
    peak_lut = np.array([c.peak_t for c in config.crops])
    seasonal_lut = np.array([1.0 if c.seasonal else 0.0 for c in config.crops])
    s1b = np.array([c.swir1[0] for c in config.crops])
    s1a = np.array([c.swir1[1] for c in config.crops])
    s2b = np.array([c.swir2[0] for c in config.crops])
    s2a = np.array([c.swir2[1] for c in config.crops])
    r4b = np.array([c.rded4[0] for c in config.crops])
    r4a = np.array([c.rded4[1] for c in config.crops])

    peak_map = peak_lut[crop_idx]
    seasonal_map = seasonal_lut[crop_idx]
    b_map = biomass_field[field_ids]
    crop_pixel = ~noncrop_field[field_ids]
    # Band amplitude weakens with biomass the same way canopy returns do.
    amp_scale = 0.5 + 0.5 * np.minimum(1.0, b_map / RH_UPPER_SATURATION_BIOMASS)

    n_obs = len(dates)
    bands = {name: np.zeros((n_obs, n_rows, n_cols), dtype=np.uint16) for name in BANDS}
    cloud = np.zeros((n_obs, n_rows, n_cols), dtype=np.uint8)

    block = config.cloud_block_px
    bR = math.ceil(n_rows / block)
    bC = math.ceil(n_cols / block)

    for i, ti in enumerate(t):
        shape = vegetation_shape(ti, peak_map)
        veg = np.where(seasonal_map > 0, shape, 1.0)
        g = b_map * veg + _bounded(rng, config.gcvi_sigma, (n_rows, n_cols))
        g = np.where(crop_pixel, g, 0.05)
        g = np.maximum(g, -0.5)
        green = config.green_base + _bounded(rng, config.band_sigma, (n_rows, n_cols))
        green = np.maximum(green, 0.02)
        nir = green * (1.0 + g)
        swir1 = s1b[crop_idx] - s1a[crop_idx] * veg * amp_scale \
            + _bounded(rng, config.band_sigma, (n_rows, n_cols))
        swir2 = s2b[crop_idx] - s2a[crop_idx] * veg * amp_scale \
            + _bounded(rng, config.band_sigma, (n_rows, n_cols))
        rded4 = r4b[crop_idx] + r4a[crop_idx] * veg * amp_scale \
            + _bounded(rng, config.band_sigma, (n_rows, n_cols))
        blue = 0.05 + _bounded(rng, config.band_sigma, (n_rows, n_cols))
        red = 0.06 + 0.02 * (1.0 - veg * amp_scale) \
            + _bounded(rng, config.band_sigma, (n_rows, n_cols))

        for name, arr in (("Blue", blue), ("Green", green), ("Red", red), ("NIR", nir),
                          ("RDED4", rded4), ("SWIR1", swir1), ("SWIR2", swir2)):
            bands[name][i] = np.clip(np.round(arr * 10_000), 0, 65_535).astype(np.uint16)

        cloudy_blocks = rng.random((bR, bC)) < config.cloud_fraction
        probs = np.where(cloudy_blocks,
                         rng.uniform(60, 100, (bR, bC)),
                         rng.uniform(0, 30, (bR, bC)))
        cloud[i] = np.repeat(np.repeat(probs, block, axis=0), block, axis=1)[:n_rows, :n_cols]

    float_bands = {name: arr.astype(np.float64) / 10_000 for name, arr in bands.items()}
    return S2Stack(
        origin=LatLon(config.lat_min, config.lon_min),
        cell_size=config.pixel_size,
        dates=dates,
        window=(start, end),
        bands=float_bands,
        cloud_prob=cloud.astype(np.float64),
    )


def generate_s2_series(config: SceneConfig, crop: CropTemplate, pixel_biomass: float,
                       year: int, seed_tokens=("series",)) -> list:
    """Standalone one-pixel observation list for a crop/biomass combination.

    Follows the same generative model as the scene stacks; used by tests to
    pin down peak-index behavior without building a whole scene.
    """
    from .harmonics import S2Observation

    rng = _rng(config.seed, *seed_tokens, crop.name, year)
    dates = _observation_dates(config, year)
    start, end = season_date_range(year, config.hemisphere)
    span = (end - start).days
    amp_scale = 0.5 + 0.5 * min(1.0, pixel_biomass / RH_UPPER_SATURATION_BIOMASS)
    observations = []
    for d in dates:
        ti = (d - start).days / span
        veg = float(vegetation_shape(np.array(ti), crop.peak_t)) if crop.seasonal else 1.0
        g = pixel_biomass * veg + float(_bounded(rng, config.gcvi_sigma))
        green = max(0.02, config.green_base + float(_bounded(rng, config.band_sigma)))
        cloudy = float(rng.random()) < config.cloud_fraction
        cloud_prob = float(rng.uniform(60, 100)) if cloudy else float(rng.uniform(0, 30))
        observations.append(S2Observation(
            date=d,
            bands={
                "Blue": 0.05,
                "Green": green,
                "Red": 0.06 + 0.02 * (1.0 - veg * amp_scale),
                "NIR": green * (1.0 + g),
                "RDED4": crop.rded4[0] + crop.rded4[1] * veg * amp_scale,
                "SWIR1": crop.swir1[0] - crop.swir1[1] * veg * amp_scale,
                "SWIR2": crop.swir2[0] - crop.swir2[1] * veg * amp_scale,
            },
            cloud_prob=cloud_prob,
        ))
    return observations


# ---------------------------------------------------------------------------
# Lidar shots
# ---------------------------------------------------------------------------

def _pass_days(config: SceneConfig, year: int) -> list:
    """Deterministic acquisition days: passes_per_month days in each season month."""
    rng = _rng(config.seed, "passdays", year)
    start, end = season_date_range(year, config.hemisphere)
    days = []
    month_start = start
    while month_start < end:
        if month_start.month == 12:
            next_month = DateStamp(month_start.year + 1, 1, 1)
        else:
            next_month = DateStamp(month_start.year, month_start.month + 1, 1)
        month_end = min(next_month, end)
        n_days = (month_end - month_start).days
        offsets = sorted(rng.choice(n_days, size=min(config.passes_per_month, n_days),
                                    replace=False).tolist())
        days.extend(month_start + dt_days(int(o)) for o in offsets)
        month_start = next_month
    return days


def _generate_shots(config: SceneConfig, scene_arrays, dem: Raster) -> ShotTable:
    field_ids, crop_of_field, biomass_field, noncrop_field = scene_arrays
    rng = _rng(config.seed, "shots")
    n_rows, n_cols = config.n_rows, config.n_cols
    crop_idx = crop_of_field[field_ids]
    crop_pixel = ~noncrop_field[field_ids]
    shots: ShotTable = []
    counter = 0
    for year in config.years:
        schedule = view_angle_schedule(config, year)
        start, end = season_date_range(year, config.hemisphere)
        span = (end - start).days
        for day in _pass_days(config, year):
            day_angle = schedule[day]
            extra_sigma = config.corrupt_noise_per_rad * max(0.0, 1.5 - day_angle)
            t_day = (day - start).days / span
            # Tracks run diagonally (ascending or descending), like an
            # inclined orbit, so one track crosses many fields.
            slant = config.track_slant * (1 if rng.random() < 0.5 else -1)
            margin = int(abs(slant) * n_rows) + 1
            x0 = float(rng.uniform(-config.track_spacing_px * config.beam_count - margin,
                                   n_cols + margin))
            for beam in range(config.beam_count):
                base_col = x0 + beam * config.track_spacing_px
                phase = int(rng.integers(0, config.shot_spacing_px))
                beam_angle = day_angle + beam * 0.001
                for row in range(phase, n_rows, config.shot_spacing_px):
                    track_col = int(round(base_col + slant * row))
                    if not 0 <= track_col < n_cols:
                        continue
                    if not crop_pixel[row, track_col]:
                        continue
                    crop = config.crops[crop_idx[row, track_col]]
                    b = biomass_field[field_ids[row, track_col]]
                    shots.append(_make_shot(
                        config, rng, counter, crop, b, t_day, day, beam,
                        beam_angle, extra_sigma, row, track_col, dem))
                    counter += 1
    return shots


def _make_shot(config: SceneConfig, rng, counter, crop: CropTemplate, biomass,
               t_day, day, beam, beam_angle, extra_sigma, row, col, dem) -> GediShot:
    if crop.seasonal:
        hf = float(height_factor(t_day, crop.peak_t, crop.plateau_days, crop.ramp_days))
    else:
        hf = 1.0
    scale = hf * (biomass_height_scale(biomass) if crop.kind == "tall" else 1.0)
    shared = float(_bounded(rng, config.rh_sigma))
    upper = np.array(crop.rh_upper) * scale + shared \
        + _bounded(rng, config.rh_elem_jitter, 4)
    if extra_sigma > 0:
        upper = upper + _bounded(rng, extra_sigma, 4)
    lower = np.array(crop.rh_lower) * max(hf, 0.3) \
        + _bounded(rng, config.rh_elem_jitter, 7)
    upper = np.maximum(upper, lower[-1])   # canopy metrics never below RH30
    upper[3] = max(upper[3], upper[2])     # RH100 >= RH95 invariant
    center = dem.pixel_center(row, col)
    angle = min(beam_angle + float(rng.uniform(-0.002, 0.002)), math.pi / 2)
    return GediShot(
        id=f"s{counter:07d}",
        location=center,
        date=day,
        beam=beam,
        rh=np.concatenate([lower, upper]),
        view_angle=angle,
        slope=slope_degrees(dem, row, col),
        quality_flag=0 if float(rng.random()) < config.bad_quality_fraction else 1,
        degrade_flag=1 if float(rng.random()) < config.degrade_fraction else 0,
    )


def generate_gedi_shots(config: SceneConfig, scene: "CropScene") -> ShotTable:
    """Regenerate the scene's shot table (pure function of config)."""
    field_ids, crop_of_field, biomass_field, noncrop_field = _field_layout(config)
    return _generate_shots(config, (field_ids, crop_of_field, biomass_field, noncrop_field),
                           scene.dem)


# ---------------------------------------------------------------------------
# Whole scenes
# ---------------------------------------------------------------------------

def generate_scene(config: SceneConfig) -> CropScene:
    layout = _field_layout(config)
    field_ids, crop_of_field, biomass_field, noncrop_field = layout
    n_rows, n_cols = config.n_rows, config.n_cols
    origin = LatLon(config.lat_min, config.lon_min)

    crop_idx = crop_of_field[field_ids]
    crop_pixel = ~noncrop_field[field_ids]
    truth_lut = np.array([c.truth_code() for c in config.crops])

    crop_mask = Raster(origin=origin, cell_size=config.pixel_size,
                       values=np.where(crop_pixel, 1.0, 0.0), nodata=-1.0)
    labels = Raster(origin=origin, cell_size=config.pixel_size,
                    values=np.where(crop_pixel, crop_idx.astype(np.float64), CODE_NODATA),
                    nodata=CODE_NODATA)
    truth = Raster(origin=origin, cell_size=config.pixel_size,
                   values=np.where(crop_pixel, truth_lut[crop_idx].astype(np.float64),
                                   CODE_NODATA),
                   nodata=CODE_NODATA)
    dem = _make_dem(config)
    biomass = biomass_field[field_ids]

    stacks = {year: _generate_stack(config, year, *layout) for year in config.years}
    shots = _generate_shots(config, layout, dem)
    crop_names = {i: c.name for i, c in enumerate(config.crops)}
    return CropScene(config=config, crop_mask=crop_mask, labels=labels,
                     crop_names=crop_names, truth=truth, dem=dem, biomass=biomass,
                     stacks=stacks, shots=shots)


def sample_reference(scene: CropScene, n: int, seed: int | None = None) -> list:
    """Random reference points on non-tree crop pixels (the evaluation truth)."""
    config = scene.config
    rng = _rng(config.seed if seed is None else seed, "reference")
    vals = scene.labels.values
    candidates = []
    for code, name in scene.crop_names.items():
        if scene.config.crops[code].kind == "tree":
            continue
        rows, cols = np.nonzero(vals == code)
        candidates.append(np.stack([rows, cols, np.full(rows.shape, code)], axis=1))
    pool = np.concatenate(candidates, axis=0)
    picks = rng.choice(pool.shape[0], size=min(n, pool.shape[0]), replace=False)
    records = []
    for row, col, code in pool[picks]:
        center = scene.labels.pixel_center(int(row), int(col))
        records.append(ReferenceRecord(
            location=center,
            crop_name=scene.crop_names[int(code)],
            year=int(config.years[0]),
        ))
    return records


def make_height_training_set(n_per_class: int = 200, seed: int = 0, sigma: float = 0.15,
                             short_rh100: float = 0.8, tall_rh100: float = 2.3,
                             tree_rh100: float = 12.0, block_size: float = 0.5,
                             extent_deg: float = 4.0) -> HeightTrainingSet:
    """Separable three-class RH training set spread over spatial blocks.

    Class RH100 means are parameters; the full profile is scaled from the
    tall-crop default template. Noise is bounded uniform as elsewhere.
    """
    rng = _rng(seed, "heightset")
    template = np.array((-0.05, 0.0, 0.04, 0.08, 0.12, 0.18, 0.28,
                         2.0, 2.15, 2.3, 2.45))
    profiles = {
        HeightClass.SHORT: template * (short_rh100 / template[-1]),
        HeightClass.TALL: template * (tall_rh100 / template[-1]),
        HeightClass.TREE: template * (tree_rh100 / template[-1]),
    }
    rows, labels, blocks = [], [], []
    for cls, profile in profiles.items():
        for _ in range(n_per_class):
            rh = profile + _bounded(rng, sigma, len(template))
            rh[-1] = max(rh[-1], rh[-2])
            lat = float(rng.uniform(40.0, 40.0 + extent_deg))
            lon = float(rng.uniform(-95.0, -95.0 + extent_deg))
            rows.append(rh)
            labels.append(cls)
            blocks.append(block_index(LatLon(lat, lon), block_size))
    order = rng.permutation(len(rows))
    return HeightTrainingSet(
        features=np.array(rows)[order],
        labels=[labels[i] for i in order],
        block_id=np.array(blocks, dtype=np.int64)[order],
        region_tag=["synthetic"] * len(rows),
    )


# ---------------------------------------------------------------------------
# Scene persistence
# ---------------------------------------------------------------------------

def write_scene(scene: CropScene, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_raster(scene.crop_mask, out / "crop_mask.asc")
    write_raster(scene.labels, out / "crop_labels.asc")
    write_raster(scene.truth, out / "truth.asc")
    write_raster(scene.dem, out / "dem.asc")
    write_raster(Raster(origin=scene.crop_mask.origin, cell_size=scene.crop_mask.cell_size,
                        values=scene.biomass, nodata=-9999.0),
                 out / "biomass.asc")
    write_shot_table(scene.shots, out / "shots.csv")
    for year, stack in scene.stacks.items():
        save_stack(stack, out / f"s2_{year}.npz")
    manifest = {
        "config": _config_to_jsonable(scene.config),
        "crop_names": {str(k): v for k, v in scene.crop_names.items()},
        "years": list(scene.config.years),
        "hemisphere": scene.config.hemisphere,
        "reflectance_scale": 10_000,
    }
    with open(out / "scene_manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _config_to_jsonable(config: SceneConfig) -> dict:
    obj = asdict(config)
    obj["crops"] = [asdict(c) for c in config.crops]
    return obj


def config_from_jsonable(obj: dict) -> SceneConfig:
    crops = tuple(CropTemplate(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in c.items()}) for c in obj["crops"])
    kwargs = {k: tuple(v) if isinstance(v, list) else v
              for k, v in obj.items() if k != "crops"}
    return SceneConfig(crops=crops, **kwargs)
