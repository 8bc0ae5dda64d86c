"""Harmonic regression features from optical time series.

A pixel's cloud-free reflectance trajectory over one growing season is fit
with f(t) = c + sum_k [a_k cos(2 pi w k t) + b_k sin(2 pi w k t)] for
k = 1..n, where t is the fraction of the season window elapsed in [0, 1).
With the default third order (n=3) this yields seven coefficients per
signal; five signals (NIR, SWIR1, SWIR2, RDED4 and the GCVI index) give the
35-feature vector used by the per-cell classifiers.

The fit is ordinary least squares solved by an orthogonal decomposition
(numpy ``lstsq``); the test suite cross-checks it against an independent
normal-equations solve.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DateStamp, LatLon, Raster

BANDS = ("Blue", "Green", "Red", "NIR", "RDED4", "SWIR1", "SWIR2")
SIGNALS = ("NIR", "SWIR1", "SWIR2", "RDED4", "GCVI")
COEF_NAMES = ("c", "a1", "b1", "a2", "b2", "a3", "b3")

FEATURE_NAMES = tuple(f"{sig}_{coef}" for sig in SIGNALS for coef in COEF_NAMES)

REFLECTANCE_SCALE = 10_000  # uint16 storage scale for the time-series cube


class InvalidPixel(ValueError):
    """Pixel cannot be fitted (too few observations or degenerate design)."""


def gcvi(nir: float, green: float) -> float:
    """Green chlorophyll vegetation index: NIR / Green - 1."""
    if green <= 0:
        raise ValueError(f"green reflectance must be positive, got {green}")
    return nir / green - 1.0


@dataclass(frozen=True)
class S2Observation:
    date: DateStamp
    bands: dict
    cloud_prob: float

    def __post_init__(self):
        for name in BANDS:
            if name not in self.bands:
                raise ValueError(f"missing band {name}")
        if not 0.0 <= self.cloud_prob <= 100.0:
            raise ValueError(f"cloud_prob out of 0-100: {self.cloud_prob}")


@dataclass
class PixelTimeSeries:
    """Observations for one pixel within a season window [t0, t1)."""

    location: LatLon
    window: tuple  # (start_date, end_date), end exclusive
    observations: list

    def __post_init__(self):
        start, end = self.window
        self.observations = sorted(self.observations, key=lambda o: o.date)
        for obs in self.observations:
            if not (start <= obs.date < end):
                raise ValueError(f"observation {obs.date} outside window [{start}, {end})")

    def t_values(self) -> np.ndarray:
        start, end = self.window
        span = (end - start).days
        return np.array([(o.date - start).days / span for o in self.observations])


@dataclass(frozen=True)
class HarmonicConfig:
    order: int = 3
    omega: float = 1.0
    min_obs: int = 10
    cloud_prob_max: float = 40.0

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        if self.min_obs < 2 * self.order + 1:
            raise ValueError(f"min_obs must be >= {2 * self.order + 1} for order {self.order}")

    @property
    def n_coefs(self) -> int:
        return 2 * self.order + 1


@dataclass
class HarmonicFeatures:
    """35 fitted coefficients, signal-major in (c, a1, b1, ..., an, bn) order."""

    coefficients: dict      # signal -> (2n+1,) array
    fit_rmse: dict          # signal -> float

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.coefficients[sig] for sig in SIGNALS])


def mask_clouds(series: PixelTimeSeries, config: HarmonicConfig) -> PixelTimeSeries:
    """Keep observations with cloud probability at or below the cutoff."""
    kept = [o for o in series.observations if o.cloud_prob <= config.cloud_prob_max]
    return PixelTimeSeries(location=series.location, window=series.window, observations=kept)


def design_matrix(t: np.ndarray, config: HarmonicConfig) -> np.ndarray:
    """Columns ordered (1, cos k=1, sin k=1, ..., cos k=n, sin k=n)."""
    t = np.asarray(t, dtype=np.float64)
    cols = [np.ones_like(t)]
    for k in range(1, config.order + 1):
        phase = 2.0 * math.pi * config.omega * k * t
        cols.append(np.cos(phase))
        cols.append(np.sin(phase))
    return np.column_stack(cols)


def evaluate_harmonic(coeffs: np.ndarray, t, config: HarmonicConfig = HarmonicConfig()) -> float:
    """Evaluate f(t) for one coefficient vector."""
    a = design_matrix(np.atleast_1d(np.asarray(t, dtype=np.float64)), config)
    out = a @ np.asarray(coeffs, dtype=np.float64)
    return float(out[0]) if np.ndim(t) == 0 else out


def _signal_values(obs: S2Observation, signal: str) -> float:
    if signal == "GCVI":
        return gcvi(obs.bands["NIR"], obs.bands["Green"])
    return obs.bands[signal]


def _usable(obs: S2Observation) -> bool:
    # One validity rule for all signals: an observation with a non-positive
    # green reflectance (GCVI undefined) is discarded outright.
    if obs.bands["Green"] <= 0:
        return False
    return all(math.isfinite(obs.bands[b]) for b in BANDS)


def fit_harmonics(series: PixelTimeSeries, signal: str, config: HarmonicConfig):
    """OLS harmonic fit for one signal; returns (coefficients, rmse).

    Raises InvalidPixel when fewer than ``min_obs`` usable cloud-free
    observations remain or the design matrix is rank deficient.
    """
    if signal not in SIGNALS:
        raise ValueError(f"unknown signal {signal!r}")
    masked = mask_clouds(series, config)
    usable = [o for o in masked.observations if _usable(o)]
    if len(usable) < config.min_obs:
        raise InvalidPixel(
            f"{len(usable)} usable observations < min_obs {config.min_obs}")
    start, end = series.window
    span = (end - start).days
    t = np.array([(o.date - start).days / span for o in usable])
    y = np.array([_signal_values(o, signal) for o in usable])
    a = design_matrix(t, config)
    coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
    if rank < config.n_coefs:
        raise InvalidPixel(f"design matrix rank {rank} < {config.n_coefs}")
    resid = a @ coef - y
    rmse = float(np.sqrt(np.mean(resid**2)))
    return coef, rmse


def features_for_pixel(series: PixelTimeSeries, config: HarmonicConfig) -> HarmonicFeatures:
    """Fit all five signals; any failed signal invalidates the whole pixel."""
    coefficients = {}
    rmse = {}
    for signal in SIGNALS:
        coef, err = fit_harmonics(series, signal, config)
        coefficients[signal] = coef
        rmse[signal] = err
    return HarmonicFeatures(coefficients=coefficients, fit_rmse=rmse)


def peak_gcvi(series: PixelTimeSeries, month_window, config: HarmonicConfig) -> float | None:
    """Maximum observed cloud-free GCVI with date inside the month window.

    Uses raw observations, not the fitted curve. Returns None when no usable
    observation falls in the window.
    """
    months = set(month_window)
    masked = mask_clouds(series, config)
    best: float | None = None
    for obs in masked.observations:
        if obs.date.month not in months or not _usable(obs):
            continue
        value = gcvi(obs.bands["NIR"], obs.bands["Green"])
        if best is None or value > best:
            best = value
    return best


# ---------------------------------------------------------------------------
# Scene-scale containers: the observation cube and the fitted feature stack.
# ---------------------------------------------------------------------------

@dataclass
class S2Stack:
    """Season of observations over a pixel grid, aligned with a Raster lattice.

    ``bands[name]`` has shape (n_obs, n_rows, n_cols) in reflectance units;
    ``cloud_prob`` matches with percent values. Stored on disk as an .npz
    with reflectances scaled to uint16 (documented in the scene manifest).
    """

    origin: LatLon
    cell_size: float
    dates: list
    window: tuple
    bands: dict
    cloud_prob: np.ndarray

    @property
    def n_obs(self) -> int:
        return len(self.dates)

    @property
    def shape(self) -> tuple[int, int]:
        return self.cloud_prob.shape[1:]

    def t_values(self) -> np.ndarray:
        start, end = self.window
        span = (end - start).days
        return np.array([(d - start).days / span for d in self.dates])

    def series_at(self, row: int, col: int, location: LatLon | None = None) -> PixelTimeSeries:
        if location is None:
            n_rows = self.cloud_prob.shape[1]
            lat = self.origin.lat + (n_rows - row - 0.5) * self.cell_size
            lon = self.origin.lon + (col + 0.5) * self.cell_size
            location = LatLon(lat, lon)
        observations = [
            S2Observation(
                date=self.dates[i],
                bands={name: float(self.bands[name][i, row, col]) for name in BANDS},
                cloud_prob=float(self.cloud_prob[i, row, col]),
            )
            for i in range(self.n_obs)
        ]
        return PixelTimeSeries(location=location, window=self.window, observations=observations)


def save_stack(stack: S2Stack, path) -> None:
    arrays = {
        "dates": np.array([d.isoformat() for d in stack.dates]),
        "window": np.array([stack.window[0].isoformat(), stack.window[1].isoformat()]),
        "geo": np.array([stack.origin.lat, stack.origin.lon, stack.cell_size]),
        "cloud_prob": stack.cloud_prob.astype(np.uint8),
    }
    for name in BANDS:
        scaled = np.clip(np.round(stack.bands[name] * REFLECTANCE_SCALE), 0, 65535)
        arrays[f"band_{name}"] = scaled.astype(np.uint16)
    np.savez_compressed(path, **arrays)


def load_stack(path) -> S2Stack:
    with np.load(path) as data:
        dates = [DateStamp.fromisoformat(str(d)) for d in data["dates"]]
        w0, w1 = (DateStamp.fromisoformat(str(d)) for d in data["window"])
        lat, lon, cell = (float(v) for v in data["geo"])
        bands = {
            name: data[f"band_{name}"].astype(np.float64) / REFLECTANCE_SCALE
            for name in BANDS
        }
        cloud = data["cloud_prob"].astype(np.float64)
    return S2Stack(origin=LatLon(lat, lon), cell_size=cell, dates=dates,
                   window=(w0, w1), bands=bands, cloud_prob=cloud)


@dataclass
class FeatureStack:
    """The 35 fitted coefficient rasters plus a per-pixel validity raster."""

    origin: LatLon
    cell_size: float
    data: np.ndarray       # (35, n_rows, n_cols) float64, NaN where invalid
    validity: np.ndarray   # (n_rows, n_cols) int: 1 valid, 0 invalid, -1 off-mask
    names: tuple = FEATURE_NAMES

    def vector_at(self, row: int, col: int) -> np.ndarray | None:
        if self.validity[row, col] != 1:
            return None
        return self.data[:, row, col]

    def as_raster(self, index: int, nodata: float = -9999.0) -> Raster:
        values = self.data[index].copy()
        values[~np.isfinite(values)] = nodata
        return Raster(origin=self.origin, cell_size=self.cell_size,
                      values=values, nodata=nodata)

    def validity_raster(self) -> Raster:
        return Raster(origin=self.origin, cell_size=self.cell_size,
                      values=self.validity.astype(np.float64), nodata=-1.0)


def build_feature_stack(stack: S2Stack, crop_mask: Raster,
                        config: HarmonicConfig) -> FeatureStack:
    """Fit harmonic features for every cropland pixel of the stack.

    Pixels are grouped by identical usable-observation masks so each group
    shares one least-squares solve; results are identical to the per-pixel
    path because the design matrix and solver are the same.
    """
    n_rows, n_cols = stack.shape
    if crop_mask.values.shape != (n_rows, n_cols):
        raise ValueError("crop mask shape does not match stack")
    t_all = stack.t_values()
    green = stack.bands["Green"]
    finite = np.ones((stack.n_obs, n_rows, n_cols), dtype=bool)
    for name in BANDS:
        finite &= np.isfinite(stack.bands[name])
    usable = (stack.cloud_prob <= config.cloud_prob_max) & (green > 0) & finite

    data = np.full((len(FEATURE_NAMES), n_rows, n_cols), np.nan)
    validity = np.full((n_rows, n_cols), -1, dtype=np.int64)
    crop = crop_mask.values == 1

    flat_usable = usable.reshape(stack.n_obs, -1)
    crop_flat = crop.ravel()
    pixel_ids = np.nonzero(crop_flat)[0]
    if pixel_ids.size == 0:
        return FeatureStack(origin=stack.origin, cell_size=stack.cell_size,
                            data=data, validity=validity)
    validity.ravel()[pixel_ids] = 0

    # Group cropland pixels by their usable-date pattern.
    patterns = flat_usable[:, pixel_ids].T
    order = np.lexsort(patterns.T[::-1])
    sorted_patterns = patterns[order]
    boundaries = np.nonzero(np.any(sorted_patterns[1:] != sorted_patterns[:-1], axis=1))[0] + 1
    group_starts = np.concatenate([[0], boundaries, [len(order)]])

    signal_cubes = {name: stack.bands[name].reshape(stack.n_obs, -1) for name in BANDS}
    n_coefs = config.n_coefs
    for gi in range(len(group_starts) - 1):
        members = pixel_ids[order[group_starts[gi]:group_starts[gi + 1]]]
        mask = flat_usable[:, members[0]]
        n_usable = int(mask.sum())
        if n_usable < config.min_obs:
            continue
        a = design_matrix(t_all[mask], config)
        if np.linalg.matrix_rank(a) < n_coefs:
            continue
        columns = []
        nir = signal_cubes["NIR"][mask][:, members]
        grn = signal_cubes["Green"][mask][:, members]
        for signal in SIGNALS:
            if signal == "GCVI":
                columns.append(nir / grn - 1.0)
            else:
                columns.append(signal_cubes[signal][mask][:, members])
        y = np.concatenate(columns, axis=1)  # (n_usable, len(members) * 5)
        coef, _, rank, _ = np.linalg.lstsq(a, y, rcond=None)
        if rank < n_coefs:
            continue
        per_signal = coef.reshape(n_coefs, len(SIGNALS), len(members))
        feat = per_signal.transpose(1, 0, 2).reshape(len(FEATURE_NAMES), len(members))
        data.reshape(len(FEATURE_NAMES), -1)[:, members] = feat
        validity.ravel()[members] = 1

    return FeatureStack(origin=stack.origin, cell_size=stack.cell_size,
                        data=data, validity=validity)


def peak_gcvi_raster(stack: S2Stack, crop_mask: Raster, month_window,
                     config: HarmonicConfig, nodata: float = -9999.0) -> Raster:
    """Per-pixel maximum cloud-free GCVI within the month window."""
    n_rows, n_cols = stack.shape
    months = set(month_window)
    in_window = np.array([d.month in months for d in stack.dates])
    green = stack.bands["Green"]
    nir = stack.bands["NIR"]
    usable = (stack.cloud_prob <= config.cloud_prob_max) & (green > 0)
    usable &= in_window[:, None, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(usable, nir / np.where(green > 0, green, 1.0) - 1.0, -np.inf)
    peak = g.max(axis=0)
    values = np.where((crop_mask.values == 1) & np.isfinite(peak), peak, nodata)
    return Raster(origin=stack.origin, cell_size=stack.cell_size,
                  values=values, nodata=nodata)
