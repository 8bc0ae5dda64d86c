"""Shared domain types, coordinate conventions, and bit-exact file IO.

Everything is expressed in geographic degrees. Synthetic "10 m" scenes use a
cell size of 0.0001 degrees (about 11 m at the equator); the pipeline never
needs metric distances, so no projection machinery exists here.

Raster files use an ESRI-ASCII-style text grid with an explicit nodata line.
Row 0 of the in-memory grid is the northernmost row (image convention); the
file stores rows top to bottom. Writes are canonical: equal in-memory rasters
always serialize to identical bytes.
"""

from __future__ import annotations

import datetime as dt
import enum
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np


class HeightClass(enum.IntEnum):
    """Crop height class; integer values double as raster codes.

    TREE is only ever produced by the shot height model, never by the
    per-cell optical models.
    """

    SHORT = 0
    TALL = 1
    TREE = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, text: str) -> "HeightClass":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown height class {text!r}") from None


# Raster code for non-crop / missing pixels in class rasters.
CODE_NODATA = -1

# Alias: a plain Gregorian date is exactly what the pipeline needs.
DateStamp = dt.date


class RasterFormatError(ValueError):
    """Malformed raster file; message carries the 1-based line number."""


class TableFormatError(ValueError):
    """Malformed shot CSV or reference JSON-lines file."""


def fmt_number(v: float) -> str:
    """Canonical text form of a numeric value.

    Integral values print without a decimal point ("1", "-9999"); everything
    else uses the shortest decimal string that round-trips to the same float.
    """
    f = float(v)
    if not math.isfinite(f):
        raise ValueError(f"non-finite value cannot be serialized: {v!r}")
    if f == int(f) and abs(f) < 1e16:
        return str(int(f))
    return repr(f)


def derive_seed(base_seed: int, *tokens: object) -> int:
    """Stable 63-bit seed for a named substream of ``base_seed``.

    Hashes the decimal base seed together with the token strings, so parallel
    and serial runs that process units in any order agree on per-unit seeds.
    """
    text = "|".join([str(int(base_seed))] + [str(t) for t in tokens])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


@dataclass(frozen=True)
class LatLon:
    """Geographic point; longitude normalized to [-180, 180)."""

    lat: float
    lon: float

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        lon = self.lon
        if not math.isfinite(lon):
            raise ValueError(f"longitude not finite: {lon}")
        lon = ((lon + 180.0) % 360.0) - 180.0
        object.__setattr__(self, "lon", lon)


def parse_date(text: str) -> DateStamp:
    """Parse an ISO ``YYYY-MM-DD`` date."""
    try:
        return dt.date.fromisoformat(text)
    except ValueError as exc:
        raise TableFormatError(f"invalid date {text!r}: {exc}") from None


@dataclass
class Raster:
    """Georeferenced 2-D grid; ``origin`` is the lower-left corner.

    ``values`` is an (n_rows, n_cols) float array with row 0 the northernmost
    row. ``nodata`` is a sentinel never used as a valid value.
    """

    origin: LatLon
    cell_size: float
    values: np.ndarray
    nodata: float = -9999.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"raster values must be 2-D, got {self.values.ndim}-D")
        if self.cell_size <= 0:
            raise ValueError(f"cell_size must be positive: {self.cell_size}")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def lat_max(self) -> float:
        return self.origin.lat + self.n_rows * self.cell_size

    @property
    def lon_max(self) -> float:
        return self.origin.lon + self.n_cols * self.cell_size

    def __eq__(self, other) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return (
            self.origin == other.origin
            and self.cell_size == other.cell_size
            and self.nodata == other.nodata
            and self.values.shape == other.values.shape
            and bool(np.array_equal(self.values, other.values))
        )

    def valid_mask(self) -> np.ndarray:
        return self.values != self.nodata

    def contains(self, lat: float, lon: float) -> bool:
        return (
            self.origin.lat <= lat < self.lat_max
            and self.origin.lon <= lon < self.lon_max
        )

    def point_to_pixel(self, lat: float, lon: float) -> tuple[int, int]:
        """Pixel (row, col) containing a point; raises if outside the grid."""
        if not self.contains(lat, lon):
            raise ValueError(f"point ({lat}, {lon}) outside raster extent")
        col = int((lon - self.origin.lon) / self.cell_size)
        row_from_bottom = int((lat - self.origin.lat) / self.cell_size)
        row = self.n_rows - 1 - row_from_bottom
        # Guard against floating-point landing exactly on the far edge.
        col = min(col, self.n_cols - 1)
        row = max(row, 0)
        return row, col

    def pixel_center(self, row: int, col: int) -> LatLon:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise IndexError(f"pixel ({row}, {col}) outside raster")
        lat = self.origin.lat + (self.n_rows - row - 0.5) * self.cell_size
        lon = self.origin.lon + (col + 0.5) * self.cell_size
        return LatLon(lat, lon)

    def value_at(self, lat: float, lon: float) -> float:
        row, col = self.point_to_pixel(lat, lon)
        return float(self.values[row, col])

    def full_like(self, fill: float, nodata: float | None = None) -> "Raster":
        nd = self.nodata if nodata is None else nodata
        return Raster(
            origin=self.origin,
            cell_size=self.cell_size,
            values=np.full_like(self.values, fill),
            nodata=nd,
        )


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def write_raster(raster: Raster, path) -> None:
    """Write a raster in canonical form: fixed header order, one row per line."""
    vals = raster.values
    lines = [
        f"ncols {raster.n_cols}",
        f"nrows {raster.n_rows}",
        f"xllcorner {fmt_number(raster.origin.lon)}",
        f"yllcorner {fmt_number(raster.origin.lat)}",
        f"cellsize {fmt_number(raster.cell_size)}",
        f"nodata_value {fmt_number(raster.nodata)}",
    ]
    for r in range(raster.n_rows):
        lines.append(" ".join(fmt_number(v) for v in vals[r]))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_raster(path) -> Raster:
    """Parse a raster file; errors carry the offending line number."""
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    header: dict[str, float] = {}
    for i, key in enumerate(_HEADER_KEYS):
        if i >= len(lines):
            raise RasterFormatError(f"line {i + 1}: missing header line '{key}'")
        parts = lines[i].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise RasterFormatError(f"line {i + 1}: expected '{key} <value>', got {lines[i]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise RasterFormatError(f"line {i + 1}: non-numeric {key}: {parts[1]!r}") from None
    n_cols = int(header["ncols"])
    n_rows = int(header["nrows"])
    if n_cols <= 0 or n_rows <= 0:
        raise RasterFormatError("line 1: ncols/nrows must be positive")
    body = lines[len(_HEADER_KEYS):]
    # Trailing blank lines are tolerated; blank lines inside the grid are not.
    while body and body[-1] == "":
        body.pop()
    if len(body) != n_rows:
        raise RasterFormatError(
            f"line {len(_HEADER_KEYS) + len(body) + 1}: expected {n_rows} data rows, found {len(body)}"
        )
    values = np.empty((n_rows, n_cols), dtype=np.float64)
    for r, line in enumerate(body):
        lineno = len(_HEADER_KEYS) + r + 1
        tokens = line.split()
        if len(tokens) != n_cols:
            raise RasterFormatError(
                f"line {lineno}: expected {n_cols} values, found {len(tokens)}"
            )
        try:
            row = np.array([float(t) for t in tokens], dtype=np.float64)
        except ValueError:
            bad = next(t for t in tokens if not _is_number(t))
            raise RasterFormatError(f"line {lineno}: non-numeric token {bad!r}") from None
        values[r] = row
    return Raster(
        origin=LatLon(header["yllcorner"], header["xllcorner"]),
        cell_size=header["cellsize"],
        values=values,
        nodata=header["nodata_value"],
    )


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


@dataclass(frozen=True)
class ReferenceRecord:
    """One ground-reference point: a crop name at a location and year."""

    location: LatLon
    crop_name: str
    year: int
    season_tag: str | None = None

    def __post_init__(self):
        if not self.crop_name:
            raise ValueError("crop_name must be non-empty")


def read_reference(path) -> list[ReferenceRecord]:
    """Read reference records from JSON-lines (keys lat, lon, crop, year[, season])."""
    records: list[ReferenceRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TableFormatError(f"line {lineno}: invalid JSON: {exc}") from None
            for key in ("lat", "lon", "crop", "year"):
                if key not in obj:
                    raise TableFormatError(f"line {lineno}: missing key {key!r}")
            records.append(
                ReferenceRecord(
                    location=LatLon(float(obj["lat"]), float(obj["lon"])),
                    crop_name=str(obj["crop"]),
                    year=int(obj["year"]),
                    season_tag=obj.get("season"),
                )
            )
    return records


def write_reference(records: list[ReferenceRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            obj = {
                "lat": rec.location.lat,
                "lon": rec.location.lon,
                "crop": rec.crop_name,
                "year": rec.year,
            }
            if rec.season_tag is not None:
                obj["season"] = rec.season_tag
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def canonical_json_bytes(obj) -> bytes:
    """Canonical JSON encoding: sorted keys, no whitespace, UTF-8."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
