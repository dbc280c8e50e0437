"""Dataset ingestion, gap filtering, and the canonical on-disk layout.

A dataset is an hourly panel: N sensors with fixed coordinates, T
contiguous UTC hours, one PM2.5 value per sensor-hour (NaN where the
sensor reported nothing), and one city-level wind record per hour.

The canonical directory layout is self-describing:

    manifest.json   hour range, sensor count, provenance, seed
    sensors.csv     sensor_id,latitude,longitude
    pm25.csv        sensor_id,timestamp,value   (long form, missing
                    hours are absent rows, never zeros)
    wind.csv        timestamp,wind_speed_kmh,wind_dir_deg

Raw ingestion accepts the same long form at any sub-hourly cadence and
averages within each hour. Wind speeds may arrive in mph or m/s; the
column header must name the unit and the loader converts to km/h.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .geo import SensorMeta

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
HOUR = timedelta(hours=1)

WIND_SPEED_UNITS = {
    "wind_speed_kmh": 1.0,
    "wind_speed_mph": 1.609344,
    "wind_speed_ms": 3.6,
}


def parse_timestamp(raw: str) -> datetime:
    """Parse an ISO 8601 timestamp; naive times are taken as UTC."""
    text = raw.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_timestamp(dt: datetime) -> str:
    return dt.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S+00:00")


def floor_hour(dt: datetime) -> datetime:
    return dt.replace(minute=0, second=0, microsecond=0)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


@dataclass
class Dataset:
    """One hourly sensor panel plus its wind series."""

    sensors: tuple
    start: datetime
    pm25: np.ndarray            # (hours, n_sensors), NaN = missing
    wind: np.ndarray            # (hours, 2): speed km/h, from-direction deg
    provenance: str = "real"
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> "Dataset":
        if self.provenance not in ("real", "synthetic"):
            raise ValidationError(f"unknown provenance {self.provenance!r}")
        n = len(self.sensors)
        if self.pm25.ndim != 2 or self.pm25.shape[1] != n:
            raise ShapeError(
                f"pm25 must be (hours, {n}), got {self.pm25.shape}")
        t = self.pm25.shape[0]
        if t < 1:
            raise ValidationError("dataset needs at least one hour")
        if self.wind.shape != (t, 2):
            raise ShapeError(
                f"wind must be ({t}, 2), got {self.wind.shape}: "
                "hour ranges of pm25 and wind must match")
        if not np.isfinite(self.wind).all():
            raise ValidationError("wind contains non-finite entries")
        if np.any(self.wind[:, 0] < 0):
            raise ValidationError("wind speed must be >= 0")
        finite = self.pm25[np.isfinite(self.pm25)]
        if finite.size and finite.min() < 0:
            raise ValidationError("pm25 values must be >= 0")
        if self.start != floor_hour(self.start):
            raise ValidationError("start must lie on an hour boundary")
        for s in self.sensors:
            s.validate()
        return self

    @property
    def hours(self) -> int:
        return self.pm25.shape[0]

    def timestamps(self) -> list[datetime]:
        return [self.start + i * HOUR for i in range(self.hours)]

    def sensor_ids(self) -> list[str]:
        return [s.sensor_id for s in self.sensors]

    def coords(self) -> np.ndarray:
        return np.array([[s.latitude, s.longitude] for s in self.sensors])


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_malformed: int = 0
    values_clamped: int = 0

    def log(self) -> None:
        if self.rows_malformed:
            logger.warning("skipped %d malformed rows (of %d)",
                           self.rows_malformed, self.rows_read)
        if self.values_clamped:
            logger.warning("clamped %d negative values to 0 (of %d rows)",
                           self.values_clamped, self.rows_read)


def ingest_pm25(path, start: datetime | None = None,
                end: datetime | None = None):
    """Average raw PM2.5 rows into hourly series per sensor.

    The file is long-form csv with header ``sensor_id,timestamp,value``
    at any cadence. Returns ``(series, axis_start, report)`` where
    ``series`` maps sensor_id to a (T,) array over the common hour axis;
    hours with no rows are NaN, never zero. Malformed rows are skipped
    and counted; negative values are clamped to zero and counted.
    ``start``/``end`` (inclusive hours) pin the axis explicitly,
    otherwise it spans the data.
    """
    report = IngestReport()
    sums: dict[str, dict[datetime, list]] = {}
    lo = hi = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != \
                ["sensor_id", "timestamp", "value"]:
            raise ValidationError(
                f"{path}: expected header sensor_id,timestamp,value")
        for row in reader:
            report.rows_read += 1
            if len(row) < 3:
                report.rows_malformed += 1
                continue
            sensor_id = row[0].strip()
            try:
                ts = parse_timestamp(row[1])
                value = float(row[2])
            except (ValueError, TypeError):
                report.rows_malformed += 1
                continue
            if not sensor_id or not np.isfinite(value):
                report.rows_malformed += 1
                continue
            if value < 0:
                report.values_clamped += 1
                value = 0.0
            hour = floor_hour(ts)
            bucket = sums.setdefault(sensor_id, {}).setdefault(hour, [0.0, 0])
            bucket[0] += value
            bucket[1] += 1
            lo = hour if lo is None or hour < lo else lo
            hi = hour if hi is None or hour > hi else hi
    report.log()
    if start is not None:
        lo = floor_hour(start)
    if end is not None:
        hi = floor_hour(end)
    if lo is None or hi is None or hi < lo:
        raise ValidationError(f"{path}: no usable rows in the requested range")
    n_hours = int((hi - lo) / HOUR) + 1
    series = {}
    for sensor_id, buckets in sorted(sums.items()):
        values = np.full(n_hours, np.nan)
        for hour, (total, count) in buckets.items():
            idx = int((hour - lo) / HOUR)
            if 0 <= idx < n_hours:
                values[idx] = total / count
        series[sensor_id] = values
    return series, lo, report


def ingest_wind(path, start: datetime, n_hours: int) -> np.ndarray:
    """Load hourly wind onto a fixed hour axis, converting speed to km/h.

    The speed column header must name its unit (wind_speed_kmh,
    wind_speed_mph, or wind_speed_ms). Every hour in the axis must be
    covered exactly once.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 3:
            raise ValidationError(f"{path}: missing wind header")
        header = [h.strip() for h in header]
        if header[0] != "timestamp" or header[2] != "wind_dir_deg":
            raise ValidationError(
                f"{path}: expected timestamp,wind_speed_<unit>,wind_dir_deg")
        if header[1] not in WIND_SPEED_UNITS:
            raise ValidationError(
                f"{path}: unknown wind speed unit column {header[1]!r}; "
                f"use one of {sorted(WIND_SPEED_UNITS)}")
        to_kmh = WIND_SPEED_UNITS[header[1]]
        wind = np.full((n_hours, 2), np.nan)
        for row in reader:
            if len(row) < 3:
                raise ValidationError(f"{path}: short wind row {row!r}")
            hour = floor_hour(parse_timestamp(row[0]))
            idx = int((hour - start) / HOUR)
            if 0 <= idx < n_hours:
                wind[idx, 0] = float(row[1]) * to_kmh
                wind[idx, 1] = float(row[2]) % 360.0
    if not np.isfinite(wind).all():
        missing = int(np.isnan(wind[:, 0]).sum())
        raise ValidationError(
            f"{path}: wind does not cover the hour axis ({missing} hours "
            "missing); pm25 and wind hour ranges must match")
    return wind


def longest_missing_run(values: np.ndarray) -> int:
    """Length of the longest consecutive NaN run in a 1-d series."""
    longest = run = 0
    for missing in np.isnan(values):
        run = run + 1 if missing else 0
        longest = max(longest, run)
    return longest


def gap_filter(dataset: Dataset, max_gap_hours: int = 1):
    """Drop sensors with missing runs longer than ``max_gap_hours``.

    Surviving sensors get their isolated missing hours filled by linear
    interpolation of the adjacent hours (the average of the two
    neighbors; at the series boundary the single neighbor is used).
    Returns ``(filtered_dataset, dropped_ids, filled_count)``.
    """
    keep = []
    dropped = []
    for j, sensor in enumerate(dataset.sensors):
        if longest_missing_run(dataset.pm25[:, j]) <= max_gap_hours:
            keep.append(j)
        else:
            dropped.append(sensor.sensor_id)
    if dropped:
        logger.info("gap filter dropped %d of %d sensors: %s",
                    len(dropped), len(dataset.sensors), ", ".join(dropped))
    pm25 = dataset.pm25[:, keep].copy()
    t = pm25.shape[0]
    filled = 0
    for j in range(pm25.shape[1]):
        col = pm25[:, j]
        for i in np.flatnonzero(np.isnan(col)):
            left = col[i - 1] if i > 0 else np.nan
            right = col[i + 1] if i < t - 1 else np.nan
            neighbors = [v for v in (left, right) if np.isfinite(v)]
            if not neighbors:
                raise ValidationError(
                    "cannot fill a missing hour with no observed neighbors")
            col[i] = sum(neighbors) / len(neighbors)
            filled += 1
    out = Dataset(sensors=tuple(dataset.sensors[j] for j in keep),
                  start=dataset.start, pm25=pm25, wind=dataset.wind,
                  provenance=dataset.provenance, seed=dataset.seed,
                  extra=dict(dataset.extra))
    return out.validate(), dropped, filled


def export_dataset(dataset: Dataset, out_dir) -> Path:
    """Write the canonical dataset directory; returns its path."""
    dataset.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = ["sensor_id,latitude,longitude"]
    for s in dataset.sensors:
        rows.append(f"{s.sensor_id},{s.latitude!r},{s.longitude!r}")
    _atomic_write_text(out / "sensors.csv", "\n".join(rows) + "\n")

    stamps = [format_timestamp(ts) for ts in dataset.timestamps()]
    rows = ["sensor_id,timestamp,value"]
    for j, s in enumerate(dataset.sensors):
        col = dataset.pm25[:, j]
        for i in np.flatnonzero(np.isfinite(col)):
            rows.append(f"{s.sensor_id},{stamps[i]},{float(col[i])!r}")
    _atomic_write_text(out / "pm25.csv", "\n".join(rows) + "\n")

    rows = ["timestamp,wind_speed_kmh,wind_dir_deg"]
    for i, stamp in enumerate(stamps):
        rows.append(f"{stamp},{float(dataset.wind[i, 0])!r},"
                    f"{float(dataset.wind[i, 1])!r}")
    _atomic_write_text(out / "wind.csv", "\n".join(rows) + "\n")

    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "provenance": dataset.provenance,
        "seed": dataset.seed,
        "start": format_timestamp(dataset.start),
        "hours": dataset.hours,
        "sensor_count": len(dataset.sensors),
        "files": {"sensors": "sensors.csv", "pm25": "pm25.csv",
                  "wind": "wind.csv"},
        "extra": dataset.extra,
    }
    _atomic_write_text(out / "manifest.json",
                       json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def load_sensors(path) -> tuple:
    sensors = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != \
                ["sensor_id", "latitude", "longitude"]:
            raise ValidationError(
                f"{path}: expected header sensor_id,latitude,longitude")
        for row in reader:
            if len(row) < 3:
                raise ValidationError(f"{path}: short sensor row {row!r}")
            meta = SensorMeta(row[0].strip(), float(row[1]), float(row[2]))
            meta.validate()
            sensors.append(meta)
    if not sensors:
        raise ValidationError(f"{path}: no sensors")
    ids = [s.sensor_id for s in sensors]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: duplicate sensor ids")
    return tuple(sensors)


def load_dataset(dataset_dir) -> Dataset:
    """Read a canonical dataset directory back into memory."""
    root = Path(dataset_dir)
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported manifest schema {manifest.get('schema_version')!r}")
    files = manifest.get("files", {})
    start = parse_timestamp(manifest["start"])
    n_hours = int(manifest["hours"])
    end = start + (n_hours - 1) * HOUR

    sensors = load_sensors(root / files.get("sensors", "sensors.csv"))
    if len(sensors) != int(manifest["sensor_count"]):
        raise ValidationError(
            f"manifest says {manifest['sensor_count']} sensors, "
            f"file has {len(sensors)}")

    series, axis_start, _ = ingest_pm25(
        root / files.get("pm25", "pm25.csv"), start=start, end=end)
    if axis_start != start:
        raise ValidationError("pm25 axis does not match the manifest start")
    pm25 = np.full((n_hours, len(sensors)), np.nan)
    known = {s.sensor_id for s in sensors}
    for sensor_id in series:
        if sensor_id not in known:
            raise ValidationError(
                f"pm25.csv references unknown sensor {sensor_id!r}")
    for j, s in enumerate(sensors):
        if s.sensor_id in series:
            pm25[:, j] = series[s.sensor_id]

    wind = ingest_wind(root / files.get("wind", "wind.csv"), start, n_hours)
    return Dataset(sensors=sensors, start=start, pm25=pm25, wind=wind,
                   provenance=manifest.get("provenance", "real"),
                   seed=manifest.get("seed"),
                   extra=manifest.get("extra", {})).validate()
