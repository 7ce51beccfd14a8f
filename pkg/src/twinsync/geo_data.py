"""Trajectory datasets: CSV ingestion, synthetic generation, standardization
and train/validation splitting.

The model input is the 6-vector ``[timestamp, speed, distance, stay_duration,
lat, lon]``; the target is ``[next_lat, next_lon]``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConstantColumn,
    DimensionMismatch,
    InvalidCount,
    InvalidRatio,
    MalformedRow,
    MissingColumn,
    NonMonotonicTimestamp,
    OutOfRange,
    TooFewRecords,
)

CSV_COLUMNS = (
    "vehicle_id",
    "timestamp",
    "speed_kmh",
    "distance_m",
    "stay_duration_s",
    "lat",
    "lon",
    "next_lat",
    "next_lon",
)
FEATURE_NAMES = ("timestamp", "speed", "distance", "stay_duration", "lat", "lon")
TARGET_NAMES = ("next_lat", "next_lon")

# default synthetic bounding box (lat_min, lat_max, lon_min, lon_max)
DEFAULT_BBOX = (40.95, 41.15, 28.85, 29.15)
EPOCH_2019 = 1546300800.0
METERS_PER_DEG_LAT = 111_320.0


@dataclass(frozen=True)
class TrajectoryRecord:
    vehicle_id: str
    timestamp: float
    speed: float
    distance: float
    stay_duration: float
    lat: float
    lon: float
    next_lat: float
    next_lon: float

    def features(self) -> tuple:
        return (self.timestamp, self.speed, self.distance, self.stay_duration,
                self.lat, self.lon)

    def target(self) -> tuple:
        return (self.next_lat, self.next_lon)


@dataclass(frozen=True)
class Dataset:
    records: tuple
    source: str = "file"  # "file" | "synthetic"

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def features(self) -> np.ndarray:
        return np.array([r.features() for r in self.records], dtype=float).reshape(-1, 6)

    def targets(self) -> np.ndarray:
        return np.array([r.target() for r in self.records], dtype=float).reshape(-1, 2)

    def vehicle_ids(self) -> list:
        return sorted({r.vehicle_id for r in self.records})


@dataclass(frozen=True)
class SplitPair:
    train: Dataset
    validation: Dataset
    ratio: float
    seed: int


def _check_ranges(rec: TrajectoryRecord, line_no: int) -> None:
    for name in ("timestamp", "speed", "distance", "stay_duration",
                 "lat", "lon", "next_lat", "next_lon"):
        if not math.isfinite(getattr(rec, name)):
            raise MalformedRow(line_no, f"non-finite value in {name!r}")
    for name in ("speed", "distance", "stay_duration"):
        if getattr(rec, name) < 0:
            raise OutOfRange(line_no, name, getattr(rec, name))
    for name in ("lat", "next_lat"):
        if not -90.0 <= getattr(rec, name) <= 90.0:
            raise OutOfRange(line_no, name, getattr(rec, name))
    for name in ("lon", "next_lon"):
        if not -180.0 <= getattr(rec, name) <= 180.0:
            raise OutOfRange(line_no, name, getattr(rec, name))


def _check_ordering(records: Sequence[TrajectoryRecord], line_numbers=None) -> None:
    last = {}
    for k, rec in enumerate(records):
        prev = last.get(rec.vehicle_id)
        if prev is not None and not rec.timestamp > prev:
            line_no = line_numbers[k] if line_numbers else k + 1
            raise NonMonotonicTimestamp(rec.vehicle_id, line_no)
        last[rec.vehicle_id] = rec.timestamp


def _record_from_row(row: dict, line_no: int) -> TrajectoryRecord:
    vid = (row.get("vehicle_id") or "").strip()
    if not vid:
        raise MalformedRow(line_no, "empty vehicle_id")
    values = {}
    for col, field in zip(CSV_COLUMNS[1:], ("timestamp", "speed", "distance",
                                            "stay_duration", "lat", "lon",
                                            "next_lat", "next_lon")):
        raw = row.get(col)
        if raw is None:
            raise MalformedRow(line_no, f"missing value for {col!r}")
        try:
            values[field] = float(raw)
        except ValueError:
            raise MalformedRow(line_no, f"cannot parse {col!r} value {raw!r}") from None
    rec = TrajectoryRecord(vehicle_id=vid, **values)
    _check_ranges(rec, line_no)
    return rec


def read_csv_rows(path):
    """Yield ``(line_no, row_dict)`` pairs after validating the header.

    Extra columns (e.g. prediction columns of an annotated file) are allowed.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise MissingColumn(CSV_COLUMNS[0]) from None
        for col in CSV_COLUMNS:
            if col not in header:
                raise MissingColumn(col)
        for row in reader:
            line_no = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise MalformedRow(
                    line_no, f"expected {len(header)} fields, got {len(row)}")
            yield line_no, dict(zip(header, row))


def parse_trajectory_csv(path) -> Dataset:
    records, lines = [], []
    for line_no, row in read_csv_rows(path):
        records.append(_record_from_row(row, line_no))
        lines.append(line_no)
    _check_ordering(records, lines)
    return Dataset(tuple(records), source="file")


def format_float(x: float) -> str:
    return repr(float(x))


def write_trajectory_csv(data: Dataset | Iterable[TrajectoryRecord], path,
                         extra_columns: dict | None = None) -> None:
    """Write records in the canonical schema.

    ``extra_columns`` maps column name to a per-record sequence of values
    (``None`` written as an empty cell).
    """
    records = list(data)
    extra_columns = extra_columns or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + list(extra_columns))
        for k, r in enumerate(records):
            row = [r.vehicle_id] + [format_float(v) for v in (
                r.timestamp, r.speed, r.distance, r.stay_duration,
                r.lat, r.lon, r.next_lat, r.next_lon)]
            for col in extra_columns.values():
                v = col[k]
                row.append("" if v is None else format_float(v))
            w.writerow(row)


def generate_synthetic_trajectories(n_vehicles: int, samples_per_vehicle: int,
                                    seed: int, bbox=DEFAULT_BBOX,
                                    interval_s=(5.0, 15.0),
                                    max_turn_deg=12.0) -> Dataset:
    """Generate smooth constant-speed paths with bounded heading changes.

    Each vehicle drives piecewise-constant-speed segments; the heading drifts by
    at most ``max_turn_deg`` per sample and reflects off the bounding box.
    Occasionally a vehicle stops for a few samples, which accumulates
    ``stay_duration``. The record's ``speed`` is the speed held until the next
    sample, so ``next_*`` is a smooth function of the features.
    """
    if n_vehicles < 1:
        raise InvalidCount(f"n_vehicles must be >= 1, got {n_vehicles}")
    if samples_per_vehicle < 2:
        raise InvalidCount(f"samples_per_vehicle must be >= 2, got {samples_per_vehicle}")
    lat_min, lat_max, lon_min, lon_max = bbox
    rng = np.random.default_rng(seed)
    width = len(str(n_vehicles))
    records = []
    for v in range(n_vehicles):
        vid = f"V{v + 1:0{width}d}"
        lat = rng.uniform(lat_min + 0.2 * (lat_max - lat_min), lat_max - 0.2 * (lat_max - lat_min))
        lon = rng.uniform(lon_min + 0.2 * (lon_max - lon_min), lon_max - 0.2 * (lon_max - lon_min))
        heading = rng.uniform(0.0, 2 * math.pi)
        cruise = rng.uniform(30.0, 80.0)
        t = EPOCH_2019 + round(rng.uniform(0.0, 3600.0), 1)
        stop_left = 0
        stay = 0.0
        prev_dist = 0.0
        # one extra position so the last record has a successor
        points = []
        for _ in range(samples_per_vehicle + 1):
            dt = round(rng.uniform(*interval_s), 1)
            if stop_left == 0 and rng.random() < 0.01:
                stop_left = int(rng.integers(2, 6))
            if stop_left > 0:
                speed = 0.0
                stop_left -= 1
            else:
                if rng.random() < 0.1:
                    cruise = float(np.clip(cruise + rng.normal(0.0, 8.0), 20.0, 90.0))
                speed = cruise
            points.append((t, speed, prev_dist, stay, lat, lon))
            if speed == 0.0:
                stay += dt
            else:
                stay = 0.0
            heading += math.radians(rng.uniform(-max_turn_deg, max_turn_deg))
            step = speed / 3.6 * dt
            dlat = step * math.cos(heading) / METERS_PER_DEG_LAT
            dlon = step * math.sin(heading) / (METERS_PER_DEG_LAT * math.cos(math.radians(lat)))
            if not lat_min <= lat + dlat <= lat_max:
                heading = math.pi - heading
                dlat = -dlat
            if not lon_min <= lon + dlon <= lon_max:
                heading = -heading
                dlon = -dlon
            lat += dlat
            lon += dlon
            prev_dist = step
            t = round(t + dt, 1)
        for k in range(samples_per_vehicle):
            ts, speed, dist, stay_k, la, lo = points[k]
            records.append(TrajectoryRecord(
                vehicle_id=vid, timestamp=ts, speed=speed, distance=dist,
                stay_duration=stay_k, lat=la, lon=lo,
                next_lat=points[k + 1][4], next_lon=points[k + 1][5]))
    return Dataset(tuple(records), source="synthetic")


@dataclass(frozen=True, eq=False)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray
    target_means: np.ndarray
    target_stds: np.ndarray

    def to_dict(self) -> dict:
        return {
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "target_means": [float(v) for v in self.target_means],
            "target_stds": [float(v) for v in self.target_stds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        arrays = {}
        for key, size in (("means", 6), ("stds", 6), ("target_means", 2), ("target_stds", 2)):
            a = np.asarray(d[key], dtype=float)
            if a.shape != (size,):
                raise DimensionMismatch(f"{key}: expected {size} values, got {a.shape}")
            arrays[key] = a
        if np.any(arrays["stds"] <= 0) or np.any(arrays["target_stds"] <= 0):
            raise ValueError("standard deviations must be positive")
        return cls(**arrays)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Standardizer":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Standardizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def transform_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 6:
            raise DimensionMismatch(f"expected N x 6 features, got {X.shape}")
        return (X - self.means) / self.stds

    def transform_targets(self, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != 2:
            raise DimensionMismatch(f"expected N x 2 targets, got {Y.shape}")
        return (Y - self.target_means) / self.target_stds


def _population_stats(M: np.ndarray, names) -> tuple:
    # fsum keeps epoch-scale timestamps from drifting the mean by ~1e-7
    n = M.shape[0]
    means = np.array([math.fsum(M[:, j]) / n for j in range(M.shape[1])])
    centered = M - means
    means = means + np.array([math.fsum(centered[:, j]) / n for j in range(M.shape[1])])
    centered = M - means
    # population std (divisor N)
    stds = np.sqrt(np.array([math.fsum(centered[:, j] ** 2) / n for j in range(M.shape[1])]))
    for j, name in enumerate(names):
        # relative test so large-magnitude columns (timestamps) are judged fairly
        scale = max(abs(means[j]), 1.0)
        if stds[j] <= 1e-12 * scale:
            raise ConstantColumn(name)
    return means, stds


def fit_standardizer(data: Dataset) -> Standardizer:
    if len(data) < 2:
        raise TooFewRecords(f"need at least 2 records, got {len(data)}")
    X, Y = data.features(), data.targets()
    means, stds = _population_stats(X, FEATURE_NAMES)
    tmeans, tstds = _population_stats(Y, TARGET_NAMES)
    return Standardizer(means, stds, tmeans, tstds)


def transform(std: Standardizer, data: Dataset) -> tuple:
    """Return ``(features, targets)`` in standardized units."""
    return std.transform_features(data.features()), std.transform_targets(data.targets())


def inverse_transform_targets(std: Standardizer, predictions) -> np.ndarray:
    P = np.asarray(predictions, dtype=float)
    if P.ndim == 1 and P.shape[0] == 2:
        return P * std.target_stds + std.target_means
    if P.ndim != 2 or P.shape[1] != 2:
        raise DimensionMismatch(f"expected N x 2 predictions, got {P.shape}")
    return P * std.target_stds + std.target_means


def split_dataset(data: Dataset, ratio: float = 0.8, seed: int = 0) -> SplitPair:
    if not 0.0 < ratio < 1.0:
        raise InvalidRatio(f"ratio must lie in (0, 1), got {ratio}")
    n = len(data)
    if n < 2:
        raise TooFewRecords(f"need at least 2 records to split, got {n}")
    n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    # keep original order inside each side so per-vehicle ordering survives
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    recs = data.records
    return SplitPair(
        train=Dataset(tuple(recs[i] for i in train_idx), data.source),
        validation=Dataset(tuple(recs[i] for i in val_idx), data.source),
        ratio=ratio,
        seed=seed,
    )
