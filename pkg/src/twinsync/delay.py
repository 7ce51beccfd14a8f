"""Witnessed physical-to-virtual delay with and without on-edge prediction.

Delays follow a linear law in the vehicle count ``n``:

    no_dt(n) = no_dt_slope * n
    dt(n)    = dt_slope * n + dt_intercept

The default coefficients are least-squares fits to the bundled reference
table (``REFERENCE_TABLE``), which the law reproduces to within 1e-6 s.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateInput, InvalidCount, InvalidInput

# (n, no_dt_s, dt_s, improvement_pct)
REFERENCE_TABLE = (
    (2, 1.657793333, 0.196686667, 88.13),
    (5, 4.144483333, 0.347716667, 91.61),
    (10, 8.288966667, 0.599433333, 92.76),
    (15, 12.43345, 0.85115, 93.15),
    (20, 16.57793333, 1.102866667, 93.34),
    (25, 20.72241667, 1.354583333, 93.46),
    (30, 24.8669, 1.6063, 93.54),
    (35, 29.01138333, 1.858016667, 93.59),
    (40, 33.15586667, 2.109733333, 93.63),
)
DEFAULT_N_VALUES = tuple(row[0] for row in REFERENCE_TABLE)


@dataclass(frozen=True)
class DelayCoefficients:
    no_dt_slope: float
    dt_slope: float
    dt_intercept: float

    def __post_init__(self):
        if min(self.no_dt_slope, self.dt_slope, self.dt_intercept) < 0:
            raise InvalidInput("delay coefficients must be non-negative")
        if not self.no_dt_slope > self.dt_slope:
            raise InvalidInput("prediction must reduce the per-vehicle delay slope")


@dataclass(frozen=True)
class PhysicalParams:
    """Scenario parameters carried as report metadata; they do not enter the law."""
    rsu_coverage_km: float = 1.0
    v2i_rate_mbps: float = 100.0
    v2v_rate_mbps: float = 6.0
    cch_duration_ms: float = 46.0
    payload_bytes: int = 310
    beacon_interval_ms: float = 100.0
    app_processing_ms: float = 2.23
    svr_predict_delay_s: float = 0.0037
    dnn_predict_delay_s: float = 0.0883

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise InvalidInput(f"{name} must be positive, got {value}")


@dataclass(frozen=True)
class DelayRow:
    n: int
    no_dt_s: float
    dt_s: float
    improvement_pct: float
    model_derived: bool = False


@dataclass(frozen=True)
class DelayReport:
    rows: tuple
    coefficients: DelayCoefficients
    params: PhysicalParams = field(default_factory=PhysicalParams)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "no_dt_s", "dt_s", "improvement_pct"])
        for r in self.rows:
            w.writerow([r.n, f"{r.no_dt_s:.9f}", f"{r.dt_s:.9f}", f"{r.improvement_pct:.6f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "coefficients": asdict(self.coefficients),
            "physical_params": asdict(self.params),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def fit_delay_coefficients(table_rows) -> DelayCoefficients:
    """Least-squares fit of ``no_dt = a*n`` and ``dt = b*n + c``."""
    rows = [(float(r[0]), float(r[1]), float(r[2])) for r in table_rows]
    ns = np.array([r[0] for r in rows])
    if len(set(ns.tolist())) < 2:
        raise DegenerateInput("need at least two distinct vehicle counts")
    no_dt = np.array([r[1] for r in rows])
    dt = np.array([r[2] for r in rows])
    a = float(ns @ no_dt / (ns @ ns))
    design = np.column_stack([ns, np.ones_like(ns)])
    (b, c), *_ = np.linalg.lstsq(design, dt, rcond=None)
    return DelayCoefficients(no_dt_slope=a, dt_slope=float(b), dt_intercept=float(c))


DEFAULT_COEFFICIENTS = fit_delay_coefficients(REFERENCE_TABLE)


def _check_n(n) -> None:
    if isinstance(n, bool) or int(n) != n or n < 1:
        raise InvalidCount(f"vehicle count must be an integer >= 1, got {n!r}")


def no_dt_delay(n: int, coeff: DelayCoefficients = DEFAULT_COEFFICIENTS) -> float:
    _check_n(n)
    return coeff.no_dt_slope * n


def dt_delay(n: int, coeff: DelayCoefficients = DEFAULT_COEFFICIENTS) -> float:
    _check_n(n)
    return coeff.dt_slope * n + coeff.dt_intercept


def improvement_percent(no_dt: float, dt: float) -> float:
    if not (math.isfinite(no_dt) and no_dt > 0):
        raise InvalidInput(f"no-DT delay must be positive, got {no_dt}")
    if not (math.isfinite(dt) and dt >= 0):
        raise InvalidInput(f"DT delay must be non-negative, got {dt}")
    return 100.0 * (no_dt - dt) / no_dt


def delay_report(n_values=DEFAULT_N_VALUES, coeff: DelayCoefficients = DEFAULT_COEFFICIENTS,
                 params: PhysicalParams | None = None) -> DelayReport:
    tabulated = set(DEFAULT_N_VALUES)
    rows = []
    for n in n_values:
        a, b = no_dt_delay(n, coeff), dt_delay(n, coeff)
        rows.append(DelayRow(n=int(n), no_dt_s=a, dt_s=b,
                             improvement_pct=improvement_percent(a, b),
                             model_derived=int(n) not in tabulated))
    return DelayReport(rows=tuple(rows), coefficients=coeff, params=params or PhysicalParams())
