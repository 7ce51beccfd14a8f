"""Combined-coordinate regression metrics.

Each metric pools both coordinates: per row the lat and lon errors are added
before averaging over rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyInput, NonFiniteInput, ZeroVariance


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    r_squared: float
    n: int

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mse": self.mse, "r2": self.r_squared, "n": self.n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(mae=float(d["mae"]), mse=float(d["mse"]),
                   r_squared=float(d["r2"]), n=int(d["n"]))

    def csv_header(self) -> str:
        return "mae,mse,r2,n"

    def to_csv_line(self) -> str:
        return f"{self.mae!r},{self.mse!r},{self.r_squared!r},{self.n}"


def _pairs(actual, predicted) -> tuple:
    A = np.asarray(actual, dtype=float)
    P = np.asarray(predicted, dtype=float)
    if A.size == 0 or P.size == 0:
        raise EmptyInput("no coordinate pairs")
    if A.ndim != 2 or A.shape[1] != 2 or A.shape != P.shape:
        raise DimensionMismatch(f"expected matching N x 2 arrays, got {A.shape} and {P.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(P))):
        raise NonFiniteInput("coordinates contain NaN or infinity")
    return A, P


def mae(actual, predicted) -> float:
    A, P = _pairs(actual, predicted)
    return float(np.abs(A - P).sum(axis=1).mean())


def mse(actual, predicted) -> float:
    A, P = _pairs(actual, predicted)
    return float(((A - P) ** 2).sum(axis=1).mean())


def r_squared(actual, predicted) -> float:
    """1 - SSE/SST, both pooled over the two coordinates.

    SST measures spread of the actual values around their per-coordinate means.
    """
    A, P = _pairs(actual, predicted)
    sst = float(((A - A.mean(axis=0)) ** 2).sum())
    if sst == 0.0:
        raise ZeroVariance("actual coordinates have zero variance")
    sse = float(((A - P) ** 2).sum())
    return 1.0 - sse / sst


def evaluate(actual, predicted) -> MetricsReport:
    A, P = _pairs(actual, predicted)
    return MetricsReport(mae=mae(A, P), mse=mse(A, P), r_squared=r_squared(A, P), n=A.shape[0])


def per_coordinate(actual, predicted) -> dict:
    """Debug breakdown: MAE and MSE of each coordinate separately."""
    A, P = _pairs(actual, predicted)
    err = A - P
    return {
        name: {"mae": float(np.abs(err[:, k]).mean()), "mse": float((err[:, k] ** 2).mean())}
        for k, name in enumerate(("lat", "lon"))
    }

