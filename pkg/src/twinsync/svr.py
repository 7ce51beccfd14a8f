"""Epsilon-insensitive support vector regression with an RBF kernel.

Training maximizes the dual

    D(beta) = -1/2 beta' K beta - eps * sum(alpha + alpha*) + y' beta,
    beta = alpha - alpha*,  0 <= alpha, alpha* <= C,  sum(beta) = 0,

with sequential minimal optimization over the 2N variables (alpha, alpha*).
Each step picks the maximal KKT-violating pair and solves the two-variable
subproblem in closed form. Kernel rows are computed on demand and held in an
LRU cache, so the Gram matrix is never materialized for large N.
"""
from __future__ import annotations

import json
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateDiagonal,
    DimensionMismatch,
    InvalidHyperparams,
    MaxIterationsExceeded,
    NonFiniteInput,
)

TAU = 1e-12
SELECTION_RULES = ("second-order", "max-violation")


@dataclass(frozen=True)
class SvrHyperparams:
    c: float = 10.0
    epsilon: float = 0.01
    sigma: float = 1.0
    tol: float = 1e-6
    max_passes: int | None = None  # None -> 10 * N
    selection: str = "second-order"

    def __post_init__(self):
        if not (self.c > 0 and math.isfinite(self.c)):
            raise InvalidHyperparams(f"C must be positive, got {self.c}")
        if not (self.epsilon >= 0 and math.isfinite(self.epsilon)):
            raise InvalidHyperparams(f"epsilon must be non-negative, got {self.epsilon}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise InvalidHyperparams(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.tol < 1:
            raise InvalidHyperparams(f"tol must lie in (0, 1), got {self.tol}")
        if self.selection not in SELECTION_RULES:
            raise InvalidHyperparams(f"unknown selection rule {self.selection!r}")
        if self.max_passes is not None and self.max_passes < 1:
            raise InvalidHyperparams(f"max_passes must be >= 1, got {self.max_passes}")

    def iteration_limit(self, n: int) -> int:
        return self.max_passes if self.max_passes is not None else 10 * n


@dataclass(frozen=True, eq=False)
class SvrModel:
    support_vectors: np.ndarray
    beta: np.ndarray
    bias: float
    hyperparams: SvrHyperparams
    n_iter: int = 0
    converged: bool = True

    def predict(self, X) -> np.ndarray:
        return predict_svr_batch(self, X)

    def to_dict(self) -> dict:
        return {
            "type": "svr",
            "sigma": float(self.hyperparams.sigma),
            "c": float(self.hyperparams.c),
            "epsilon": float(self.hyperparams.epsilon),
            "bias": float(self.bias),
            "support_vectors": [[float(v) for v in row] for row in self.support_vectors],
            "beta": [float(v) for v in self.beta],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SvrModel":
        if d.get("type") != "svr":
            raise ValueError(f"not an svr model document: type={d.get('type')!r}")
        hp = SvrHyperparams(c=d["c"], epsilon=d["epsilon"], sigma=d["sigma"])
        beta = np.asarray(d["beta"], dtype=float).reshape(-1)
        sv = np.asarray(d["support_vectors"], dtype=float)
        if sv.size == 0:
            sv = sv.reshape(0, 0)
        if sv.shape[0] != beta.shape[0]:
            raise DimensionMismatch("support_vectors and beta differ in length")
        return cls(support_vectors=sv, beta=beta, bias=float(d["bias"]), hyperparams=hp)

    def to_json(self) -> str:
        # repr-based float output is the shortest string that round-trips exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "SvrModel":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SvrModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class SvrPair:
    lat_model: SvrModel
    lon_model: SvrModel

    def predict(self, X) -> np.ndarray:
        return np.column_stack([self.lat_model.predict(X), self.lon_model.predict(X)])


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("input contains NaN or infinity")


def rbf_kernel(a, b, sigma: float) -> float:
    if not sigma > 0:
        raise InvalidHyperparams(f"sigma must be positive, got {sigma}")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_finite(a, b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(math.exp(-float(d @ d) / (2.0 * sigma * sigma)))


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    return np.maximum(d, 0.0)


def rbf_cross(A, B, sigma: float) -> np.ndarray:
    """Kernel block K[i, j] = K(A[i], B[j])."""
    return np.exp(-_sq_dists(A, B) / (2.0 * sigma * sigma))


def gram_matrix(X, sigma: float) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 1:
        raise DimensionMismatch("need at least one row")
    if not sigma > 0:
        raise InvalidHyperparams(f"sigma must be positive, got {sigma}")
    _check_finite(X)
    K = rbf_cross(X, X, sigma)
    K = 0.5 * (K + K.T)
    np.fill_diagonal(K, 1.0)
    return K


def kernel_correlation_matrix(gram) -> np.ndarray:
    """Double-center a Gram matrix and normalize it to unit diagonal.

    Diagnostic only; training does not use it.
    """
    K = np.asarray(gram, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise DimensionMismatch(f"expected a square matrix, got {K.shape}")
    if K.shape[0] < 2:
        raise DimensionMismatch("need at least 2 points")
    _check_finite(K)
    Kc = K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()
    Kc = 0.5 * (Kc + Kc.T)
    diag = np.diag(Kc).copy()
    floor = 1e-12 * max(float(np.max(np.abs(np.diag(K)))), 1.0)
    bad = np.flatnonzero(diag <= floor)
    if bad.size:
        raise DegenerateDiagonal(
            f"centered diagonal entry {int(bad[0])} is {diag[bad[0]]:.3g}; "
            "point coincides with the mean embedding")
    s = np.sqrt(diag)
    R = Kc / np.outer(s, s)
    np.fill_diagonal(R, 1.0)
    return np.clip(R, -1.0, 1.0)


def dual_objective(beta, y, gram, epsilon: float) -> float:
    beta = np.asarray(beta, dtype=float)
    y = np.asarray(y, dtype=float)
    K = np.asarray(gram, dtype=float)
    n = beta.shape[0]
    if beta.ndim != 1 or y.shape != (n,) or K.shape != (n, n):
        raise DimensionMismatch(
            f"beta {beta.shape}, y {y.shape}, gram {K.shape} do not agree")
    return float(-0.5 * beta @ K @ beta - epsilon * np.abs(beta).sum() + y @ beta)


class KernelCache:
    """On-demand RBF kernel rows with least-recently-used eviction."""

    def __init__(self, X: np.ndarray, sigma: float, max_bytes: int = 256 * 2**20):
        self.X = X
        self.sigma = sigma
        self.sq = (X * X).sum(1)
        n = X.shape[0]
        self.max_rows = max(2, int(max_bytes // (8 * max(n, 1))))
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def row(self, i: int) -> np.ndarray:
        r = self._rows.get(i)
        if r is not None:
            self._rows.move_to_end(i)
            return r
        d = np.maximum(self.sq + self.sq[i] - 2.0 * (self.X @ self.X[i]), 0.0)
        r = np.exp(-d / (2.0 * self.sigma * self.sigma))
        r[i] = 1.0
        self._rows[i] = r
        if len(self._rows) > self.max_rows:
            self._rows.popitem(last=False)
        return r


@dataclass
class SmoResult:
    beta: np.ndarray
    bias: float
    n_iter: int
    converged: bool
    gap: float
    objective_trace: list = field(default_factory=list)


def smo_solve(X, y, hp: SvrHyperparams, trace: bool = False,
              cache_bytes: int = 256 * 2**20) -> SmoResult:
    """Solve the SVR dual by SMO.

    The first index of each working pair is the maximal KKT violator. The
    second is either the opposite maximal violator (``selection=
    "max-violation"``) or the violator with the largest second-order gain
    (``"second-order"``); both stop on the same gap criterion.

    Internally ``alpha`` and ``alpha_star`` are tracked separately; ``beta`` is
    their difference. ``F = K @ beta`` is updated incrementally. With
    ``v = y - F`` the violation scores are ``v - eps`` for alpha entries and
    ``v + eps`` for alpha_star entries.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    C, eps = hp.c, hp.epsilon
    # stop at half the KKT tolerance so the certificate survives roundoff
    stop = 0.5 * hp.tol
    cache = KernelCache(X, hp.sigma, cache_bytes)
    a = np.zeros(n)
    a_s = np.zeros(n)
    F = np.zeros(n)
    limit = hp.iteration_limit(n)
    objective_trace = []
    it = 0
    gap = math.inf
    neg_inf = -np.inf
    second_order = hp.selection == "second-order"
    while True:
        v = y - F
        up = np.concatenate([np.where(a < C, v - eps, neg_inf),
                             np.where(a_s > 0, v + eps, neg_inf)])
        low = np.concatenate([np.where(a > 0, v - eps, np.inf),
                              np.where(a_s < C, v + eps, np.inf)])
        i = int(np.argmax(up))
        j = int(np.argmin(low))
        gap = float(up[i] - low[j])
        if gap > stop and second_order:
            # keep i, pick j maximizing the guaranteed objective increase
            Ki = cache.row(i % n)
            gain = up[i] - low
            curv = np.maximum(2.0 - 2.0 * np.concatenate([Ki, Ki]), TAU)
            score = np.where(gain > 0, -(gain * gain) / curv, np.inf)
            j = int(np.argmin(score))
        if trace:
            objective_trace.append(
                float(-0.5 * (a - a_s) @ F - eps * (a + a_s).sum() + y @ (a - a_s)))
        if gap <= stop:
            converged = True
            break
        if it >= limit:
            converged = False
            break
        pi, pj = i % n, j % n
        Ki = cache.row(pi)
        Kj = cache.row(pj)
        eta = max(2.0 - 2.0 * Ki[pj], TAU)
        t = float(up[i] - low[j]) / eta
        bound_i = C - a[pi] if i < n else a_s[pi]
        bound_j = a[pj] if j < n else C - a_s[pj]
        t = min(t, bound_i, bound_j)
        # i raises beta[pi] by t, j lowers beta[pj] by t; snap exactly onto bounds
        if i < n:
            a[pi] = C if t >= bound_i else a[pi] + t
        else:
            a_s[pi] = 0.0 if t >= bound_i else a_s[pi] - t
        if j < n:
            a[pj] = 0.0 if t >= bound_j else a[pj] - t
        else:
            a_s[pj] = C if t >= bound_j else a_s[pj] + t
        if pi != pj:
            F += t * (Ki - Kj)
        it += 1

    beta = a - a_s
    # rebuild F from scratch to shed accumulated update error
    F = np.zeros(n)
    for k in np.flatnonzero(beta):
        F += beta[k] * cache.row(int(k))
    v = y - F
    free_a = (a > 0) & (a < C)
    free_s = (a_s > 0) & (a_s < C)
    if free_a.any() or free_s.any():
        bias = float(np.concatenate([v[free_a] - eps, v[free_s] + eps]).mean())
    else:
        up = np.concatenate([v[a < C] - eps, v[a_s > 0] + eps])
        low = np.concatenate([v[a > 0] - eps, v[a_s < C] + eps])
        hi = up.max() if up.size else -np.inf
        lo = low.min() if low.size else np.inf
        if not np.isfinite(hi):
            hi = lo
        if not np.isfinite(lo):
            lo = hi
        bias = float(0.5 * (hi + lo))
    return SmoResult(beta=beta, bias=bias, n_iter=it, converged=converged,
                     gap=gap, objective_trace=objective_trace)


def _validate_training(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.ndim != 2:
        raise DimensionMismatch(f"X must be 2-D, got shape {X.shape}")
    if y.ndim != 1 or y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"y shape {y.shape} does not match X rows {X.shape[0]}")
    if X.shape[0] < 2:
        raise DimensionMismatch("need at least 2 training points")
    _check_finite(X, y)
    return X, y


def train_svr(X, y, hp: SvrHyperparams | None = None) -> SvrModel:
    hp = hp or SvrHyperparams()
    X, y = _validate_training(X, y)
    res = smo_solve(X, y, hp)
    keep = np.flatnonzero(res.beta != 0.0)
    model = SvrModel(support_vectors=X[keep].copy(), beta=res.beta[keep].copy(),
                     bias=res.bias, hyperparams=hp, n_iter=res.n_iter,
                     converged=res.converged)
    if not res.converged:
        raise MaxIterationsExceeded(
            f"SMO stopped after {res.n_iter} iterations with KKT gap {res.gap:.3g} "
            f"(> {hp.tol:g})", model=model)
    return model


def train_svr_lenient(X, y, hp: SvrHyperparams | None = None) -> SvrModel:
    """Like :func:`train_svr` but returns an unconverged model with a warning."""
    try:
        return train_svr(X, y, hp)
    except MaxIterationsExceeded as exc:
        warnings.warn(str(exc), RuntimeWarning, stacklevel=2)
        return exc.model


def predict_svr_batch(model: SvrModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    _check_finite(X)
    if model.beta.size == 0:
        return np.full(X.shape[0], model.bias)
    if X.shape[1] != model.support_vectors.shape[1]:
        raise DimensionMismatch(
            f"expected {model.support_vectors.shape[1]} features, got {X.shape[1]}")
    out = np.empty(X.shape[0])
    step = 4096
    for s in range(0, X.shape[0], step):
        K = rbf_cross(X[s:s + step], model.support_vectors, model.hyperparams.sigma)
        out[s:s + step] = K @ model.beta + model.bias
    return out


def predict_svr(model: SvrModel, x) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    return float(predict_svr_batch(model, x[None, :])[0])


def train_dual_svr(X, targets, hp: SvrHyperparams | None = None,
                   lon_hp: SvrHyperparams | None = None, lenient: bool = False) -> SvrPair:
    """Train one model per output coordinate on the same inputs."""
    T = np.asarray(targets, dtype=float)
    if T.ndim != 2 or T.shape[1] != 2:
        raise DimensionMismatch(f"targets must be N x 2, got {T.shape}")
    hp = hp or SvrHyperparams()
    fit = train_svr_lenient if lenient else train_svr
    return SvrPair(lat_model=fit(X, T[:, 0], hp), lon_model=fit(X, T[:, 1], lon_hp or hp))


def kkt_violations(model: SvrModel, X, y, beta_full, tol: float) -> list:
    """List ``(index, reason)`` for training points breaking the eps-KKT rules.

    ``beta_full`` holds the coefficient of every training row (zeros included).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    resid = np.asarray(y, dtype=float) - predict_svr_batch(model, X)
    C, eps = model.hyperparams.c, model.hyperparams.epsilon
    bad = []
    for k, (b, r) in enumerate(zip(beta_full, resid)):
        if abs(b) > C + tol:
            bad.append((k, "box"))
        if abs(b) < C and abs(r) > eps + tol:
            bad.append((k, "outside tube while not at bound"))
        if b != 0 and abs(r) < eps - tol:
            bad.append((k, "inside tube with nonzero coefficient"))
    return bad


def grid_search_sigma(X, y, sigmas, hp: SvrHyperparams | None = None,
                      ratio: float = 0.8, seed: int = 0):
    """Pick the sigma with the lowest hold-out MSE. Returns ``(best, scores)``."""
    X, y = _validate_training(X, y)
    hp = hp or SvrHyperparams()
    perm = np.random.default_rng(seed).permutation(X.shape[0])
    n_train = min(max(int(round(ratio * X.shape[0])), 1), X.shape[0] - 1)
    tr, va = perm[:n_train], perm[n_train:]
    scores = {}
    for s in sigmas:
        trial = SvrHyperparams(c=hp.c, epsilon=hp.epsilon, sigma=s, tol=hp.tol,
                               max_passes=hp.max_passes)
        m = train_svr_lenient(X[tr], y[tr], trial)
        scores[s] = float(np.mean((predict_svr_batch(m, X[va]) - y[va]) ** 2))
    best = min(scores, key=scores.get)
    return best, scores
