"""ARIMA(p, d, q) fitting and forecasting for short learning curves.

Coefficients are estimated by conditional least squares: innovations before
index ``max(p, q)`` are taken as zero and the sum of squared one-step residuals
of the differenced series is minimized. Forecast variances come from the
psi-weights of the integrated process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.optimize import least_squares

VARIANCE_FLOOR = 1e-10
SHORT_SERIES_VARIANCE = 1e-4
# AR polynomials whose largest companion eigenvalue reaches UNIT_ROOT_LIMIT are
# shrunk so that it becomes SHRINK_TARGET.
UNIT_ROOT_LIMIT = 0.999
SHRINK_TARGET = 0.99


@dataclass(frozen=True)
class ArimaOrder:
    p: int = 3
    d: int = 1
    q: int = 0

    def __post_init__(self) -> None:
        if min(self.p, self.d, self.q) < 0:
            raise ValueError(f"ARIMA orders must be non-negative, got {self}")

    @property
    def min_length(self) -> int:
        """Shortest raw series :func:`fit` accepts."""
        return self.p + self.d + self.q + 2


@dataclass
class LossSeries:
    """Scores measured every ``m`` budget units, starting at budget ``m``."""

    m: int
    budgets: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def append(self, budget: int, score: float) -> None:
        expected = (self.budgets[-1] if self.budgets else 0) + self.m
        if budget != expected:
            raise ValueError(f"budget grid broken: expected {expected}, got {budget}")
        self.budgets.append(budget)
        self.scores.append(float(score))

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def last(self) -> float:
        return self.scores[-1]


@dataclass(frozen=True)
class FittedArima:
    order: ArimaOrder
    ar: np.ndarray
    ma: np.ndarray
    sigma2: float
    # last value of the series differenced 0, 1, ..., d-1 times
    level_tails: tuple[float, ...]
    diffed: np.ndarray
    residuals: np.ndarray
    drift: float = 0.0


@dataclass(frozen=True)
class Forecast:
    horizon: int
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)


SeriesLike = Union[LossSeries, Sequence[float], np.ndarray]


def _values(series: SeriesLike) -> np.ndarray:
    y = np.asarray(series.scores if isinstance(series, LossSeries) else series, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("series contains non-finite values")
    return y


def difference(series: Sequence[float], d: int) -> np.ndarray:
    y = np.asarray(series, dtype=float)
    if len(y) <= d:
        raise ValueError(f"series of length {len(y)} too short for {d} differences")
    return np.diff(y, n=d) if d else y.copy()


def _level_tails(y: np.ndarray, d: int) -> tuple[float, ...]:
    tails = []
    z = y
    for _ in range(d):
        tails.append(float(z[-1]))
        z = np.diff(z)
    return tuple(tails)


def _residuals(w: np.ndarray, ar: np.ndarray, ma: np.ndarray) -> np.ndarray:
    p, q = len(ar), len(ma)
    start = max(p, q)
    e = np.zeros(len(w))
    for t in range(start, len(w)):
        pred = 0.0
        for l in range(1, p + 1):
            pred += ar[l - 1] * w[t - l]
        for v in range(1, q + 1):
            pred += ma[v - 1] * e[t - v]
        e[t] = w[t] - pred
    return e[start:]


def _max_root_modulus(coefs: np.ndarray) -> float:
    if len(coefs) == 0 or not np.any(coefs):
        return 0.0
    roots = np.roots(np.concatenate(([1.0], -coefs)))
    return float(np.max(np.abs(roots)))


def _shrink(coefs: np.ndarray) -> np.ndarray:
    """Scale lag-l coefficient by r**l, which scales every root by r."""
    modulus = _max_root_modulus(coefs)
    if modulus < UNIT_ROOT_LIMIT:
        return coefs
    r = SHRINK_TARGET / modulus
    return coefs * r ** np.arange(1, len(coefs) + 1)


def fit(series: SeriesLike, order: ArimaOrder = ArimaOrder()) -> FittedArima:
    """Conditional least-squares ARIMA fit.

    ``sigma2`` is the mean squared residual of the unconstrained least-squares
    solution. Explosive or unit-root AR parts are then shrunk inside the
    stationarity region (same for the MA part, to keep it invertible).
    """
    y = _values(series)
    if len(y) < order.min_length:
        raise ValueError(
            f"series of length {len(y)} too short for ARIMA{(order.p, order.d, order.q)}; "
            f"need {order.min_length}"
        )
    w = difference(y, order.d)
    p, q = order.p, order.q
    start = max(p, q)
    if p + q == 0:
        ar, ma = np.zeros(0), np.zeros(0)
    else:
        if p:
            lags = np.column_stack([w[start - l : len(w) - l] for l in range(1, p + 1)])
            ar0, *_ = np.linalg.lstsq(lags, w[start:], rcond=None)
        else:
            ar0 = np.zeros(0)
        if q == 0:
            ar, ma = ar0, np.zeros(0)
        else:
            x0 = np.concatenate([ar0, np.zeros(q)])
            sol = least_squares(lambda x: _residuals(w, x[:p], x[p:]), x0, method="trf")
            ar, ma = sol.x[:p], sol.x[p:]
    sigma2 = float(np.mean(_residuals(w, ar, ma) ** 2)) if len(w) > start else 0.0
    ar = _shrink(np.asarray(ar, dtype=float))
    # invertibility of the MA polynomial 1 + sum(phi_v B^v) mirrors the AR check with -phi
    ma = -_shrink(-np.asarray(ma, dtype=float))
    return FittedArima(
        order=order,
        ar=ar,
        ma=ma,
        sigma2=sigma2,
        level_tails=_level_tails(y, order.d),
        diffed=w,
        residuals=_residuals(w, ar, ma),
    )


def fallback_fit(series: SeriesLike) -> FittedArima:
    """Random walk with drift, for series too short to support an ARIMA fit."""
    y = _values(series)
    if len(y) < 1:
        raise ValueError("empty series")
    diffs = np.diff(y)
    drift = float(np.mean(diffs)) if len(diffs) else 0.0
    sigma2 = float(np.var(diffs, ddof=1)) if len(y) >= 3 else SHORT_SERIES_VARIANCE
    return FittedArima(
        order=ArimaOrder(0, 1, 0),
        ar=np.zeros(0),
        ma=np.zeros(0),
        sigma2=sigma2,
        level_tails=(float(y[-1]),),
        diffed=diffs,
        residuals=np.zeros(0),
        drift=drift,
    )


def fit_or_fallback(series: SeriesLike, order: ArimaOrder = ArimaOrder()) -> FittedArima:
    if len(_values(series)) >= order.min_length:
        return fit(series, order)
    return fallback_fit(series)


def psi_weights(model: FittedArima, h: int) -> np.ndarray:
    """MA(infinity) weights psi_0..psi_h of the stationary ARMA part."""
    p, q = len(model.ar), len(model.ma)
    psi = np.zeros(h + 1)
    psi[0] = 1.0
    for j in range(1, h + 1):
        acc = model.ma[j - 1] if j <= q else 0.0
        for l in range(1, min(j, p) + 1):
            acc += model.ar[l - 1] * psi[j - l]
        psi[j] = acc
    return psi


def integrated_psi_weights(model: FittedArima, h: int) -> np.ndarray:
    psi = psi_weights(model, h)
    for _ in range(model.order.d):
        psi = np.cumsum(psi)
    return psi


def forecast(model: FittedArima, h: int) -> Forecast:
    """h-step-ahead mean and variance on the original (undifferenced) scale."""
    if h < 1:
        raise ValueError(f"horizon must be positive, got {h}")
    p, q = len(model.ar), len(model.ma)
    c = model.drift
    hist = list(model.diffed - c)
    errs = list(model.residuals)
    future = []
    for i in range(h):
        pred = 0.0
        for l in range(1, p + 1):
            pred += model.ar[l - 1] * hist[-l]
        for v in range(1, q + 1):
            k = i - v  # index into future innovations, which are zero
            if k < 0 and -k <= len(errs):
                pred += model.ma[v - 1] * errs[k]
        hist.append(pred)
        future.append(pred + c)
    path = np.asarray(future)
    for tail in reversed(model.level_tails):
        path = tail + np.cumsum(path)
    psi = integrated_psi_weights(model, h - 1)
    variance = max(model.sigma2 * float(np.sum(psi**2)), VARIANCE_FLOOR)
    return Forecast(horizon=h, mean=float(path[-1]), variance=variance)
