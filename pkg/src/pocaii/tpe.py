"""Tree-structured Parzen estimator over mixed spaces.

Observations are split at the ``gamma`` quantile of their scores (higher is
better), a product-kernel density with a uniform prior component is fitted to
each half, and the candidate with the largest good/bad density ratio wins.
Numeric dimensions use a Gaussian kernel with Scott's-rule bandwidth,
categorical dimensions the Aitchison-Aitken kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pocaii.space import Categorical, Configuration, SearchSpace, sample_uniform, to_unit

BANDWIDTH_FLOOR = 1e-3
DENSITY_FLOOR = 1e-12
AA_BANDWIDTH_MIN = 0.01
MAX_REDRAWS = 10
# stand-in spread for fewer than two points: std of Uniform(0, 1)
_PRIOR_STD = 1.0 / math.sqrt(12.0)

Observation = tuple[Configuration, float]


@dataclass(frozen=True)
class TpeParams:
    gamma: float = 0.15
    n_candidates: int = 24

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.n_candidates < 1:
            raise ValueError(f"n_candidates must be positive, got {self.n_candidates}")


@dataclass(frozen=True)
class SplitResult:
    good: list[Observation]
    bad: list[Observation]
    threshold: float


def latest_observations(entries: Sequence[Observation]) -> list[Observation]:
    """Keep one entry per configuration id, the last one seen."""
    by_id: dict[int, Observation] = {}
    for config, score in entries:
        by_id[config.id] = (config, score)
    return list(by_id.values())


def split_good_bad(history: Sequence[Observation], gamma: float) -> SplitResult:
    """Partition observations into the top ``ceil(gamma * n)`` scores and the rest.

    Ties are broken by lower configuration id going to the good side.
    """
    n = len(history)
    if n < 2:
        raise ValueError(f"need at least 2 observations to split, got {n}")
    ranked = sorted(history, key=lambda e: (-e[1], e[0].id))
    n_good = max(1, math.ceil(gamma * n - 1e-9))
    n_good = min(n_good, n - 1)
    good, bad = ranked[:n_good], ranked[n_good:]
    return SplitResult(good=good, bad=bad, threshold=good[-1][1])


def scott_bandwidth(points: Sequence[float], d: int) -> float:
    """Scott's rule ``std * n**(-1/(d+4))`` with a floor against degenerate clusters."""
    x = np.asarray(points, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError(f"Scott's rule needs at least 2 points, got {n}")
    sigma = float(np.std(x, ddof=1))
    return max(sigma * n ** (-1.0 / (d + 4)), BANDWIDTH_FLOOR)


def aitchison_aitken_bandwidth(n: int, d: int, n_choices: int) -> float:
    upper = (n_choices - 1) / n_choices
    v = upper * max(n, 1) ** (-1.0 / (d + 4))
    return min(max(v, AA_BANDWIDTH_MIN), upper)


def kernel_gaussian(x, x_i, bandwidth: float):
    """Gaussian density with standard deviation ``bandwidth``."""
    z = (np.asarray(x, dtype=float) - x_i) / bandwidth
    return np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * bandwidth)


def kernel_aitchison_aitken(x, x_i, bandwidth: float, n_choices: int):
    match = np.asarray(x) == x_i
    return np.where(match, 1.0 - bandwidth, bandwidth / (n_choices - 1))


@dataclass(frozen=True)
class KdeModel:
    """Product-kernel density on unit coordinates, mixed with a uniform prior.

    The prior and each of the ``n`` kernels carry weight ``1/(n+1)``.
    """

    observations: np.ndarray  # (n, d) unit-space points
    bandwidths: np.ndarray  # (d,)
    categorical: np.ndarray  # (d,) bool
    n_choices: np.ndarray  # (d,) int; 0 for numeric dimensions

    @property
    def n(self) -> int:
        return self.observations.shape[0]

    @property
    def weights(self) -> np.ndarray:
        """Mixture weights, prior first."""
        return np.full(self.n + 1, 1.0 / (self.n + 1))

    def prior_density(self, points: np.ndarray) -> np.ndarray:
        num = ~self.categorical
        inside = np.all((points[:, num] >= 0.0) & (points[:, num] <= 1.0), axis=1)
        cat_mass = float(np.prod(1.0 / self.n_choices[self.categorical]))
        return np.where(inside, cat_mass, 0.0)

    def density(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        total = self.prior_density(pts)
        for obs in self.observations:
            k = np.ones(pts.shape[0])
            for j in range(pts.shape[1]):
                if self.categorical[j]:
                    k *= kernel_aitchison_aitken(pts[:, j], obs[j], self.bandwidths[j], self.n_choices[j])
                else:
                    k *= kernel_gaussian(pts[:, j], obs[j], self.bandwidths[j])
            total = total + k
        return total / (self.n + 1)


def fit_kde(points: np.ndarray, space: SearchSpace) -> KdeModel:
    """Fit a :class:`KdeModel` to unit-space points of ``space``."""
    pts = np.asarray(points, dtype=float).reshape(-1, space.d)
    n, d = pts.shape
    cat = space.categorical_mask()
    n_choices = np.array(
        [s.n_choices if isinstance(s, Categorical) else 0 for s in space.specs], dtype=int
    )
    bw = np.empty(d)
    for j in range(d):
        if cat[j]:
            bw[j] = aitchison_aitken_bandwidth(n, d, int(n_choices[j]))
        elif n >= 2:
            bw[j] = scott_bandwidth(pts[:, j], d)
        else:
            bw[j] = max(_PRIOR_STD * max(n, 1) ** (-1.0 / (d + 4)), BANDWIDTH_FLOOR)
    return KdeModel(observations=pts, bandwidths=bw, categorical=cat, n_choices=n_choices)


def kde_density(model: KdeModel, point) -> np.ndarray | float:
    out = model.density(point)
    return float(out[0]) if np.ndim(point) == 1 else out


def acquisition_ratio(good_model: KdeModel, bad_model: KdeModel, points) -> np.ndarray | float:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ratio = good_model.density(pts) / np.maximum(bad_model.density(pts), DENSITY_FLOOR)
    return float(ratio[0]) if np.ndim(points) == 1 else ratio


def fit_split(history: Sequence[Observation], space: SearchSpace, gamma: float) -> tuple[KdeModel, KdeModel]:
    split = split_good_bad(history, gamma)
    good = np.array([to_unit(space, c) for c, _ in split.good])
    bad = np.array([to_unit(space, c) for c, _ in split.bad])
    return fit_kde(good, space), fit_kde(bad, space)


def draw_candidates(
    history: Sequence[Observation], space: SearchSpace, n: int, rng: np.random.Generator
) -> list[Configuration]:
    """Uniform candidates; exact duplicates of history points are redrawn a few times."""
    seen = {c.values for c, _ in history}
    out = []
    for _ in range(n):
        cand = sample_uniform(space, rng)
        for _ in range(MAX_REDRAWS):
            if cand.values not in seen:
                break
            cand = sample_uniform(space, rng)
        out.append(cand)
    return out


def propose(
    history: Sequence[Observation],
    space: SearchSpace,
    params: TpeParams,
    rng: np.random.Generator,
    config_id: int = 0,
) -> Configuration:
    """Return the candidate maximizing the good/bad density ratio (first index on ties)."""
    history = latest_observations(history)
    if len(history) < 2:
        raise ValueError(f"TPE needs at least 2 observations, got {len(history)}")
    good_model, bad_model = fit_split(history, space, params.gamma)
    candidates = draw_candidates(history, space, params.n_candidates, rng)
    units = np.array([to_unit(space, c) for c in candidates])
    ratios = acquisition_ratio(good_model, bad_model, units)
    best = candidates[int(np.argmax(ratios))]
    return Configuration(best.values, config_id)
