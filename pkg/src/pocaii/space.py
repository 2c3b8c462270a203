"""Mixed continuous/integer/categorical parameter domains.

Every configuration has an internal "unit" representation used by the density
estimators: numeric dimensions map affinely (in log space when flagged) onto
``[0, 1]``, categorical dimensions carry the choice index unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence, Union

import numpy as np

_UNIT_TOL = 1e-9


class SpaceError(ValueError):
    """Raised for an invalid parameter domain or an infeasible point."""


@dataclass(frozen=True)
class Continuous:
    name: str
    low: float
    high: float
    log: bool = False

    kind = "continuous"


@dataclass(frozen=True)
class Integer:
    name: str
    low: int
    high: int
    log: bool = False

    kind = "integer"


@dataclass(frozen=True)
class Categorical:
    name: str
    choices: tuple[str, ...]

    kind = "categorical"

    def __post_init__(self) -> None:
        object.__setattr__(self, "choices", tuple(self.choices))

    @property
    def n_choices(self) -> int:
        return len(self.choices)


ParameterSpec = Union[Continuous, Integer, Categorical]


@dataclass(frozen=True)
class Configuration:
    """A point of a :class:`SearchSpace` plus its run-scoped trial id."""

    values: tuple
    id: int

    def as_dict(self, space: "SearchSpace") -> dict[str, Any]:
        out: dict[str, Any] = {}
        for spec, value in zip(space.specs, self.values):
            if isinstance(spec, Categorical):
                out[spec.name] = spec.choices[value]
            else:
                out[spec.name] = value
        return out


@dataclass(frozen=True)
class SearchSpace:
    specs: tuple[ParameterSpec, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "_index", {s.name: i for i, s in enumerate(self.specs)})

    @property
    def d(self) -> int:
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def categorical_mask(self) -> np.ndarray:
        return np.array([isinstance(s, Categorical) for s in self.specs], dtype=bool)

    def configuration(self, params: Mapping[str, Any], config_id: int) -> Configuration:
        """Build a configuration from a ``{name: value}`` mapping."""
        values = []
        for spec in self.specs:
            if spec.name not in params:
                raise SpaceError(f"{spec.name}: missing value")
            v = params[spec.name]
            if isinstance(spec, Categorical):
                if v not in spec.choices:
                    raise SpaceError(f"{spec.name}: {v!r} is not a valid choice")
                values.append(spec.choices.index(v))
            elif isinstance(spec, Integer):
                values.append(int(v))
            else:
                values.append(float(v))
        config = Configuration(tuple(values), config_id)
        check_feasible(self, config)
        return config

    def to_dict(self) -> list[dict[str, Any]]:
        out = []
        for s in self.specs:
            if isinstance(s, Categorical):
                out.append({"name": s.name, "type": "categorical", "choices": list(s.choices)})
            else:
                out.append(
                    {"name": s.name, "type": s.kind, "low": s.low, "high": s.high, "log": s.log}
                )
        return out

    @classmethod
    def from_dict(cls, entries: Iterable[Mapping[str, Any]]) -> "SearchSpace":
        """Parse the JSON schema used in experiment config files, then validate."""
        specs: list[ParameterSpec] = []
        for entry in entries:
            try:
                kind = entry["type"]
                name = entry["name"]
            except KeyError as exc:
                raise SpaceError(f"parameter entry missing key {exc}") from None
            if kind == "continuous":
                specs.append(
                    Continuous(name, float(entry["low"]), float(entry["high"]), bool(entry.get("log", False)))
                )
            elif kind == "integer":
                specs.append(
                    Integer(name, int(entry["low"]), int(entry["high"]), bool(entry.get("log", False)))
                )
            elif kind == "categorical":
                specs.append(Categorical(name, tuple(str(c) for c in entry["choices"])))
            else:
                raise SpaceError(f"{name}: unknown parameter type {kind!r}")
        space = cls(tuple(specs))
        validate(space)
        return space


def validate(space: SearchSpace) -> None:
    """Check every parameter invariant; raise :class:`SpaceError` on the first violation."""
    if space.d < 1:
        raise SpaceError("search space must have at least one parameter")
    seen: set[str] = set()
    for spec in space.specs:
        if spec.name in seen:
            raise SpaceError(f"{spec.name}: duplicate parameter name")
        seen.add(spec.name)
        if isinstance(spec, Categorical):
            if len(spec.choices) < 2:
                raise SpaceError(f"{spec.name}: categorical needs at least 2 choices")
            if len(set(spec.choices)) != len(spec.choices):
                raise SpaceError(f"{spec.name}: choice names must be unique")
        else:
            if not (math.isfinite(spec.low) and math.isfinite(spec.high)):
                raise SpaceError(f"{spec.name}: bounds must be finite")
            if not spec.low < spec.high:
                raise SpaceError(f"{spec.name}: low < high violated ({spec.low} >= {spec.high})")
            if spec.log and spec.low <= 0:
                raise SpaceError(f"{spec.name}: log-scale requires low > 0")


def check_feasible(space: SearchSpace, config: Configuration) -> None:
    if len(config.values) != space.d:
        raise SpaceError(f"configuration has {len(config.values)} values, space has {space.d}")
    for spec, v in zip(space.specs, config.values):
        if isinstance(spec, Categorical):
            if not (isinstance(v, (int, np.integer)) and 0 <= v < spec.n_choices):
                raise SpaceError(f"{spec.name}: choice index {v!r} out of range")
        elif not spec.low <= v <= spec.high:
            raise SpaceError(f"{spec.name}: value {v} outside [{spec.low}, {spec.high}]")


def _sample_value(spec: ParameterSpec, rng: np.random.Generator):
    if isinstance(spec, Categorical):
        return int(rng.integers(spec.n_choices))
    if isinstance(spec, Integer):
        if spec.log:
            # widen by half a step so the end points get their full share after rounding
            u = rng.uniform(math.log(spec.low - 0.5), math.log(spec.high + 0.5))
            v = int(round(math.exp(u)))
        else:
            v = int(rng.integers(spec.low, spec.high + 1))
        return min(max(v, spec.low), spec.high)
    if spec.log:
        return float(math.exp(rng.uniform(math.log(spec.low), math.log(spec.high))))
    return float(rng.uniform(spec.low, spec.high))


def sample_uniform(space: SearchSpace, rng: np.random.Generator, config_id: int = 0) -> Configuration:
    """Draw every coordinate independently; log-scaled ones uniformly in log space."""
    return Configuration(tuple(_sample_value(s, rng) for s in space.specs), config_id)


def _numeric_to_unit(spec: Continuous | Integer, v: float) -> float:
    if spec.log:
        lo, hi = math.log(spec.low), math.log(spec.high)
        return (math.log(v) - lo) / (hi - lo)
    return (v - spec.low) / (spec.high - spec.low)


def to_unit(space: SearchSpace, config: Configuration) -> np.ndarray:
    out = np.empty(space.d)
    for j, (spec, v) in enumerate(zip(space.specs, config.values)):
        out[j] = v if isinstance(spec, Categorical) else _numeric_to_unit(spec, v)
    return out


def from_unit(space: SearchSpace, vector: Sequence[float], config_id: int = 0) -> Configuration:
    """Inverse of :func:`to_unit`; integers are rounded to the nearest feasible value."""
    if len(vector) != space.d:
        raise SpaceError(f"vector has {len(vector)} components, space has {space.d}")
    values = []
    for spec, u in zip(space.specs, vector):
        if isinstance(spec, Categorical):
            idx = int(round(u))
            if not 0 <= idx < spec.n_choices:
                raise SpaceError(f"{spec.name}: choice index {u} out of range")
            values.append(idx)
            continue
        if not -_UNIT_TOL <= u <= 1 + _UNIT_TOL:
            raise SpaceError(f"{spec.name}: unit coordinate {u} outside [0, 1]")
        u = min(max(float(u), 0.0), 1.0)
        if spec.log:
            lo, hi = math.log(spec.low), math.log(spec.high)
            v = math.exp(lo + u * (hi - lo))
        else:
            v = spec.low + u * (spec.high - spec.low)
        if isinstance(spec, Integer):
            values.append(min(max(int(round(v)), spec.low), spec.high))
        else:
            values.append(min(max(v, spec.low), spec.high))
    return Configuration(tuple(values), config_id)
