"""Objective runners: train a configuration over a budget increment.

A runner turns an :class:`EvaluationRequest` (configuration, budget interval
``(start, end]``, measurement interval ``m``, checkpoint) into a
:class:`MeasurementBatch` holding one score per ``m`` budget units, or raises
:class:`ObjectiveError`.

Subprocess wire format (UTF-8, one JSON object per line)::

    request:  {"id": 3, "params": {...}, "start": 0, "end": 5, "interval": 1, "checkpoint": null}
    response: {"id": 3, "measurements": [[1, 0.41], ...], "checkpoint": "..."}
              {"id": 3, "error": "message"}
"""

from __future__ import annotations

import json
import math
import select
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional, Protocol

import numpy as np

from pocaii.space import Categorical, Continuous, SearchSpace


class ObjectiveError(RuntimeError):
    """A training call failed; the budget it was given is still consumed."""


@dataclass(frozen=True)
class EvaluationRequest:
    config_id: int
    params: Mapping[str, Any]
    start: int
    end: int
    interval: int
    checkpoint: Optional[str] = None

    def __post_init__(self) -> None:
        if self.interval < 1:
            raise ValueError(f"measurement interval must be >= 1, got {self.interval}")
        if not 0 <= self.start < self.end:
            raise ValueError(f"need 0 <= start < end, got start={self.start}, end={self.end}")
        if self.start % self.interval or self.end % self.interval:
            raise ValueError("start and end must be multiples of the measurement interval")

    @property
    def grid(self) -> list[int]:
        return list(range(self.start + self.interval, self.end + 1, self.interval))


@dataclass(frozen=True)
class MeasurementBatch:
    measurements: list[tuple[int, float]]
    checkpoint: Optional[str] = None


class ObjectiveRunner(Protocol):
    resumable: bool

    def evaluate(self, request: EvaluationRequest) -> MeasurementBatch: ...


def validate_batch(request: EvaluationRequest, batch: MeasurementBatch) -> MeasurementBatch:
    budgets = [b for b, _ in batch.measurements]
    if budgets != request.grid:
        raise ObjectiveError(f"budget grid mismatch: expected {request.grid}, got {budgets}")
    for b, s in batch.measurements:
        if not math.isfinite(s):
            raise ObjectiveError(f"non-finite score {s!r} at budget {b}")
    return batch


def _budget_checkpoint(budget: int) -> str:
    return json.dumps({"budget": budget})


def _check_resume(request: EvaluationRequest) -> None:
    if request.start == 0:
        return
    if request.checkpoint is None:
        raise ObjectiveError(f"config {request.config_id}: start={request.start} without checkpoint")
    held = json.loads(request.checkpoint).get("budget")
    if held != request.start:
        raise ObjectiveError(
            f"config {request.config_id}: checkpoint at budget {held}, request starts at {request.start}"
        )


# ---------------------------------------------------------------------------
# synthetic learning curves


def reference_space() -> SearchSpace:
    """Two unit-interval parameters and one three-way categorical."""
    return SearchSpace(
        (Continuous("x1", 0.0, 1.0), Continuous("x2", 0.0, 1.0), Categorical("c", ("A", "B", "C")))
    )


@dataclass(frozen=True)
class BenchmarkSpec:
    """Exponential-saturation curves ``a(x) * (1 - exp(-budget / tau(x)))``.

    ``a`` peaks at 0.95 for ``x1=0.7, x2=0.2, c=A``; ``tau`` grows with ``x2``.
    """

    optimum: tuple[float, float] = (0.7, 0.2)
    curvature: tuple[float, float] = (0.4, 0.3)
    peak: float = 0.95
    penalties: Mapping[str, float] = field(default_factory=lambda: {"A": 0.0, "B": 0.05, "C": 0.10})
    tau_base: float = 5.0
    tau_slope: float = 20.0
    noise: float = 0.005
    seed: int = 0

    def asymptote(self, params: Mapping[str, Any]) -> float:
        x1, x2 = float(params["x1"]), float(params["x2"])
        return (
            self.peak
            - self.curvature[0] * (x1 - self.optimum[0]) ** 2
            - self.curvature[1] * (x2 - self.optimum[1]) ** 2
            - self.penalties[params["c"]]
        )

    def tau(self, params: Mapping[str, Any]) -> float:
        return self.tau_base + self.tau_slope * float(params["x2"])


def synthetic_score(
    spec: BenchmarkSpec, params: Mapping[str, Any], budget: float, config_id: int = 0, noise: bool = True
) -> float:
    score = spec.asymptote(params) * (1.0 - math.exp(-budget / spec.tau(params)))
    if noise and spec.noise > 0:
        rng = np.random.default_rng((spec.seed, config_id, int(budget)))
        score += spec.noise * float(rng.standard_normal())
    return score


class SyntheticRunner:
    """In-process runner for :class:`BenchmarkSpec` curves."""

    resumable = True

    def __init__(self, spec: BenchmarkSpec = BenchmarkSpec()):
        self.spec = spec

    def evaluate(self, request: EvaluationRequest) -> MeasurementBatch:
        _check_resume(request)
        out = [
            (b, synthetic_score(self.spec, request.params, b, request.config_id)) for b in request.grid
        ]
        return MeasurementBatch(out, _budget_checkpoint(request.end))


class GeometricRunner:
    """Loss decaying geometrically in budget, scored as ``-scale * exp(-rate * budget)``.

    Relative improvement over any fixed budget increment is constant, so the
    forecast improvement test never fails: useful to force every evaluation
    phase to spend its whole allotment.
    """

    resumable = True

    def __init__(self, rate: float = 0.05, scale: Callable[[Mapping[str, Any]], float] | None = None):
        self.rate = rate
        self.scale = scale or (lambda params: 1.0)

    def evaluate(self, request: EvaluationRequest) -> MeasurementBatch:
        _check_resume(request)
        k = self.scale(request.params)
        out = [(b, -k * math.exp(-self.rate * b)) for b in request.grid]
        return MeasurementBatch(out, _budget_checkpoint(request.end))


class FunctionRunner:
    """Wrap ``f(params, budget) -> score``; each budget is evaluated independently."""

    resumable = True

    def __init__(self, fn: Callable[[Mapping[str, Any], int], float]):
        self.fn = fn

    def evaluate(self, request: EvaluationRequest) -> MeasurementBatch:
        try:
            out = [(b, float(self.fn(request.params, b))) for b in request.grid]
        except ObjectiveError:
            raise
        except Exception as exc:
            raise ObjectiveError(f"config {request.config_id}: {exc!r}") from exc
        return validate_batch(request, MeasurementBatch(out, _budget_checkpoint(request.end)))


# ---------------------------------------------------------------------------
# subprocess protocol


def encode_request(request: EvaluationRequest) -> str:
    return json.dumps(
        {
            "id": request.config_id,
            "params": dict(request.params),
            "start": request.start,
            "end": request.end,
            "interval": request.interval,
            "checkpoint": request.checkpoint,
        }
    )


def decode_request(line: str) -> EvaluationRequest:
    obj = json.loads(line)
    return EvaluationRequest(
        config_id=int(obj["id"]),
        params=obj["params"],
        start=int(obj["start"]),
        end=int(obj["end"]),
        interval=int(obj["interval"]),
        checkpoint=obj.get("checkpoint"),
    )


def encode_response(config_id: int, batch: MeasurementBatch | None = None, error: str | None = None) -> str:
    if error is not None:
        return json.dumps({"id": config_id, "error": error})
    assert batch is not None
    return json.dumps(
        {
            "id": config_id,
            "measurements": [[b, s] for b, s in batch.measurements],
            "checkpoint": batch.checkpoint,
        }
    )


def decode_response(line: str, request: EvaluationRequest) -> MeasurementBatch:
    """Parse and validate a worker response against the request it answers."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ObjectiveError(f"parse error in worker response: {exc}") from None
    if not isinstance(obj, dict) or "id" not in obj:
        raise ObjectiveError(f"malformed worker response: {line.strip()[:200]!r}")
    if obj["id"] != request.config_id:
        raise ObjectiveError(f"response for config {obj['id']}, expected {request.config_id}")
    if "error" in obj:
        raise ObjectiveError(f"worker error for config {request.config_id}: {obj['error']}")
    try:
        measurements = [(int(b), float(s)) for b, s in obj["measurements"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ObjectiveError(f"malformed measurements: {exc!r}") from None
    checkpoint = obj.get("checkpoint")
    return validate_batch(request, MeasurementBatch(measurements, checkpoint))


class SubprocessRunner:
    """Talk to a long-lived worker process, strictly one request at a time."""

    resumable = True

    def __init__(self, command: str | list[str], timeout: float = 600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._proc: subprocess.Popen | None = None
        self._lock = threading.Lock()

    def _ensure_started(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                text=True,
                encoding="utf-8",
                bufsize=1,
            )
        return self._proc

    def _dead(self, proc: subprocess.Popen, what: str) -> ObjectiveError:
        code = proc.wait(timeout=5)
        stderr = proc.stderr.read() if proc.stderr else ""
        self._proc = None
        return ObjectiveError(f"worker {what} (exit code {code}): {stderr.strip()[-500:]}")

    def evaluate(self, request: EvaluationRequest) -> MeasurementBatch:
        with self._lock:
            proc = self._ensure_started()
            try:
                proc.stdin.write(encode_request(request) + "\n")
                proc.stdin.flush()
            except (BrokenPipeError, OSError):
                raise self._dead(proc, "closed its input") from None
            ready, _, _ = select.select([proc.stdout], [], [], self.timeout)
            if not ready:
                proc.kill()
                self._proc = None
                raise ObjectiveError(f"worker timed out after {self.timeout}s on config {request.config_id}")
            line = proc.stdout.readline()
            if not line:
                raise self._dead(proc, "exited")
        return decode_response(line, request)

    def close(self) -> None:
        if self._proc is not None and self._proc.poll() is None:
            self._proc.stdin.close()
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                self._proc.kill()
        self._proc = None

    def __enter__(self) -> "SubprocessRunner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def evaluate(runner: ObjectiveRunner, request: EvaluationRequest) -> MeasurementBatch:
    """Run one request and validate the resulting batch."""
    return validate_batch(request, runner.evaluate(request))
