"""Parameter-server state machine: gradient buffer, sIAG / IAG / SGD updates.

This is the step-by-step reference API.  The harness runs the same arithmetic
through the chunked kernels in ``siag._pykernels`` / ``siag._ckernels``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from siag.problem import GradientSample, LsqInstance, exact_gradient
from siag.schedule import ActiveSet

METHODS = ("sIAG", "IAG", "SGD")
DIVERGENCE_NORM = 1e9


class DivergenceError(RuntimeError):
    def __init__(self, message: str, iteration: int, trial: int | None = None):
        super().__init__(message if trial is None else f"trial {trial}: {message}")
        self.iteration = iteration
        self.trial = trial


@dataclass(frozen=True)
class StepSchedule:
    kind: str = "inverse_t"
    eta: float | None = None
    beta: float | None = None
    # None means "use the smallest gamma the convergence theorem admits"
    gamma: float | None = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.eta is None or self.eta < 0:
                raise ValueError("constant step needs eta >= 0")
        elif self.kind == "inverse_t":
            if self.beta is None or self.beta <= 0:
                raise ValueError("inverse_t step needs beta > 0")
            if self.gamma is not None and self.gamma <= 0:
                raise ValueError("inverse_t step needs gamma > 0")
        else:
            raise ValueError(f"unknown step kind {self.kind!r}")

    @property
    def resolved(self) -> bool:
        return self.kind == "constant" or self.gamma is not None

    def __call__(self, t: int) -> float:
        return step_size(self, t)

    def etas(self, t0: int, m: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(m, float(self.eta))
        self._require_gamma()
        return self.beta / (np.arange(t0, t0 + m, dtype=np.float64) + self.gamma)

    def _require_gamma(self):
        if self.gamma is None:
            raise ValueError("gamma is unresolved; derive it from the theory constants first")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eta": self.eta, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: dict) -> StepSchedule:
        return cls(**data)


def step_size(schedule: StepSchedule, t: int) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    if schedule.kind == "constant":
        return float(schedule.eta)
    schedule._require_gamma()
    return schedule.beta / (t + schedule.gamma)


class GradientBuffer:
    """Latest gradient of every worker plus their running sum."""

    def __init__(self, n: int, d: int):
        self.slots = np.zeros((n, d))
        self.stamps = np.full(n, -1, dtype=np.int64)
        self.running_sum = np.zeros(d)

    def put(self, worker: int, grad: np.ndarray, stamp: int) -> None:
        self.running_sum = (self.running_sum - self.slots[worker]) + grad
        self.slots[worker] = grad
        self.stamps[worker] = stamp

    def recompute(self) -> np.ndarray:
        total = np.zeros(self.slots.shape[1])
        for row in self.slots:
            total = total + row
        return total


class ServerState:
    def __init__(self, w0: np.ndarray, n: int, method: str = "sIAG", divide_by_active: bool = False):
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.w = np.array(w0, dtype=np.float64)
        self.t = 0
        self.buffer = GradientBuffer(n, len(self.w))
        self.method = method
        self.divide_by_active = divide_by_active

    @property
    def n(self) -> int:
        return self.buffer.slots.shape[0]

    def _move(self, eta: float, divisor: int, direction: np.ndarray) -> None:
        w = self.w - (eta / divisor) * direction
        norm = float(np.sqrt(w @ w))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise DivergenceError(
                f"iterate diverged at t={self.t} (|w|={norm:.3g}); the step size is too large", self.t)
        self.w = w
        self.t += 1


def _check_active(state: ServerState, active: ActiveSet) -> None:
    if active.iter != state.t:
        raise ValueError(f"active set is for iteration {active.iter}, server is at {state.t}")
    if active.workers[-1] >= state.n:
        raise ValueError("active worker index out of range")


def _check_samples(state: ServerState, active: ActiveSet, samples: Sequence[GradientSample]) -> None:
    _check_active(state, active)
    got = sorted(s.worker for s in samples)
    if got != list(active.workers):
        raise ValueError(f"expected one sample for each of workers {list(active.workers)}, got {got}")
    for s in samples:
        if s.iter_stamp != state.t:
            raise ValueError(f"sample from worker {s.worker} was computed at {s.iter_stamp}, not {state.t}")
        if s.grad.shape != state.w.shape:
            raise ValueError("gradient dimension mismatch")


def report_gradients(state: ServerState, active: ActiveSet, samples: Sequence[GradientSample]) -> ServerState:
    """Store the fresh gradients of the active workers in the buffer."""
    _check_samples(state, active, samples)
    for s in sorted(samples, key=lambda s: s.worker):
        state.buffer.put(s.worker, s.grad, state.t)
    return state


def siag_step(state: ServerState, schedule: StepSchedule) -> ServerState:
    """``w <- w - (eta_t / n) * sum_i g_i`` using the buffered gradients."""
    state._move(step_size(schedule, state.t), state.n, state.buffer.running_sum)
    return state


def iag_step(state: ServerState, instance: LsqInstance, active: ActiveSet,
             schedule: StepSchedule) -> ServerState:
    """Refresh active slots with exact gradients, then take the aggregated step."""
    _check_active(state, active)
    for i in active.workers:
        state.buffer.put(i, exact_gradient(instance, i, state.w), state.t)
    return siag_step(state, schedule)


def sgd_step(state: ServerState, active: ActiveSet, samples: Sequence[GradientSample],
             schedule: StepSchedule) -> ServerState:
    """Non-aggregated step along the sum of the fresh gradients only."""
    _check_samples(state, active, samples)
    direction = np.zeros_like(state.w)
    for s in sorted(samples, key=lambda s: s.worker):
        direction = direction + s.grad
    divisor = len(active.workers) if state.divide_by_active else state.n
    state._move(step_size(schedule, state.t), divisor, direction)
    return state


def save_checkpoint(state: ServerState, path: str | Path) -> None:
    """Write ``state`` as an ``.npz`` archive (see README for the layout)."""
    np.savez(path, t=state.t, w=state.w, running_sum=state.buffer.running_sum,
             slots=state.buffer.slots, stamps=state.buffer.stamps,
             method=np.array(state.method), divide_by_active=state.divide_by_active)


def load_checkpoint(path: str | Path) -> ServerState:
    with np.load(path) as data:
        state = ServerState(data["w"], data["slots"].shape[0], str(data["method"]),
                            bool(data["divide_by_active"]))
        state.t = int(data["t"])
        state.buffer.slots = data["slots"].copy()
        state.buffer.stamps = data["stamps"].copy()
        state.buffer.running_sum = data["running_sum"].copy()
    return state
