"""Worker-selection schemes and staleness bookkeeping.

Workers are indexed ``0 .. n-1``.  A schedule produces the active set of each
iteration; the random schemes draw a few workers per iteration and then force
in every worker whose activation gap would otherwise reach its cap, which
certifies a bounded delay.

The *activation gap* of worker ``i`` at iteration ``t`` is ``t - tau_i(t-1)``,
where ``tau_i`` is the last iteration at which ``i`` was active (``-1`` before
its first activation).  A worker refreshed every iteration has gap 1, and the
cyclic scheme over ``n`` workers has maximum gap ``n``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from siag import _rng
from siag._backend import get_kernels

SCHEDULE_KINDS = ("cyclic", "uniform_cover", "nonuniform")


@dataclass(frozen=True)
class ScheduleConfig:
    kind: str
    n: int
    cover_T: int = 15
    Ti_range: tuple[int, int] = (10, 20)
    active_per_iter: int = 1
    # when set, overrides active_per_iter with round(active_fraction * n)
    active_fraction: float | None = None
    seed: int = 0
    # explicit per-worker caps for the nonuniform scheme instead of drawing them
    caps: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.cover_T < 1:
            raise ValueError("cover_T must be >= 1")
        lo, hi = self.Ti_range
        if lo < 1 or hi < lo:
            raise ValueError(f"Ti_range must be a nonempty range with min >= 1, got {self.Ti_range}")
        object.__setattr__(self, "Ti_range", (int(lo), int(hi)))
        if self.active_fraction is not None and not 0 < self.active_fraction <= 1:
            raise ValueError("active_fraction must lie in (0, 1]")
        if self.caps is not None:
            object.__setattr__(self, "caps", tuple(int(c) for c in self.caps))
            if len(self.caps) != self.n or min(self.caps) < 1:
                raise ValueError("caps needs one entry >= 1 per worker")
        if not 1 <= self.active_count <= self.n:
            raise ValueError(f"active_per_iter must lie in [1, n], got {self.active_count}")

    @property
    def active_count(self) -> int:
        if self.active_fraction is not None:
            return max(1, int(round(self.active_fraction * self.n)))
        return self.active_per_iter

    def to_dict(self) -> dict:
        data = asdict(self)
        data["Ti_range"] = list(self.Ti_range)
        data["caps"] = None if self.caps is None else list(self.caps)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> ScheduleConfig:
        data = dict(data)
        if "Ti_range" in data:
            data["Ti_range"] = tuple(data["Ti_range"])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> ScheduleConfig:
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ActiveSet:
    iter: int
    workers: tuple[int, ...]

    def __post_init__(self):
        if not self.workers:
            raise ValueError(f"active set at iteration {self.iter} is empty")
        if any(b <= a for a, b in zip(self.workers, self.workers[1:])):
            raise ValueError("active workers must be unique and sorted ascending")
        if self.workers[0] < 0:
            raise ValueError("worker indices must be nonnegative")


class StalenessTracker:
    """Tracks ``tau_i(t)`` and the largest activation gap seen so far."""

    def __init__(self, n: int):
        self.n = n
        self.tau = np.full(n, -1, dtype=np.int64)
        self.t = 0
        self.T_observed = 0

    def advance(self, active: ActiveSet) -> np.ndarray:
        """Apply one active set and return the staleness vector ``t - tau_i(t)``."""
        t = active.iter
        if t != self.t:
            raise ValueError(f"expected iteration {self.t}, got {t}")
        if active.workers[-1] >= self.n:
            raise ValueError(f"worker index {active.workers[-1]} out of range for n={self.n}")
        self.T_observed = max(self.T_observed, int(np.max(t - self.tau)))
        self.tau[list(active.workers)] = t
        self.t += 1
        return t - self.tau

    def advance_block(self, offsets: np.ndarray, workers: np.ndarray) -> None:
        """Vectorised ``advance`` over a block of consecutive iterations."""
        m = len(offsets) - 1
        if m == 0:
            return
        t0 = self.t
        times = t0 + np.repeat(np.arange(m, dtype=np.int64), np.diff(offsets))
        order = np.lexsort((times, workers))
        w_sorted, t_sorted = workers[order], times[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = w_sorted[1:] != w_sorted[:-1]
        prev = np.roll(t_sorted, 1)
        prev[first] = self.tau[w_sorted[first]]
        worst = int(np.max(t_sorted - prev)) if len(order) else 0
        np.maximum.at(self.tau, workers, times)
        t_last = t0 + m - 1
        worst = max(worst, int(np.max(t_last - self.tau)))
        self.T_observed = max(self.T_observed, worst)
        self.t = t0 + m

    def staleness(self) -> np.ndarray:
        """``t - tau_i(t)`` for the most recent iteration processed."""
        return (self.t - 1) - self.tau


def taus_at(tau_before: np.ndarray, offsets: np.ndarray, workers: np.ndarray,
            t0: int, j: int) -> np.ndarray:
    """``tau_i(t0 + j)`` given the taus before a block starting at ``t0``."""
    tau = tau_before.copy()
    stop = offsets[j + 1]
    times = t0 + np.repeat(np.arange(j + 1, dtype=np.int64), np.diff(offsets[: j + 2]))
    np.maximum.at(tau, workers[:stop], times)
    return tau


class Schedule:
    """Base class: a single-owner stream of active sets."""

    n: int
    certified_T: int

    def __init__(self):
        self.t = 0

    def next_block(self, m: int) -> tuple[np.ndarray, np.ndarray]:
        """Active sets for the next ``m`` iterations in CSR form ``(offsets, workers)``."""
        raise NotImplementedError

    def __iter__(self) -> Iterator[ActiveSet]:
        while True:
            t0 = self.t
            offsets, workers = self.next_block(256)
            for j in range(len(offsets) - 1):
                yield ActiveSet(t0 + j, tuple(int(i) for i in workers[offsets[j]:offsets[j + 1]]))

    def take(self, m: int) -> list[ActiveSet]:
        t0 = self.t
        offsets, workers = self.next_block(m)
        return [ActiveSet(t0 + j, tuple(int(i) for i in workers[offsets[j]:offsets[j + 1]]))
                for j in range(m)]

    def describe(self) -> dict:
        raise NotImplementedError


class CyclicSchedule(Schedule):
    """Worker ``t mod n`` is the only active worker at iteration ``t``."""

    def __init__(self, n: int):
        super().__init__()
        self.n = n
        self.certified_T = n

    def next_block(self, m):
        offsets = np.arange(m + 1, dtype=np.int64)
        workers = (self.t + np.arange(m, dtype=np.int64)) % self.n
        self.t += m
        return offsets, workers

    def describe(self):
        return {"kind": "cyclic", "n": self.n, "certified_T": self.certified_T}


class CoverSchedule(Schedule):
    """Random draws plus forced activation when a worker's gap reaches its cap.

    Each iteration draws ``k`` distinct workers with probability proportional
    to ``weights`` (weighted sampling without replacement via exponential
    keys), then adds every worker ``i`` with ``t - tau_i(t-1) >= caps[i]``.
    """

    def __init__(self, caps, weights, k: int, rng: np.random.Generator, kind: str = "cover",
                 seed: int | None = None, backend: str | None = None):
        super().__init__()
        self.caps = np.ascontiguousarray(caps, dtype=np.int64)
        self.n = len(self.caps)
        self.weights = np.asarray(weights, dtype=np.float64)
        if np.any(self.caps < 1):
            raise ValueError("caps must be >= 1")
        if np.count_nonzero(self.weights > 0) < k:
            raise ValueError("fewer positive-weight workers than draws per iteration")
        self.k = k
        self.kind = kind
        self.seed = seed
        self.certified_T = int(self.caps.max())
        self._uniform = bool(np.all(self.weights == self.weights[0]))
        self._rng = rng
        self._last = np.full(self.n, -1, dtype=np.int64)
        self._kernels = get_kernels(backend)

    def _draw(self, m: int) -> np.ndarray:
        u = self._rng.random((m, self.n))
        if self._uniform:
            keys = u
        else:
            keys = np.full_like(u, -np.inf)
            pos = self.weights > 0
            with np.errstate(divide="ignore"):
                keys[:, pos] = np.log(u[:, pos]) / self.weights[pos]
        if self.k == 1:
            return np.argmax(keys, axis=1).astype(np.int64)[:, None]
        return np.ascontiguousarray(np.argpartition(-keys, self.k - 1, axis=1)[:, : self.k], dtype=np.int64)

    def next_block(self, m):
        chosen = self._draw(m)
        offsets, workers = self._kernels.cover_select(chosen, self.caps, self._last, self.t)
        self.t += m
        return offsets, workers

    def describe(self):
        return {"kind": self.kind, "n": self.n, "caps": self.caps.tolist(), "k": self.k,
                "seed": self.seed, "certified_T": self.certified_T}


def cyclic_schedule(n: int) -> CyclicSchedule:
    if n < 1:
        raise ValueError("n must be positive")
    return CyclicSchedule(n)


def uniform_cover_schedule(config: ScheduleConfig, trial: int = 0, *, weights=None,
                           backend: str | None = None) -> CoverSchedule:
    if config.kind != "uniform_cover":
        raise ValueError(f"expected a uniform_cover config, got {config.kind!r}")
    caps = np.full(config.n, config.cover_T, dtype=np.int64)
    if weights is None:
        weights = np.ones(config.n)
    rng = _rng.stream(config.seed, _rng.SCHEDULE_DRAWS, trial)
    return CoverSchedule(caps, weights, config.active_count, rng, "uniform_cover", config.seed, backend)


def nonuniform_caps(config: ScheduleConfig) -> np.ndarray:
    """Per-worker caps, drawn once per schedule seed and shared by all trials."""
    if config.caps is not None:
        return np.array(config.caps, dtype=np.int64)
    lo, hi = config.Ti_range
    return _rng.stream(config.seed, _rng.SCHEDULE_CAPS).integers(lo, hi + 1, size=config.n)


def nonuniform_schedule(config: ScheduleConfig, trial: int = 0, *, caps=None,
                        backend: str | None = None) -> CoverSchedule:
    if config.kind != "nonuniform":
        raise ValueError(f"expected a nonuniform config, got {config.kind!r}")
    caps = nonuniform_caps(config) if caps is None else np.asarray(caps, dtype=np.int64)
    if len(caps) != config.n:
        raise ValueError("need one cap per worker")
    rng = _rng.stream(config.seed, _rng.SCHEDULE_DRAWS, trial)
    return CoverSchedule(caps, 1.0 / caps, config.active_count, rng, "nonuniform", config.seed, backend)


def make_schedule(config: ScheduleConfig, trial: int = 0, backend: str | None = None) -> Schedule:
    if config.kind == "cyclic":
        return cyclic_schedule(config.n)
    if config.kind == "uniform_cover":
        return uniform_cover_schedule(config, trial, backend=backend)
    return nonuniform_schedule(config, trial, backend=backend)


def certified_T(config: ScheduleConfig) -> int:
    if config.kind == "cyclic":
        return config.n
    if config.kind == "uniform_cover":
        return config.cover_T
    return int(nonuniform_caps(config).max())
