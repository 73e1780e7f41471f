"""Replicated trials, gap-curve estimation, rate fits and speedup tables."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from siag import _rng
from siag._backend import DEFAULT_BACKEND, METHOD_CODES, get_kernels
from siag.optimizer import METHODS, DivergenceError, StepSchedule
from siag.problem import LsqInstance, ProblemSpec, empirical_noise_bound, generate_instance
from siag.schedule import ScheduleConfig, StalenessTracker, certified_T, make_schedule, taus_at
from siag.theory import AnalysisConstants, GapEstimate, derive_constants

CHUNK = 2048


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    schedule: ScheduleConfig
    method: str
    steps: StepSchedule
    horizon: int
    trials: int = 50
    seed: int = 0
    grid: str = "log"
    record_points: int = 200
    record_every: int = 1
    sgd_divide_by_active: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.schedule.n != self.problem.n:
            raise ValueError(f"schedule has n={self.schedule.n} but problem has n={self.problem.n}")
        if self.horizon < 0 or self.trials < 1:
            raise ValueError("need horizon >= 0 and trials >= 1")
        if self.grid not in ("log", "linear"):
            raise ValueError("grid must be 'log' or 'linear'")
        if self.record_points < 1 or self.record_every < 1:
            raise ValueError("record_points and record_every must be >= 1")

    def to_dict(self) -> dict:
        return {
            "problem": self.problem.to_dict(),
            "schedule": self.schedule.to_dict(),
            "method": self.method,
            "steps": self.steps.to_dict(),
            "horizon": self.horizon,
            "trials": self.trials,
            "seed": self.seed,
            "grid": self.grid,
            "record_points": self.record_points,
            "record_every": self.record_every,
            "sgd_divide_by_active": self.sgd_divide_by_active,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        data = dict(data)
        missing = {"problem", "schedule", "method", "steps", "horizon"} - data.keys()
        if missing:
            raise ValueError(f"config is missing {sorted(missing)}")
        data["problem"] = ProblemSpec.from_dict(data["problem"])
        data["schedule"] = ScheduleConfig.from_dict(data["schedule"])
        data["steps"] = StepSchedule.from_dict(data["steps"])
        return cls(**data)

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_n(self, n: int) -> ExperimentConfig:
        return replace(self, problem=replace(self.problem, n=n), schedule=replace(self.schedule, n=n))


def recording_grid(config: ExperimentConfig) -> np.ndarray:
    """Iterations at which the gap is recorded.

    The log grid spans ``1 .. horizon``; the linear grid is ``0, k, 2k, ...``.
    A zero horizon records only ``t = 0``.
    """
    h = config.horizon
    if h == 0:
        return np.zeros(1, dtype=np.int64)
    if config.grid == "log":
        return np.unique(np.rint(np.geomspace(1, h, config.record_points)).astype(np.int64))
    return np.arange(0, h + 1, config.record_every, dtype=np.int64)


def initial_point(instance: LsqInstance) -> np.ndarray:
    return np.zeros(instance.d)


def noise_sigma2(instance: LsqInstance, samples: int = 20_000) -> float:
    """Variance constant probed at the initial point and at the optimum; the larger is kept."""
    w0 = initial_point(instance)
    return max(empirical_noise_bound(instance, w0, samples),
               empirical_noise_bound(instance, instance.w_star, samples))


def analysis_constants(config: ExperimentConfig, instance: LsqInstance | None = None,
                       sigma2: float | None = None, *, use_config_gamma: bool = True) -> AnalysisConstants:
    """Theorem constants for an experiment.

    ``gamma`` is taken from the config when set, otherwise (or when
    ``use_config_gamma`` is false) it is the smallest admissible value.  The
    lemma checks only need the gamma-free constants and pass
    ``use_config_gamma=False`` so they can audit runs with smaller offsets.
    """
    if config.steps.kind != "inverse_t":
        raise ValueError("the convergence bound is stated for beta / (t + gamma) step sizes")
    instance = instance or generate_instance(config.problem)
    if sigma2 is None:
        sigma2 = 0.0 if config.method == "IAG" else noise_sigma2(instance)
    w0 = initial_point(instance)
    E0 = float(np.sum((w0 - instance.w_star) ** 2))
    return derive_constants(instance.mu, instance.L, sigma2, instance.n, certified_T(config.schedule),
                            config.steps.beta, E0, config.steps.gamma if use_config_gamma else None)


def resolve_steps(config: ExperimentConfig, instance: LsqInstance | None = None) -> StepSchedule:
    if config.steps.resolved:
        return config.steps
    c = analysis_constants(config, instance)
    return replace(config.steps, gamma=c.gamma)


@dataclass
class TrialResult:
    trial: int
    t: np.ndarray
    gaps: np.ndarray
    T_observed: int
    probes: dict | None = None


def _draw_block(rngs, workers: np.ndarray, width: int) -> np.ndarray:
    draws = np.empty((len(workers), width))
    counts = np.bincount(workers, minlength=len(rngs))
    for i in np.flatnonzero(counts):
        draws[workers == i] = rngs[i].standard_normal((counts[i], width))
    return draws


def _probe_plan(probe_times: Sequence[int], T: int) -> tuple[np.ndarray, np.ndarray]:
    gap_times, w_times = set(), set()
    for t in probe_times:
        gap_times.update(range(max(t - 2 * T, 0), t + 1))
        w_times.update(range(max(t - T, 0), t + 1))
    return np.array(sorted(gap_times), dtype=np.int64), np.array(sorted(w_times), dtype=np.int64)


def run_trial(config: ExperimentConfig, trial: int, *, instance: LsqInstance | None = None,
              steps: StepSchedule | None = None, backend: str | None = None,
              probe_times: Sequence[int] = ()) -> TrialResult:
    """One replication of the server loop, recording ``||w^t - w*||^2`` on the grid.

    With ``probe_times`` the trial also keeps what the lemma checks need:
    ``w^t`` and ``g^t`` at each probe, the delayed-iterate distances
    ``||w^t - w^{tau_i(t)}||^2`` and the dense gaps on ``[t - 2T, t]``.
    """
    instance = instance or generate_instance(config.problem)
    steps = steps or resolve_steps(config, instance)
    kern = get_kernels(backend)
    n, d, p = instance.n, instance.d, instance.p
    method = METHOD_CODES[config.method]
    schedule = make_schedule(config.schedule, trial, backend)
    tracker = StalenessTracker(n)
    sampling = config.method != "IAG"
    rngs = _rng.worker_streams(config.seed, trial, n) if sampling else None
    width = config.problem.draw_width

    w = initial_point(instance)
    slots = np.zeros((n, d))
    rs = np.zeros(d)
    stamps = np.full(n, -1, dtype=np.int64)
    w_local = np.ascontiguousarray(instance.w_star_local)
    w_star = np.ascontiguousarray(instance.w_star)

    grid = recording_grid(config)
    out = np.empty(len(grid))
    gap0 = float(np.sum((w - w_star) ** 2))
    out[grid == 0] = gap0

    probing = len(probe_times) > 0
    if probing:
        probe_times = sorted(int(t) for t in probe_times)
        if probe_times[-1] >= config.horizon:
            raise ValueError("probe times must be below the horizon (g^t needs iteration t to run)")
        T = schedule.certified_T
        gap_times, w_times = _probe_plan(probe_times, T)
        dense = np.empty(len(gap_times))
        dense[gap_times == 0] = gap0
        w_keep: dict[int, np.ndarray] = {}
        if 0 in set(w_times.tolist()):
            w_keep[0] = w.copy()
        P = len(probe_times)
        w_probe = np.zeros((P, d))
        g_probe = np.zeros((P, d))
        lag_sq = np.full((P, n), np.nan)
        probe_index = {t: k for k, t in enumerate(probe_times)}

    empty_draws = np.zeros((0, width))
    t0 = 0
    while t0 < config.horizon:
        m = min(CHUNK, config.horizon - t0)
        offsets, workers = schedule.next_block(m)
        tau_before = tracker.tau.copy()
        tracker.advance_block(offsets, workers)
        draws = _draw_block(rngs, workers, width) if sampling else empty_draws
        etas = steps.etas(t0, m)
        gaps = np.empty(m)
        w_hist = np.empty((m + 1, d)) if probing else None
        g_hist = np.empty((m, d)) if probing else None
        status = kern.run_chunk(method, w, slots, rs, stamps, w_local, w_star, offsets, workers,
                                draws, etas, t0, instance.noise_std, p, config.sgd_divide_by_active,
                                gaps, w_hist, g_hist)
        if status >= 0:
            raise DivergenceError(
                f"iterate diverged at t={t0 + status + 1}; the step size is too large",
                t0 + status + 1, trial)
        sel = (grid > t0) & (grid <= t0 + m)
        out[sel] = gaps[grid[sel] - t0 - 1]
        if probing:
            sel = (gap_times > t0) & (gap_times <= t0 + m)
            dense[sel] = gaps[gap_times[sel] - t0 - 1]
            for s in w_times[(w_times >= t0) & (w_times <= t0 + m)]:
                w_keep[int(s)] = w_hist[s - t0].copy()
            for t in probe_times:
                if not t0 <= t < t0 + m:
                    continue
                k = probe_index[t]
                w_probe[k] = w_hist[t - t0]
                g_probe[k] = g_hist[t - t0]
                taus = taus_at(tau_before, offsets, workers, t0, t - t0)
                for i in np.flatnonzero(taus >= 0):
                    lag = w_probe[k] - w_keep[int(taus[i])]
                    lag_sq[k, i] = lag @ lag
        t0 += m

    probes = None
    if probing:
        probes = {"gap_times": gap_times, "gaps": dense, "w": w_probe, "g": g_probe,
                  "lag_sq": lag_sq, "T": T}
    return TrialResult(trial, grid, out, tracker.T_observed, probes)


def pairwise_sum(x: np.ndarray) -> np.ndarray:
    """Sum over axis 0 by a fixed balanced binary tree."""
    if len(x) == 1:
        return x[0].copy()
    mid = len(x) // 2
    return pairwise_sum(x[:mid]) + pairwise_sum(x[mid:])


def estimate_curve(t: np.ndarray, gaps: np.ndarray) -> list[GapEstimate]:
    """Mean and standard error over trials (rows of ``gaps``, in trial order)."""
    k = len(gaps)
    mean = pairwise_sum(gaps) / k
    if k > 1:
        stderr = np.sqrt(pairwise_sum((gaps - mean) ** 2) / (k - 1) / k)
    else:
        stderr = np.zeros_like(mean)
    return [GapEstimate(int(ti), float(mi), float(si), k) for ti, mi, si in zip(t, mean, stderr)]


@dataclass
class ResultSet:
    config: ExperimentConfig
    curve: list[GapEstimate]
    metadata: dict = field(default_factory=dict)

    @property
    def t(self) -> np.ndarray:
        return np.array([g.t for g in self.curve])

    @property
    def mean(self) -> np.ndarray:
        return np.array([g.mean for g in self.curve])

    @property
    def stderr(self) -> np.ndarray:
        return np.array([g.stderr for g in self.curve])

    def at(self, t: int) -> GapEstimate:
        for g in self.curve:
            if g.t == t:
                return g
        raise KeyError(f"t={t} is not on the recording grid")

    def curve_digest(self) -> str:
        arr = np.array([[g.t, g.mean, g.stderr] for g in self.curve], dtype=np.float64)
        return hashlib.sha256(arr.tobytes()).hexdigest()

    def manifest(self) -> dict:
        return {"config": self.config.to_dict(), "content_hash": self.config.content_hash(),
                "curve_sha256": self.curve_digest(), **self.metadata}

    def write(self, out_dir: str | Path, stem: str = "curve") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [["t", "mean", "stderr", "trials"]]
        rows += [[g.t, repr(g.mean), repr(g.stderr), g.trials] for g in self.curve]
        csv_path = out_dir / f"{stem}.csv"
        json_path = out_dir / f"{stem}.manifest.json"
        atomic_write(csv_path, _csv_text(rows))
        atomic_write(json_path, json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return csv_path, json_path


def _csv_text(rows: Iterable[Sequence]) -> str:
    import io
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def atomic_write(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_curve_csv(path: str | Path) -> list[GapEstimate]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [GapEstimate(int(r["t"]), float(r["mean"]), float(r["stderr"]), int(r["trials"]))
                for r in reader]


class ExperimentFailed(DivergenceError):
    pass


def _map_trials(fn, trials: Sequence[int], threads: int | None):
    results, failures = {}, []

    def call(k):
        try:
            return k, fn(k), None
        except DivergenceError as exc:
            return k, None, exc

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(call, trials))
    else:
        outcomes = [call(k) for k in trials]
    for k, res, exc in outcomes:
        if exc is not None:
            failures.append(exc)
        else:
            results[k] = res
    if failures:
        first = min(failures, key=lambda e: e.trial)
        raise ExperimentFailed(
            f"{len(failures)} trial(s) diverged; first: {first}", first.iteration, first.trial)
    return results


def run_experiment(config: ExperimentConfig, *, threads: int | None = None,
                   order: Sequence[int] | None = None, backend: str | None = None) -> ResultSet:
    """Run all trials and estimate the gap curve.

    The result does not depend on ``threads`` or on the execution ``order``.
    """
    started = time.perf_counter()
    instance = generate_instance(config.problem)
    steps = resolve_steps(config, instance)
    trials = list(order) if order is not None else list(range(config.trials))
    if sorted(trials) != list(range(config.trials)):
        raise ValueError("order must be a permutation of the trial indices")
    results = _map_trials(
        lambda k: run_trial(config, k, instance=instance, steps=steps, backend=backend),
        trials, threads)
    ordered = [results[k] for k in range(config.trials)]
    curve = estimate_curve(ordered[0].t, np.array([r.gaps for r in ordered]))
    metadata = {
        "wall_time_s": time.perf_counter() - started,
        "observed_max_staleness": max(r.T_observed for r in ordered),
        "certified_T": certified_T(config.schedule),
        "resolved_steps": steps.to_dict(),
        "E0": float(np.sum((initial_point(instance) - instance.w_star) ** 2)),
        "backend": backend or DEFAULT_BACKEND,
    }
    return ResultSet(config, curve, metadata)


@dataclass
class Ensemble:
    """Per-trial snapshots around a set of probe iterations."""

    instance: LsqInstance
    steps: StepSchedule
    T: int
    probe_times: list[int]
    gap_times: np.ndarray
    gaps: np.ndarray      # (trials, len(gap_times))
    w_probe: np.ndarray   # (trials, probes, d)
    g_probe: np.ndarray   # (trials, probes, d) aggregated gradient used at the probe
    lag_sq: np.ndarray    # (trials, probes, n); nan where the worker has not reported

    @property
    def n(self) -> int:
        return self.instance.n

    @property
    def trials(self) -> int:
        return len(self.gaps)

    def gap_estimate(self, s: int) -> tuple[float, float]:
        col = int(np.searchsorted(self.gap_times, s))
        if col >= len(self.gap_times) or self.gap_times[col] != s:
            raise KeyError(f"gap at s={s} was not captured")
        x = self.gaps[:, col]
        se = float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0
        return float(np.mean(x)), se


def run_ensemble(config: ExperimentConfig, probe_times: Sequence[int], *,
                 threads: int | None = None, backend: str | None = None) -> Ensemble:
    """Run all trials with lemma probes; the horizon is extended past the last probe if needed."""
    config = replace(config, horizon=max(config.horizon, max(probe_times) + 1))
    instance = generate_instance(config.problem)
    steps = resolve_steps(config, instance)
    results = _map_trials(
        lambda k: run_trial(config, k, instance=instance, steps=steps, backend=backend,
                            probe_times=probe_times),
        list(range(config.trials)), threads)
    ordered = [results[k].probes for k in range(config.trials)]
    return Ensemble(
        instance=instance, steps=steps, T=ordered[0]["T"], probe_times=sorted(probe_times),
        gap_times=ordered[0]["gap_times"],
        gaps=np.array([p["gaps"] for p in ordered]),
        w_probe=np.array([p["w"] for p in ordered]),
        g_probe=np.array([p["g"] for p in ordered]),
        lag_sq=np.array([p["lag_sq"] for p in ordered]),
    )


def slope_fit(curve: Sequence[GapEstimate], t_min: float, t_max: float) -> float:
    """Least-squares slope of ``log(mean)`` against ``log(t)`` on ``[t_min, t_max]``."""
    pts = [g for g in curve if t_min <= g.t <= t_max]
    if len(pts) < 5:
        raise ValueError(f"need at least 5 recorded points in [{t_min}, {t_max}], got {len(pts)}")
    if any(g.mean <= 0 or g.t <= 0 for g in pts):
        raise ValueError("slope fit needs positive t and positive means")
    x = np.log([g.t for g in pts])
    y = np.log([g.mean for g in pts])
    xc = x - x.mean()
    return float(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))


def final_window_mean(result: ResultSet, fraction: float = 0.1) -> float:
    """Average of the mean curve over ``t >= (1 - fraction) * horizon``."""
    t, m = result.t, result.mean
    sel = t >= (1 - fraction) * result.config.horizon
    return float(np.mean(m[sel]))


def _strip_n(cfg: ExperimentConfig) -> dict:
    data = cfg.to_dict()
    data["problem"].pop("n")
    data["schedule"].pop("n")
    return data


def speedup_table(results: Sequence[ResultSet], reference_t: int) -> list[dict]:
    """Gap at ``reference_t`` relative to the smallest worker count, with the ideal ``n_min/n``."""
    if not results:
        raise ValueError("no results")
    base = _strip_n(results[0].config)
    for r in results[1:]:
        if _strip_n(r.config) != base:
            raise ValueError("results differ in more than the worker count")
    ordered = sorted(results, key=lambda r: r.config.problem.n)
    n_min = ordered[0].config.problem.n
    ref = ordered[0].at(reference_t).mean
    rows = []
    for r in ordered:
        g = r.at(reference_t)
        n = r.config.problem.n
        rows.append({"n": n, "t": reference_t, "mean": g.mean, "stderr": g.stderr,
                     "ratio": g.mean / ref, "ideal": n_min / n})
    return rows


def write_rows_csv(rows: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    if not rows:
        raise ValueError("no rows")
    keys = list(rows[0])
    atomic_write(path, _csv_text([keys] + [[repr(r[k]) if isinstance(r[k], float) else r[k]
                                           for k in keys] for r in rows]))
