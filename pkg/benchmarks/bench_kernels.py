"""Time the compiled and numpy kernel backends on the same trials.

    python3 benchmarks/bench_kernels.py [--horizon 20000] [--repeats 3]

Reports wall time per trial for each backend and the largest relative
difference between their gap curves.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from siag import available_backends
from siag.harness import ExperimentConfig, run_trial
from siag.optimizer import StepSchedule
from siag.problem import ProblemSpec, generate_instance
from siag.schedule import ScheduleConfig

CASES = {
    "sIAG uniform_cover": ("sIAG", ScheduleConfig("uniform_cover", n=10, cover_T=15, active_fraction=0.2, seed=2)),
    "SGD nonuniform": ("SGD", ScheduleConfig("nonuniform", n=10, seed=2)),
    "IAG cyclic": ("IAG", ScheduleConfig("cyclic", n=10, seed=0)),
}


def time_case(method, schedule, horizon, backend, repeats):
    cfg = ExperimentConfig(ProblemSpec(10, 20, 10, 0.1, 1), schedule, method,
                           StepSchedule("inverse_t", beta=0.5, gamma=100.0), horizon=horizon,
                           trials=1, seed=3)
    inst = generate_instance(cfg.problem)
    best, gaps = np.inf, None
    for _ in range(repeats):
        t0 = time.perf_counter()
        gaps = run_trial(cfg, 0, instance=inst, steps=cfg.steps, backend=backend).gaps
        best = min(best, time.perf_counter() - t0)
    return best, gaps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizon", type=int, default=20_000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    backends = available_backends()
    print(f"horizon {args.horizon}, best of {args.repeats}; backends: {', '.join(backends)}")
    print(f"{'case':<22}" + "".join(f"{b + ' [s]':>14}" for b in backends) + f"{'speedup':>10}{'max rel diff':>15}")
    for name, (method, sched) in CASES.items():
        res = {b: time_case(method, sched, args.horizon, b, args.repeats) for b in backends}
        line = f"{name:<22}" + "".join(f"{res[b][0]:>14.3f}" for b in backends)
        if len(backends) == 2:
            (tc, gc), (tp, gp) = res["cython"], res["python"]
            diff = float(np.max(np.abs(gc - gp) / np.abs(gp)))
            line += f"{tp / tc:>10.1f}{diff:>15.2e}"
        print(line)


if __name__ == "__main__":
    main()
