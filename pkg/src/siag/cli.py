"""Command-line front end.

Exit codes: 0 success, 1 a check found violations, 2 invalid configuration,
3 divergence or a schedule exceeding its certified delay, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from siag.harness import (ExperimentConfig, analysis_constants, final_window_mean, run_ensemble,
                          run_experiment, slope_fit, speedup_table, write_rows_csv)
from siag.optimizer import DivergenceError
from siag.schedule import ScheduleConfig, StalenessTracker, make_schedule
from siag.theory import (InadmissibleConstants, check_lemma1, check_lemma2, check_lemma3,
                         check_theorem, derive_constants, theorem_bound)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, key: str, value) -> None:
    """Set a dotted path in a config dict; ``n`` sets the worker count everywhere."""
    if key == "n":
        data["problem"]["n"] = value
        data["schedule"]["n"] = value
        return
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node = node[part]
    node[parts[-1]] = value


def load_config_dict(path: str, overrides=()) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        apply_override(data, key.strip(), _parse_value(value))
    return data


def build_config(data: dict, args) -> ExperimentConfig:
    data = dict(data)
    if getattr(args, "trials", None) is not None:
        data["trials"] = args.trials
    if getattr(args, "horizon", None) is not None:
        data["horizon"] = args.horizon
    missing = [name for name, present in (
        ("seed", "seed" in data),
        ("problem.master_seed", "master_seed" in data.get("problem", {})),
        ("schedule.seed", "seed" in data.get("schedule", {})),
    ) if not present]
    if missing:
        raise ConfigError(f"config must set explicit seeds: {', '.join(missing)}")
    try:
        return ExperimentConfig.from_dict(data)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def _print_curve_summary(result, out=sys.stdout) -> None:
    last = result.curve[-1]
    print(f"t={last.t} mean={last.mean:.6g} stderr={last.stderr:.3g} trials={last.trials}", file=out)
    try:
        lo = max(1, result.config.horizon // 100)
        print(f"slope[{lo}, {result.config.horizon}] = {slope_fit(result.curve, lo, result.config.horizon):.4f}",
              file=out)
    except ValueError:
        pass


def cmd_run(args) -> int:
    config = build_config(load_config_dict(args.config, args.set), args)
    result = run_experiment(config, threads=args.threads)
    csv_path, _ = result.write(args.out)
    print(f"wrote {csv_path}")
    _print_curve_summary(result)
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = [_parse_value(v) for v in args.values.split(",") if v.strip()] if args.values else []
    if not values:
        raise ConfigError("sweep needs at least one value")
    base = load_config_dict(args.config, args.set)
    results = []
    for v in values:
        data = json.loads(json.dumps(base))
        apply_override(data, args.key, v)
        results.append((v, run_experiment(build_config(data, args), threads=args.threads)))
    out = Path(args.out)
    for v, r in results:
        r.write(out, stem=f"curve_{args.key}={v}")
    summary = []
    for v, r in results:
        h = r.config.horizon
        try:
            slope = slope_fit(r.curve, h / 10, h)
        except ValueError:
            slope = float("nan")
        summary.append({"value": str(v), "final_window_mean": final_window_mean(r),
                        "final_window_slope": slope})
    if len(summary) > 1:
        ref = summary[0]["final_window_mean"]
        for row in summary:
            row["ratio_to_first"] = row["final_window_mean"] / ref
    write_rows_csv(summary, out / "summary.csv")
    if args.key == "n":
        t_ref = args.reference_t or int(results[0][1].t[-1])
        write_rows_csv(speedup_table([r for _, r in results], t_ref), out / "speedup.csv")
        print(f"wrote {out / 'speedup.csv'}")
    for row in summary:
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return EXIT_OK


def cmd_constants(args) -> int:
    try:
        c = derive_constants(args.mu, args.L, args.sigma2, args.n, args.T, args.beta, args.E0, args.gamma)
    except InadmissibleConstants as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = [("C_L", c.C_L), ("rho_bar", c.rho_bar), ("gamma_min", c.gamma_min), ("gamma", c.gamma),
            ("delta1", c.delta1), ("delta2", c.delta2)]
    for name, value in rows:
        print(f"{name:<10} {value:.6g}")
    for t in _int_list(args.t):
        print(f"bound(t={t}) {theorem_bound(c, t):.6g}")
    return EXIT_OK


def _int_list(text: str | None) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()] if text else []


def cmd_check(args) -> int:
    config = build_config(load_config_dict(args.config, args.set), args)
    try:
        constants = analysis_constants(config)
    except (InadmissibleConstants, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    steps = replace(config.steps, gamma=constants.gamma)
    result = run_experiment(replace(config, steps=steps), threads=args.threads)
    out = Path(args.out)
    result.write(out)
    reports = [check_theorem(constants, result.curve, beta=steps.beta, gamma=steps.gamma)]
    probes = _int_list(args.lemmas)
    if probes:
        ens = run_ensemble(replace(config, steps=steps), probes, threads=args.threads)
        lemma_c = analysis_constants(config, ens.instance, constants.sigma2, use_config_gamma=False)
        reports += [chk(ens.instance, ens, lemma_c) for chk in (check_lemma1, check_lemma2, check_lemma3)]
    for rep in reports:
        rep.write_csv(out / f"{rep.name}_check.csv")
        print(rep.summary())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECK_FAILED


def cmd_schedule_audit(args) -> int:
    data = load_config_dict(args.config, args.set)
    try:
        sched_cfg = ScheduleConfig.from_dict(data.get("schedule", data))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid schedule config: {exc}") from exc
    schedule = make_schedule(sched_cfg, trial=args.trial)
    tracker = StalenessTracker(sched_cfg.n)
    counts = np.zeros(sched_cfg.n, dtype=np.int64)
    done = 0
    while done < args.horizon:
        m = min(4096, args.horizon - done)
        offsets, workers = schedule.next_block(m)
        tracker.advance_block(offsets, workers)
        counts += np.bincount(workers, minlength=sched_cfg.n)
        done += m
    print(f"schedule {sched_cfg.kind} n={sched_cfg.n} horizon={args.horizon}")
    for i, c in enumerate(counts):
        print(f"worker {i:>3} activations {c:>8} frequency {c / args.horizon:.6f}")
    print(f"max observed staleness {tracker.T_observed} (certified T = {schedule.certified_T})")
    if tracker.T_observed > schedule.certified_T:
        print("error: certified staleness bound violated", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siag", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    def experiment_flags(p, out=True):
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--horizon", type=int, default=None)
        if out:
            p.add_argument("--out", required=True)

    p = sub.add_parser("run", help="run one experiment and write its curve")
    experiment_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one experiment per value of a config key")
    experiment_flags(p)
    p.add_argument("--key", required=True, help="dotted config key, or 'n' for the worker count")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--reference-t", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("constants", help="print the convergence-bound constants")
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--E0", type=float, required=True)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--t", default=None, help="comma-separated iterations at which to print the bound")
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("check", help="run an experiment and check the bound (and lemmas)")
    experiment_flags(p)
    p.add_argument("--lemmas", default=None, help="comma-separated probe iterations for the lemma checks")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("schedule-audit", help="simulate a schedule alone and report staleness")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--trial", type=int, default=0)
    p.set_defaults(func=cmd_schedule_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
