"""Convergence constants, the O(1/t) bound, and Monte Carlo inequality checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

Z_CONFIDENCE = 3.0


class InadmissibleConstants(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisConstants:
    mu: float
    L: float
    sigma2: float
    n: int
    T: int
    beta: float
    gamma: float
    E0: float
    C_L: float
    rho_bar: float
    gamma_min: float
    delta1: float
    delta2: float

    def step(self, t: float) -> float:
        return self.beta / (t + self.gamma)

    def problems(self) -> list[str]:
        """Reasons these constants do not satisfy the theorem's hypotheses."""
        out = []
        if not self.mu > 0:
            out.append("mu must be positive")
        if self.L < self.mu:
            out.append("L must be >= mu")
        if not self.beta > 4 / self.mu:
            out.append(f"beta={self.beta:g} is not admissible: need beta > 4/mu = {4 / self.mu:g}")
        if self.gamma < self.gamma_min:
            out.append(f"gamma={self.gamma:g} is below the required lower bound {self.gamma_min:g}")
        return out


def c_l(L: float, sigma2: float, n: int) -> float:
    return 20 * L ** 2 + 2 * sigma2 / n


def rho_bar(mu: float, L: float, T: int, beta: float) -> float:
    return 1 + 2 * T + (mu / 2 + 5 * L ** 2 / mu) * beta * T


def gamma_lower_bound(mu: float, L: float, sigma2: float, n: int, T: int, beta: float) -> float:
    cl = c_l(L, sigma2, n)
    rb = rho_bar(mu, L, T, beta)
    return 2 * T + max(16 * cl * beta ** 2 * rb / (mu * beta - 2),
                       math.sqrt(8 * cl * beta ** 2 * rb / (mu * beta - 4)))


def derive_constants(mu: float, L: float, sigma2: float, n: int, T: int, beta: float, E0: float,
                     gamma: float | None = None) -> AnalysisConstants:
    """All constants of the O(1/t) bound for step sizes ``beta / (t + gamma)``.

    ``gamma`` defaults to its smallest admissible value; a larger value may be
    passed, a smaller one is rejected.
    """
    if not mu > 0 or L < mu:
        raise InadmissibleConstants(f"need mu > 0 and L >= mu, got mu={mu}, L={L}")
    if n < 1 or T < 0 or sigma2 < 0 or E0 < 0:
        raise InadmissibleConstants("need n >= 1, T >= 0, sigma2 >= 0, E0 >= 0")
    if not beta > 4 / mu:
        raise InadmissibleConstants(
            f"beta={beta:g} is not admissible: the bound requires beta > 4/mu = {4 / mu:g}")
    g_min = gamma_lower_bound(mu, L, sigma2, n, T, beta)
    if gamma is None:
        gamma = g_min
    elif gamma < g_min:
        raise InadmissibleConstants(f"gamma={gamma:g} is below the required lower bound {g_min:g}")
    rb = rho_bar(mu, L, T, beta)
    return AnalysisConstants(
        mu=mu, L=L, sigma2=sigma2, n=n, T=T, beta=beta, gamma=gamma, E0=E0,
        C_L=c_l(L, sigma2, n), rho_bar=rb, gamma_min=g_min,
        delta1=32 * beta ** 2 * rb / (mu * beta - 2) + 1,
        delta2=gamma ** 2 * E0,
    )


def theorem_bound(c: AnalysisConstants, t: float) -> float:
    return c.delta1 * c.sigma2 / (c.n * (c.gamma + t)) + c.delta2 / (c.gamma + t) ** 2


@dataclass(frozen=True)
class GapEstimate:
    t: int
    mean: float
    stderr: float
    trials: int


@dataclass
class CheckRow:
    t: int
    lhs: float
    rhs: float
    stderr: float
    label: str = ""

    @property
    def margin(self) -> float:
        """Slack of the inequality; negative means the estimate crosses the bound."""
        return self.rhs - self.lhs

    @property
    def violated(self) -> bool:
        return self.margin + Z_CONFIDENCE * self.stderr < 0


@dataclass
class CheckReport:
    name: str
    rows: list[CheckRow] = field(default_factory=list)
    invalid: list[str] = field(default_factory=list)

    @property
    def valid(self) -> bool:
        return not self.invalid

    @property
    def violations(self) -> list[CheckRow]:
        return [r for r in self.rows if r.violated]

    @property
    def passed(self) -> bool:
        return self.valid and not self.violations

    def worst(self) -> CheckRow | None:
        if not self.rows:
            return None
        return min(self.rows, key=lambda r: (r.margin + Z_CONFIDENCE * r.stderr) / max(abs(r.rhs), 1e-300))

    def summary(self) -> str:
        if not self.valid:
            return f"{self.name}: INVALID ({'; '.join(self.invalid)})"
        w = self.worst()
        head = f"{self.name}: {len(self.violations)} violation(s) in {len(self.rows)} point(s)"
        if w is None:
            return head
        return (f"{head}; tightest at t={w.t}{' ' + w.label if w.label else ''}: "
                f"lhs={w.lhs:.4g} rhs={w.rhs:.4g} margin={w.margin:.4g} stderr={w.stderr:.3g}")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["t", "lhs", "rhs", "margin", "stderr", "label"])
            for r in self.rows:
                out.writerow([r.t, repr(r.lhs), repr(r.rhs), repr(r.margin), repr(r.stderr), r.label])


def check_theorem(c: AnalysisConstants, curve: Sequence[GapEstimate], *,
                  beta: float | None = None, gamma: float | None = None) -> CheckReport:
    """Compare an estimated gap curve against the bound at every recorded t.

    ``beta``/``gamma`` describe the step sizes that produced the curve; they
    must match the constants.
    """
    report = CheckReport("theorem", invalid=c.problems())
    if beta is not None and not math.isclose(beta, c.beta):
        report.invalid.append(f"curve used beta={beta:g} but constants assume {c.beta:g}")
    if gamma is not None and not math.isclose(gamma, c.gamma):
        report.invalid.append(f"curve used gamma={gamma:g} but constants assume {c.gamma:g}")
    if not report.valid:
        return report
    for g in curve:
        report.rows.append(CheckRow(g.t, g.mean, theorem_bound(c, g.t), g.stderr))
    return report


# Lemma checks operate on an Ensemble produced by siag.harness.run_ensemble.

def _mean_se(x: np.ndarray) -> tuple[float, float]:
    x = x[np.isfinite(x)]
    if len(x) == 0:
        return math.nan, math.nan
    se = float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0
    return float(np.mean(x)), se


def _window_max(ens, lo: int, hi: int) -> tuple[float, float]:
    """Max over s in [lo, hi] of the estimated gap, with its standard error."""
    best, best_se = -math.inf, 0.0
    for s in range(max(lo, 0), hi + 1):
        m, se = ens.gap_estimate(s)
        if m > best:
            best, best_se = m, se
    return best, best_se


def _eta_delayed(ens, t: int, T: int) -> float:
    return ens.steps(max(t - T, 0))


def check_lemma1(instance, ens, c: AnalysisConstants) -> CheckReport:
    """``E||g^t/n||^2 <= 2 sigma^2/n + C_L max_{s in [t-T, t]} E_s``."""
    report = CheckReport("lemma1")
    T = c.T
    for k, t in enumerate(ens.probe_times):
        lhs, se_l = _mean_se(np.sum((ens.g_probe[:, k] / ens.n) ** 2, axis=1))
        emax, se_e = _window_max(ens, t - T, t)
        rhs = 2 * c.sigma2 / c.n + c.C_L * emax
        report.rows.append(CheckRow(t, lhs, rhs, math.hypot(se_l, c.C_L * se_e)))
    return report


def check_lemma2(instance, ens, c: AnalysisConstants) -> CheckReport:
    """``E<w^t - w*, g^t/n> >= (mu/4) E_t - a_t E^max_t - b_t sigma^2/n``.

    Rows store the inequality as ``lhs <= rhs`` with ``lhs`` the negated inner
    product and ``rhs`` the negated lower bound, so margins read the same way
    as the other checks.
    """
    report = CheckReport("lemma2")
    T, mu, L = c.T, c.mu, c.L
    for k, t in enumerate(ens.probe_times):
        inner, se_i = _mean_se(np.einsum("rd,rd->r", ens.w_probe[:, k] - instance.w_star,
                                         ens.g_probe[:, k] / ens.n))
        et, se_t = ens.gap_estimate(t)
        emax, se_e = _window_max(ens, t - 2 * T, t)
        eta = _eta_delayed(ens, t, T)
        a = c.C_L * T * eta + (mu / 4 + 5 * L ** 2 / (2 * mu)) * c.C_L * T ** 2 * eta ** 2
        b = 2 * T * eta + (mu / 2 + 5 * L ** 2 / mu) * T ** 2 * eta ** 2
        lower = mu / 4 * et - a * emax - b * c.sigma2 / c.n
        se = math.sqrt(se_i ** 2 + (mu / 4 * se_t) ** 2 + (a * se_e) ** 2)
        report.rows.append(CheckRow(t, -inner, -lower, se))
    return report


def check_lemma3(instance, ens, c: AnalysisConstants) -> CheckReport:
    """``E||w^t - w^{tau_i(t)}||^2 <= T^2 eta_{t-T}^2 (2 sigma^2/n + C_L E^max_t)`` per worker.

    Workers that have not reported yet at ``t`` have no delayed iterate and
    are skipped.
    """
    report = CheckReport("lemma3")
    T = c.T
    for k, t in enumerate(ens.probe_times):
        emax, se_e = _window_max(ens, t - 2 * T, t)
        eta = _eta_delayed(ens, t, T)
        scale = T ** 2 * eta ** 2
        rhs = scale * (2 * c.sigma2 / c.n + c.C_L * emax)
        for i in range(ens.n):
            lhs, se_l = _mean_se(ens.lag_sq[:, k, i])
            if math.isnan(lhs):
                continue
            report.rows.append(CheckRow(t, lhs, rhs, math.hypot(se_l, scale * c.C_L * se_e),
                                        f"worker={i}"))
    return report
