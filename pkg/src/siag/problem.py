"""Streaming least-squares problem.

Worker ``i`` observes fresh pairs ``(A, y)`` with ``A`` an ``p x d`` standard
Gaussian matrix and ``y ~ N(A w_i*, noise_std^2 I_p)``.  The sampled loss is
``0.5 * ||A w - y||^2``, whose expectation has gradient ``p (w - w_i*)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from siag import _rng


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    d: int
    p: int
    noise_std: float = 0.0
    master_seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.d < 1 or self.p < 1:
            raise ValueError(f"n, d, p must be positive, got n={self.n}, d={self.d}, p={self.p}")
        if not self.noise_std >= 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def draw_width(self) -> int:
        """Number of standard normals consumed by one gradient sample."""
        return self.p * self.d + self.p

    def to_dict(self) -> dict:
        return {"n": self.n, "d": self.d, "p": self.p,
                "noise_std": self.noise_std, "master_seed": self.master_seed}

    @classmethod
    def from_dict(cls, data: dict) -> ProblemSpec:
        return cls(**data)


@dataclass(frozen=True, eq=False)
class LsqInstance:
    spec: ProblemSpec
    w_star_local: np.ndarray
    w_star: np.ndarray
    mu: float
    L: float

    @property
    def n(self) -> int:
        return self.spec.n

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def p(self) -> int:
        return self.spec.p

    @property
    def noise_std(self) -> float:
        return self.spec.noise_std


@dataclass(frozen=True)
class GradientSample:
    grad: np.ndarray
    worker: int
    iter_stamp: int = 0


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _mean_rows(rows: np.ndarray) -> np.ndarray:
    # left-to-right summation in worker order
    total = np.zeros(rows.shape[1])
    for row in rows:
        total = total + row
    return total / rows.shape[0]


def generate_instance(spec: ProblemSpec, w_star_local: np.ndarray | None = None) -> LsqInstance:
    """Draw the per-worker minimizers uniformly on ``[0, 1]^d``.

    ``w_star_local`` overrides the draw (used by tests to pin the minimizers).
    """
    if w_star_local is None:
        rng = _rng.stream(spec.master_seed, _rng.INSTANCE)
        w_star_local = rng.random((spec.n, spec.d))
    else:
        w_star_local = np.array(w_star_local, dtype=np.float64).reshape(spec.n, spec.d)
    return LsqInstance(
        spec=spec,
        w_star_local=_readonly(w_star_local),
        w_star=_readonly(_mean_rows(w_star_local)),
        mu=float(spec.p),
        L=float(spec.p),
    )


def _check_dim(instance: LsqInstance, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (instance.d,):
        raise ValueError(f"expected a vector of dimension {instance.d}, got shape {w.shape}")
    return w


def gradient_from_draw(instance: LsqInstance, worker: int, w: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Sampled gradient ``A^T (A w - y)`` for the data encoded by the normals ``z``.

    The first ``p*d`` entries of ``z`` are ``A`` in row-major order, the last
    ``p`` are the standardized observation noise.
    """
    return lsq_gradient(z, instance.w_star_local[worker], w, instance.noise_std, instance.p, instance.d)


def lsq_gradient(z: np.ndarray, w_local: np.ndarray, w: np.ndarray, noise_std: float,
                 p: int, d: int) -> np.ndarray:
    A = z[: p * d].reshape(p, d)
    y = A @ w_local + noise_std * z[p * d:]
    return A.T @ (A @ w - y)


def sample_gradient(instance: LsqInstance, worker: int, w: np.ndarray,
                    rng: np.random.Generator, iter_stamp: int = 0) -> GradientSample:
    """Draw a fresh data point for ``worker`` and return its gradient at ``w``."""
    w = _check_dim(instance, w)
    z = rng.standard_normal(instance.spec.draw_width)
    return GradientSample(gradient_from_draw(instance, worker, w, z), worker, iter_stamp)


def exact_gradient(instance: LsqInstance, worker: int, w: np.ndarray) -> np.ndarray:
    w = _check_dim(instance, w)
    return instance.p * (w - instance.w_star_local[worker])


def full_gradient(instance: LsqInstance, w: np.ndarray) -> np.ndarray:
    """Gradient of the global objective, averaged in worker order."""
    grads = np.array([exact_gradient(instance, i, w) for i in range(instance.n)])
    return _mean_rows(grads)


def empirical_noise_bound(instance: LsqInstance, w: np.ndarray, samples: int = 20_000,
                          rng: np.random.Generator | None = None, batch: int = 4096) -> float:
    """Smallest ``s2`` with ``E||g_i(w) - grad F_i(w)||^2 <= s2 (1 + ||w - w*||^2)`` for all workers.

    The expectation is a Monte Carlo average over ``samples`` draws per worker.
    """
    if samples < 100:
        raise ValueError("samples must be at least 100")
    w = _check_dim(instance, w)
    if rng is None:
        rng = _rng.stream(instance.spec.master_seed, _rng.NOISE_PROBE)
    p, d = instance.p, instance.d
    worst = 0.0
    for i in range(instance.n):
        mean_grad = exact_gradient(instance, i, w)
        total = 0.0
        left = samples
        while left:
            m = min(batch, left)
            z = rng.standard_normal((m, instance.spec.draw_width))
            A = z[:, : p * d].reshape(m, p, d)
            y = A @ instance.w_star_local[i] + instance.noise_std * z[:, p * d:]
            g = np.einsum("mpd,mp->md", A, A @ w - y)
            total += float(np.sum((g - mean_grad) ** 2))
            left -= m
        worst = max(worst, total / samples)
    dist2 = float(np.sum((w - instance.w_star) ** 2))
    return worst / (1.0 + dist2)
