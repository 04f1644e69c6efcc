"""Gaussian-process surrogate with a Matern-5/2 kernel and UCB acquisition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import space as S

JITTER_FLOOR = 1e-8
MAX_JITTER = 1e-4
LENGTHSCALE_GRID = (0.1, 0.2, 0.5, 1.0, 2.0)  # times sqrt(d)
NOISE_GRID = (1e-6, 1e-4, 1e-2)


class SurrogateError(RuntimeError):
    """Covariance factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class KernelHyper:
    lengthscale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        if self.lengthscale <= 0 or self.signal_variance <= 0:
            raise ValueError("lengthscale and signal variance must be positive")
        if self.noise_variance < JITTER_FLOOR:
            raise ValueError(f"noise variance must be >= {JITTER_FLOOR}")


@dataclass(frozen=True)
class AcquisitionConfig:
    beta: float = 2.0
    pool_size: int = 500
    n_random_init: int = 5

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.pool_size < 1 or self.n_random_init < 1:
            raise ValueError("pool_size and n_random_init must be >= 1")


def matern52(r, hyper: KernelHyper):
    """``s2 * (1 + sqrt5 r/l + 5 r^2 / (3 l^2)) * exp(-sqrt5 r/l)``."""
    z = math.sqrt(5.0) * np.asarray(r, dtype=float) / hyper.lengthscale
    return hyper.signal_variance * (1.0 + z + z * z / 3.0) * np.exp(-z)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"encoding length mismatch: {a.shape[1]} vs {b.shape[1]}")
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(d2, 0.0))


@dataclass(frozen=True)
class SurrogateState:
    X: np.ndarray
    y: np.ndarray
    hyper: KernelHyper
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    y_mean: float = 0.0
    y_std: float = 1.0
    jitter: float = 0.0

    def __len__(self) -> int:
        return len(self.y)


def _gram(X: np.ndarray, hyper: KernelHyper) -> np.ndarray:
    K = matern52(pairwise_distances(X, X), hyper)
    return 0.5 * (K + K.T)


def _factor(K: np.ndarray, noise: float) -> tuple[np.ndarray, float]:
    n = len(K)
    extra = 0.0
    while True:
        try:
            return np.linalg.cholesky(K + (noise + extra) * np.eye(n)), extra
        except np.linalg.LinAlgError:
            extra = JITTER_FLOOR if extra == 0.0 else extra * 10
            if extra > MAX_JITTER:
                raise SurrogateError("covariance not positive definite after jitter") from None


def fit(X, y, hyper: KernelHyper) -> SurrogateState:
    """Exact GP regression on standardized targets."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if len(X) != len(y) or len(y) == 0:
        raise ValueError("need matching, non-empty X and y")
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 0:
        y_std = 1.0
    z = (y - y_mean) / y_std
    L, extra = _factor(_gram(X, hyper), hyper.noise_variance)
    alpha = cho_solve((L, True), z)
    return SurrogateState(X, y, hyper, L, alpha, y_mean, y_std, extra)


def log_marginal_likelihood(state: SurrogateState) -> float:
    z = (state.y - state.y_mean) / state.y_std
    n = len(z)
    return float(
        -0.5 * z @ state.alpha - np.log(np.diag(state.chol)).sum() - 0.5 * n * math.log(2 * math.pi)
    )


def fit_best(X, y, signal_variance: float = 1.0) -> SurrogateState:
    """Grid-search (lengthscale, noise) by log marginal likelihood.

    Ties keep the first grid point in (lengthscale, noise) order.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    scale = math.sqrt(X.shape[1])
    best, best_lml = None, -math.inf
    for ls in LENGTHSCALE_GRID:
        for noise in NOISE_GRID:
            try:
                st = fit(X, y, KernelHyper(ls * scale, signal_variance, noise))
            except SurrogateError:
                continue
            lml = log_marginal_likelihood(st)
            if lml > best_lml:
                best, best_lml = st, lml
    if best is None:
        raise SurrogateError("no grid point produced a valid factorization")
    return best


def predict_many(state: SurrogateState, Xq) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and std at each row of ``Xq``, in score units.

    The std is that of a noisy observation, so far from the data it tends to
    ``sqrt(s2 + sn2)`` (times the target scale).
    """
    Xq = np.atleast_2d(np.asarray(Xq, dtype=float))
    h = state.hyper
    Ks = matern52(pairwise_distances(Xq, state.X), h)
    mean = Ks @ state.alpha
    v = solve_triangular(state.chol, Ks.T, lower=True)
    var = h.signal_variance + h.noise_variance - np.einsum("ij,ij->j", v, v)
    std = np.sqrt(np.maximum(var, 0.0))
    return state.y_mean + state.y_std * mean, state.y_std * std


def predict(state: SurrogateState, x) -> tuple[float, float]:
    m, s = predict_many(state, np.asarray(x, dtype=float)[None, :])
    return float(m[0]), float(s[0])


def ucb(mean, std, beta: float):
    return mean + beta * std


def update(state: SurrogateState, x, y: float, reoptimize: bool = True) -> SurrogateState:
    """Add one observation and refit (hyperparameters re-selected unless
    ``reoptimize`` is False)."""
    X = np.vstack([state.X, np.asarray(x, dtype=float)[None, :]])
    Y = np.append(state.y, y)
    if reoptimize:
        return fit_best(X, Y, state.hyper.signal_variance)
    return fit(X, Y, state.hyper)


# --------------------------------------------------------------------------
# proposals

Candidate = tuple  # (genome, policy or None)


def random_candidate(
    space: S.SearchSpaceSpec,
    rng: np.random.Generator,
    policy_fn: Callable | None = None,
) -> Candidate:
    """Uniform genome plus a policy. ``policy_fn(space, genome, rng)`` overrides
    the uniform mixed-precision policy (fixed-precision and float modes)."""
    genome = S.sample_genome(space, rng)
    fn = policy_fn or S.sample_policy
    return genome, fn(space, genome, rng)


def propose(
    state: SurrogateState | None,
    space: S.SearchSpaceSpec,
    acq: AcquisitionConfig,
    rng: np.random.Generator,
    policy_fn: Callable | None = None,
    encoder: Callable | None = None,
) -> Candidate:
    """Next candidate: uniform while cold, else UCB argmax over a random pool.

    Ties go to the lowest pool index.
    """
    if state is None or len(state) < acq.n_random_init:
        return random_candidate(space, rng, policy_fn)
    enc = encoder or (lambda g, p: S.encode(g, p, space))
    pool = [random_candidate(space, rng, policy_fn) for _ in range(acq.pool_size)]
    Xq = np.stack([enc(g, p) for g, p in pool])
    mean, std = predict_many(state, Xq)
    return pool[int(np.argmax(ucb(mean, std, acq.beta)))]
