"""Seeded experiment harnesses used by the acceptance suite and ``scripts/``.

Each function returns plain data so callers can print, assert or dump it.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import data as D
from . import nn
from . import search as R
from . import space as S
from . import surrogate as G

# --------------------------------------------------------------------------
# BO against random search on a synthetic objective


def synthetic_objective(space: S.SearchSpaceSpec, seed: int = 0):
    """Negative squared distance to a fixed random target encoding.

    The target is the encoding of a uniformly drawn candidate, so the optimum
    (score 0) is reachable.
    """
    rng = np.random.default_rng([seed, 0xB0])
    g, p = G.random_candidate(space, rng)
    target = S.encode(g, p, space)

    def f(genome, policy) -> float:
        d = S.encode(genome, policy, space) - target
        return -float(d @ d)

    return f


def best_so_far_bo(space, objective, trials: int, seed: int, acq: G.AcquisitionConfig) -> float:
    rng = np.random.default_rng(seed)
    state, best = None, -np.inf
    for _ in range(trials):
        g, p = G.propose(state, space, acq, rng)
        y = objective(g, p)
        best = max(best, y)
        x = S.encode(g, p, space)
        state = G.fit_best(x[None, :], [y]) if state is None else G.update(state, x, y)
    return best


def best_so_far_random(space, objective, trials: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    return max(objective(*G.random_candidate(space, rng)) for _ in range(trials))


@dataclass
class PairedComparison:
    a: list[float]
    b: list[float]

    @property
    def wins(self) -> int:
        return sum(x > y for x, y in zip(self.a, self.b))

    @property
    def losses(self) -> int:
        return sum(x < y for x, y in zip(self.a, self.b))

    def sign_test_p(self) -> float:
        """One-sided exact sign test for ``a > b``; ties are dropped."""
        from scipy.stats import binomtest

        n = self.wins + self.losses
        if n == 0:
            return 1.0
        return float(binomtest(self.wins, n, 0.5, alternative="greater").pvalue)


def bo_vs_random(
    space_name: str = "table1",
    trials: int = 50,
    seeds: Sequence[int] = range(20),
    acq: G.AcquisitionConfig = G.AcquisitionConfig(),
) -> PairedComparison:
    space = S.load_space(space_name)
    bo, rnd = [], []
    for seed in seeds:
        f = synthetic_objective(space, seed)
        bo.append(best_so_far_bo(space, f, trials, seed, acq))
        rnd.append(best_so_far_random(space, f, trials, seed))
    return PairedComparison(bo, rnd)


# --------------------------------------------------------------------------
# QAFT after PTQ on a fixed architecture


@dataclass
class QaftDirection:
    seed: int
    ptq_accuracy: float
    qaft_accuracy: float


def qaft_direction(
    seeds: Sequence[int] = range(10),
    bits: int = 4,
    float_epochs: int = 15,
    qaft: nn.TrainConfig = R.RunConfig().qaft,
    dataset: D.Dataset | None = None,
    space_name: str = "toy",
) -> list[QaftDirection]:
    """Train the seed architecture, quantize to ``bits`` everywhere, and
    compare PTQ accuracy with accuracy after one QAFT pass."""
    dataset = dataset or D.digits(500, 500)
    space = S.with_input(S.load_space(space_name), dataset.input_shape, dataset.num_classes)
    genome = S.seed_genome(space)
    layers = S.materialize(genome, space)
    policy = S.QuantizationPolicy.uniform(S.quantizable_layers(genome, space), bits)
    out = []
    for seed in seeds:
        model = nn.Model(layers, np.float32).init_params(np.random.default_rng(seed))
        nn.train(model, dataset.train, nn.TrainConfig(epochs=float_epochs, seed=seed))
        ptq = R.quantize_and_tune(model, policy, dataset, None)
        nn.train(model, dataset.train, dataclasses.replace(qaft, seed=seed), qaft=True)
        out.append(QaftDirection(seed, ptq, nn.evaluate(model, dataset.test)))
    return out


# --------------------------------------------------------------------------
# paired qaft_mp / ptq_mp searches


@dataclass
class ModePair:
    seed: int
    size_threshold: float
    attainment: dict[str, float]
    search_seconds: dict[str, float]
    fronts: dict[str, list[tuple[float, int]]]


def small_size_attainment(results: dict[str, R.SearchResult], decile: float = 0.1):
    """Best quantized accuracy each run reaches at or below the pooled
    ``decile`` size quantile of all trials from both runs."""
    sizes = np.array([t.size_bits for r in results.values() for t in r.trials], dtype=float)
    threshold = float(np.quantile(sizes, decile))
    att = {
        mode: max(
            (t.quant_accuracy for t in r.trials if t.status == "ok" and t.size_bits <= threshold),
            default=0.0,
        )
        for mode, r in results.items()
    }
    return threshold, att


def mode_pair(
    seed: int,
    modes: tuple[str, str] = ("qaft_mp", "ptq_mp"),
    max_trials: int = 30,
    dataset: D.Dataset | None = None,
    base: R.RunConfig | None = None,
) -> ModePair:
    dataset = dataset or D.digits(500, 500)
    base = (base or R.RunConfig()).replace(
        max_trials=max_trials, seed=seed, final_training=False
    )
    results = {m: R.run_search(base.replace(mode=m), dataset) for m in modes}
    threshold, att = small_size_attainment(results)
    return ModePair(
        seed,
        threshold,
        att,
        {m: r.search_seconds for m, r in results.items()},
        {
            m: [(r.trials[i].quant_accuracy, r.trials[i].size_bits) for i in r.front]
            for m, r in results.items()
        },
    )


# --------------------------------------------------------------------------
# convergence of proposed scores


def score_halves(cfg: R.RunConfig, dataset: D.Dataset | None = None) -> tuple[float, float]:
    """Mean trial score over the first and second half of one search."""
    res = R.run_search(cfg.replace(final_training=False), dataset)
    s = [t.score for t in res.trials]
    h = len(s) // 2
    return float(np.mean(s[:h])), float(np.mean(s[h:]))


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    return out, time.perf_counter() - t0
