import csv

import numpy as np
import pytest

from qanas import report as P
from qanas import search as R
from qanas import space as S


def _trials(n=12, seed=0, float_only=False):
    sp = S.load_space("toy")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        g = S.sample_genome(sp, rng)
        pol = None if float_only else S.sample_policy(sp, g, rng)
        acc = float(rng.uniform(0.3, 0.95))
        size = int(rng.integers(5_000, 500_000))
        out.append(
            R.TrialRecord(i, g, pol, acc, acc, size, R.scalarize(acc, size, R.ScoreConfig()), 0.1)
        )
    return out


def test_scatter_is_deterministic(tmp_path):
    trials = _trials()
    cfg = R.ScoreConfig()
    P.emit_scatter(trials, cfg, tmp_path / "a.svg", seed_point=(100_000, 0.5))
    P.emit_scatter(trials, cfg, tmp_path / "b.svg", seed_point=(100_000, 0.5))
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_iso_lines_invert_to_front_scores(tmp_path):
    trials = _trials()
    cfg = R.ScoreConfig.preset("cifar100")
    spec = P.emit_scatter(trials, cfg, tmp_path / "s.svg")
    assert spec.front == R.pareto_front([(t.quant_accuracy, t.size_bits) for t in trials])
    assert len(spec.iso_lines) == len(spec.front)
    for level, line in zip(spec.iso_levels, spec.iso_lines):
        for kb, acc in line:
            if 0 <= acc <= 1:
                assert R.scalarize(acc, kb * 8192, cfg) == pytest.approx(level, abs=1e-9)
    for i, level in zip(spec.front, spec.iso_levels):
        t = trials[i]
        assert P.iso_line(level, np.array([t.size_kb]), cfg)[0] == pytest.approx(t.quant_accuracy, abs=1e-9)


def test_bitwidth_chart_counts_sum_to_layers(tmp_path):
    front = _trials(5)
    cats = P.emit_bitwidth_chart(front, tmp_path / "bits.svg")
    assert cats == sorted(set(b for t in front for b in t.policy.weight_bitwidths))
    with open(tmp_path / "bits.csv") as f:
        rows = list(csv.DictReader(f))
    for row, t in zip(rows, front):
        assert sum(int(row[f"bits_{b}"]) for b in cats) == int(row["layers"]) == len(t.policy)


def test_bitwidth_chart_refuses_float_only(tmp_path):
    with pytest.raises(ValueError, match="float"):
        P.emit_bitwidth_chart(_trials(3, float_only=True), tmp_path / "x.svg")


def test_cost_table(tmp_path):
    summaries = [
        {"mode": "qaft_mp", "seed": 0, "trials": 10, "search_seconds": 20.0, "final_seconds": 5.0},
        {"mode": "ptq_mp", "seed": 0, "trials": 10, "search_seconds": 16.0, "final_seconds": 4.0},
    ]
    rows = P.emit_cost_table(summaries, tmp_path / "cost.csv")
    assert rows[0]["total_seconds"] == 25.0 and rows[0]["seconds_per_trial"] == 2.0
    lines = (tmp_path / "cost.csv").read_text().splitlines()
    assert lines[0].split(",") == list(P.COST_COLUMNS)
    assert len(lines) == 3
    with pytest.raises(ValueError):
        P.cost_rows([])


def test_empty_log_rejected(tmp_path):
    with pytest.raises(ValueError):
        P.emit_scatter([], R.ScoreConfig(), tmp_path / "x.svg")
