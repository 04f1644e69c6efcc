import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qanas import data as D
from qanas import nn
from qanas import search as R
from qanas import space as S
from qanas import surrogate as G

CIFAR10 = R.ScoreConfig.preset("cifar10")


def brute_front(points):
    """O(n^2) dominance check; exact duplicates keep the lowest index."""
    keep = []
    for i, p in enumerate(points):
        dominated = any(
            (q[0] >= p[0] and q[1] <= p[1] and (q[0] > p[0] or q[1] < p[1]))
            or (q == p and j < i)
            for j, q in enumerate(points)
            if j != i
        )
        if not dominated:
            keep.append(i)
    return sorted(keep, key=lambda i: points[i][1])


def test_scalarize_examples():
    assert R.scalarize(0.8, 10**8, CIFAR10) == pytest.approx(2.0, abs=1e-12)
    # 1.125 + 8 / log10(81920), evaluated independently with exact decimal log
    assert R.scalarize(0.9, 81920, CIFAR10) == pytest.approx(2.7532037639550265, abs=1e-9)
    assert R.ScoreConfig.preset("cifar10") == R.ScoreConfig(0.8, 8.0)
    assert R.ScoreConfig.preset("cifar100") == R.ScoreConfig(0.8, 6.0)
    assert R.scalarize(0.8, 10**6, R.ScoreConfig.preset("cifar100")) == pytest.approx(2.0)


def test_scalarize_rejects_bad_inputs():
    with pytest.raises(ValueError):
        R.scalarize(0.5, 1, CIFAR10)
    with pytest.raises(ValueError):
        R.scalarize(80.0, 1000, CIFAR10)
    with pytest.raises(ValueError):
        R.ScoreConfig(0.0, 8)


@settings(max_examples=300)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(2, 10**12), st.integers(2, 10**12))
def test_scalarize_monotone(a1, a2, s1, s2):
    (a_lo, a_hi), (s_lo, s_hi) = sorted((a1, a2)), sorted((s1, s2))
    assert R.scalarize(a_hi, s_lo, CIFAR10) >= R.scalarize(a_lo, s_hi, CIFAR10)


@settings(max_examples=200)
@given(st.floats(0.05, 1), st.integers(100, 10**9))
def test_iso_line_passes_through_point(acc, size):
    score = R.scalarize(acc, size, CIFAR10)
    assert R.iso_accuracy(score, size, CIFAR10) == pytest.approx(acc, abs=1e-9)


def test_pareto_small_cases():
    assert R.pareto_front([(0.5, 100)]) == [0]
    assert R.pareto_front([(0.5, 100), (0.5, 100)]) == [0]
    assert R.pareto_front([(0.5, 100), (0.6, 50), (0.7, 200)]) == [1, 2]
    with pytest.raises(ValueError):
        R.pareto_front([])


@settings(max_examples=300)
@given(
    st.lists(
        st.tuples(st.sampled_from([0.1, 0.2, 0.5, 0.9]), st.integers(1, 6)),
        min_size=1,
        max_size=40,
    )
)
def test_pareto_matches_brute_force(points):
    front = R.pareto_front(points)
    assert front == brute_front(points)
    for i in front:
        assert not any(R.dominates(q, points[i]) for q in points)


def test_score_level_set_through_front_members():
    rng = np.random.default_rng(0)
    pts = [(float(a), int(s)) for a, s in zip(rng.uniform(0.3, 1, 50), rng.integers(10**3, 10**7, 50))]
    for i in R.pareto_front(pts):
        acc, size = pts[i]
        level = R.scalarize(acc, size, CIFAR10)
        assert R.iso_accuracy(level, size, CIFAR10) == pytest.approx(acc, abs=1e-9)


def _record(**kw):
    sp = S.load_space("table1")
    g = S.seed_genome(sp)
    base = dict(
        index=3,
        genome=g,
        policy=S.seed_policy(sp, g),
        fp_accuracy=0.91,
        quant_accuracy=0.9,
        size_bits=2**70,
        score=1.5,
        duration_seconds=0.25,
    )
    base.update(kw)
    return R.TrialRecord(**base)


def test_trial_record_json_round_trip(tmp_path):
    recs = [_record(), _record(index=4, policy=None, mode="float_only", status="diverged")]
    path = tmp_path / "log.jsonl"
    R.write_log(recs, path)
    back = R.read_log(path)
    assert back == recs
    assert back[0].size_bits == 2**70
    assert json.loads(path.read_text().splitlines()[0])["schema_version"] == R.SCHEMA_VERSION


def test_trial_record_rejects_unknown_schema():
    d = _record().to_dict()
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        R.TrialRecord.from_dict(d)


def test_run_config_parsing():
    cfg = R.parse_run_config(
        """
[search]
mode = ptq_fixed8
max_trials = 7
seed = 3
[score]
preset = cifar100
[train.early]
epochs = 2
[train.final]
epochs = 9
qaft_epochs = 3
[surrogate]
beta = 1.5
[dataset]
name = spirals
n_train = 40
"""
    )
    assert (cfg.mode, cfg.max_trials, cfg.seed) == ("ptq_fixed8", 7, 3)
    assert cfg.score == R.ScoreConfig(0.8, 6.0)
    assert cfg.early.epochs == 2 and cfg.final.epochs == 9 and cfg.final_qaft_epochs == 3
    assert cfg.acquisition.beta == 1.5
    assert cfg.dataset["name"] == "spirals"
    with pytest.raises(ValueError):
        R.parse_run_config("[search]\nmode = nas\n")


def test_bundled_configs_load():
    assert R.load_run_config("default").space == "toy"
    proto = R.load_run_config("full_protocol")
    assert proto.max_trials == 100 and proto.final.epochs == 200


@pytest.fixture(scope="module")
def tiny():
    ds = D.digits(120, 60)
    cfg = R.RunConfig(
        max_trials=3,
        early=nn.TrainConfig(epochs=1),
        final=nn.TrainConfig(epochs=1),
        final_qaft_epochs=1,
        acquisition=G.AcquisitionConfig(pool_size=20, n_random_init=2),
    )
    return cfg, ds


@pytest.mark.parametrize("mode", R.MODES)
def test_run_trial_mode_semantics(tiny, mode):
    cfg, ds = tiny
    cfg = cfg.replace(mode=mode)
    rec = R.run_trial(cfg, None, np.random.default_rng(0), dataset=ds)
    assert rec.status == "ok" and math.isfinite(rec.score)
    assert rec.score == pytest.approx(R.scalarize(rec.quant_accuracy, rec.size_bits, cfg.score))
    sp = R.resolve_space(cfg, ds)
    layers = S.materialize(rec.genome, sp)
    if mode == "float_only":
        assert rec.policy is None and rec.quant_accuracy == rec.fp_accuracy
        assert rec.size_bits == sum(32 * (l.n_weights + l.n_biases) for l in layers)
        assert rec.weight_quant == []
    else:
        assert len(rec.policy) == sum(l.quantizable for l in layers)
        assert len(rec.weight_quant) == len(rec.policy)
    if mode == "ptq_fixed8":
        assert set(rec.policy.weight_bitwidths) == {8}
    if mode == "qaft_fixed4":
        assert set(rec.policy.weight_bitwidths) == {4}


def test_qaft_changes_weights_ptq_does_not(tiny):
    cfg, ds = tiny
    a = R.run_trial(cfg.replace(mode="qaft_mp"), None, np.random.default_rng(0), dataset=ds)
    b = R.run_trial(cfg.replace(mode="ptq_mp"), None, np.random.default_rng(0), dataset=ds)
    assert a.genome == b.genome and a.policy == b.policy
    assert a.fp_accuracy == b.fp_accuracy
    assert a.weight_quant != b.weight_quant


def test_trial_is_deterministic(tiny):
    cfg, ds = tiny
    a = R.run_trial(cfg, None, np.random.default_rng(4), index=2, dataset=ds)
    b = R.run_trial(cfg, None, np.random.default_rng(4), index=2, dataset=ds)
    a.duration_seconds = b.duration_seconds = 0.0
    assert a.to_json() == b.to_json()


def test_single_trial_search(tiny, tmp_path):
    cfg, ds = tiny
    res = R.run_search(cfg.replace(max_trials=1), ds, out_dir=tmp_path)
    assert len(res.trials) == 1 and res.front == [0]
    assert len(res.finals) == 1
    assert len(R.read_log(tmp_path / "trials.jsonl")) == 1
    rows = (tmp_path / "pareto.csv").read_text().splitlines()
    assert rows[0] == "index,accuracy,size_bits,size_kB,score" and len(rows) == 2


def test_search_outputs_and_front(tiny, tmp_path):
    cfg, ds = tiny
    res = R.run_search(cfg.replace(final_training=False), ds, out_dir=tmp_path)
    assert res.finals == []
    pts = [(t.quant_accuracy, t.size_bits) for t in res.trials]
    assert res.front == brute_front(pts)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["trials"] == 3 and summary["score"] == {"ref_accuracy": 0.8, "ref_model_size": 8.0}


def test_final_training_resume_keeps_early_weights(tiny):
    cfg, ds = tiny
    res = R.run_search(cfg.replace(max_trials=2, resume_final=True, mode="float_only"), ds)
    assert len(res.finals) == len(res.front)
    assert all(f.status == "ok" for f in res.finals)


def test_trial_seed_separates_streams():
    assert R.trial_seed(7, 0) != R.trial_seed(7, 1)
    assert R.trial_seed(7, 0, 0) != R.trial_seed(7, 0, 1)
    assert R.trial_seed(7, 3) == R.trial_seed(7, 3)


def test_run_config_validation():
    with pytest.raises(ValueError):
        R.RunConfig(mode="bogus")
    with pytest.raises(ValueError):
        R.RunConfig(max_trials=0)
