import json
import subprocess
import sys

import pytest

from qanas import cli
from qanas import search as R

TINY = """
[search]
mode = {mode}
max_trials = 3
space = toy
[train.early]
epochs = 1
[train.final]
epochs = 1
qaft_epochs = 1
[surrogate]
pool_size = 20
n_random_init = 2
[dataset]
name = digits
n_train = 100
n_test = 50
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    def make(mode="qaft_mp"):
        p = tmp_path / f"{mode}.ini"
        p.write_text(TINY.format(mode=mode))
        return str(p)

    return make


def test_validate_space_prints_counts(capsys, tmp_path, monkeypatch):
    monkeypatch.delenv("QANAS_OUT", raising=False)
    assert cli.main(["validate-space", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "39671858073600000000" in out
    info = json.loads((tmp_path / "space.json").read_text())
    assert info["architectures"] == 39671858073600000000
    assert info["seed_policies"] == 5**23


def test_search_then_report(tiny_cfg, tmp_path, monkeypatch):
    monkeypatch.delenv("QANAS_OUT", raising=False)
    out = tmp_path / "run"
    assert cli.main(["search", "--config", tiny_cfg(), "--seed", "1", "--out", str(out)]) == 0
    for name in ("trials.jsonl", "pareto.csv", "final.jsonl", "summary.json", "scatter.svg", "bitwidths.svg", "cost.csv"):
        assert (out / name).exists(), name
    before = (out / "scatter.svg").read_bytes()
    assert cli.main(["report", "--out", str(out)]) == 0
    assert (out / "scatter.svg").read_bytes() == before


def test_env_overrides_out(tiny_cfg, tmp_path, monkeypatch):
    target = tmp_path / "env"
    monkeypatch.setenv("QANAS_OUT", str(target))
    assert cli.main(["search", "--config", tiny_cfg(), "--no-final", "--no-report", "--out", str(tmp_path / "ignored")]) == 0
    assert (target / "trials.jsonl").exists()
    assert not (tmp_path / "ignored").exists()


def test_float_only_report_skips_bitwidths(tiny_cfg, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("QANAS_OUT", raising=False)
    out = tmp_path / "f"
    assert cli.main(["search", "--config", tiny_cfg("float_only"), "--no-final", "--out", str(out)]) == 0
    assert "skipped" in capsys.readouterr().out
    assert not (out / "bitwidths.svg").exists()


def test_ablate_writes_cost_table(tiny_cfg, tmp_path, monkeypatch):
    monkeypatch.delenv("QANAS_OUT", raising=False)
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--config", tiny_cfg(), "--modes", "qaft_mp,ptq_mp", "--max-trials", "2", "--no-final", "--out", str(out)]) == 0
    lines = (out / "cost.csv").read_text().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["qaft_mp", "ptq_mp"]
    assert len(R.read_log(out / "ptq_mp" / "trials.jsonl")) == 2


def test_report_without_log_fails(tmp_path, monkeypatch):
    monkeypatch.delenv("QANAS_OUT", raising=False)
    assert cli.main(["report", "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "qanas.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "validate-space" in r.stdout
