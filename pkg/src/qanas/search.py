"""The trial loop: propose, early-train, quantize, fine-tune, score, update.

After ``max_trials`` trials the Pareto-optimal candidates (quantized accuracy
up, size down) are trained again from scratch with the final budget.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as D
from . import nn
from . import quant as Q
from . import space as S
from . import surrogate as G

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("qaft_mp", "ptq_mp", "ptq_fixed8", "qaft_fixed4", "float_only")
SCORE_PRESETS = {"cifar10": (0.8, 8.0), "cifar100": (0.8, 6.0)}


# --------------------------------------------------------------------------
# scoring and dominance


@dataclass(frozen=True)
class ScoreConfig:
    ref_accuracy: float = 0.8
    ref_model_size: float = 8.0

    def __post_init__(self):
        if not 0 < self.ref_accuracy <= 1:
            raise ValueError("ref_accuracy must lie in (0, 1]")
        if not self.ref_model_size > 0:
            raise ValueError("ref_model_size must be positive")

    @classmethod
    def preset(cls, name: str) -> "ScoreConfig":
        return cls(*SCORE_PRESETS[name])


def scalarize(accuracy: float, size_bits: int, cfg: ScoreConfig) -> float:
    """``accuracy / ref_accuracy + ref_model_size / log10(size_bits)``.

    Accuracy is a fraction in [0, 1].
    """
    if size_bits < 2:
        raise ValueError(f"size_bits must be >= 2, got {size_bits}")
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must be a fraction in [0, 1], got {accuracy}")
    return accuracy / cfg.ref_accuracy + cfg.ref_model_size / math.log10(size_bits)


def iso_accuracy(score: float, size_bits, cfg: ScoreConfig):
    """Accuracy that reaches ``score`` at ``size_bits`` (equal-score line)."""
    return cfg.ref_accuracy * (score - cfg.ref_model_size / np.log10(size_bits))


def pareto_front(points: Sequence[tuple[float, int]]) -> list[int]:
    """Indices of non-dominated ``(accuracy, size)`` points, by ascending size.

    A point is dominated by another with accuracy >= and size <= and at least
    one strict. Exact duplicates keep the lowest index.
    """
    if len(points) == 0:
        raise ValueError("empty trial list")
    order = sorted(range(len(points)), key=lambda i: (points[i][1], -points[i][0], i))
    front, best = [], -math.inf
    for i in order:
        if points[i][0] > best:
            front.append(i)
            best = points[i][0]
    return front


def dominates(a: tuple[float, int], b: tuple[float, int]) -> bool:
    return a[0] >= b[0] and a[1] <= b[1] and (a[0] > b[0] or a[1] < b[1])


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    mode: str = "qaft_mp"
    max_trials: int = 30
    seed: int = 0
    space: str = "toy"
    score: ScoreConfig = ScoreConfig()
    early: nn.TrainConfig = nn.TrainConfig(epochs=5, batch_size=32, learning_rate=0.05)
    qaft: nn.TrainConfig = nn.TrainConfig(
        epochs=1, batch_size=32, learning_rate=0.01, lr_schedule="constant"
    )
    final: nn.TrainConfig = nn.TrainConfig(epochs=40, batch_size=32, learning_rate=0.05)
    final_qaft_epochs: int = 2
    acquisition: G.AcquisitionConfig = G.AcquisitionConfig()
    dataset: dict = field(default_factory=lambda: {"name": "digits", "n_train": 500, "n_test": 500})
    out_dir: str = "runs/default"
    final_training: bool = True
    resume_final: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")

    @property
    def quantized(self) -> bool:
        return self.mode != "float_only"

    @property
    def uses_qaft(self) -> bool:
        return self.mode.startswith("qaft")

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


def _train_cfg(sec, base: nn.TrainConfig) -> nn.TrainConfig:
    if sec is None:
        return base
    return nn.TrainConfig(
        epochs=sec.getint("epochs", base.epochs),
        batch_size=sec.getint("batch_size", base.batch_size),
        learning_rate=sec.getfloat("learning_rate", base.learning_rate),
        momentum=sec.getfloat("momentum", base.momentum),
        lr_schedule=sec.get("lr_schedule", base.lr_schedule),
        seed=base.seed,
    )


def parse_run_config(text: str) -> RunConfig:
    """Parse the INI run schema (sections ``[search] [score] [train.early]
    [train.qaft] [train.final] [surrogate] [dataset]``)."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    d = RunConfig()
    search = cp["search"] if "search" in cp else {}
    kw: dict = {}
    if search:
        kw["mode"] = search.get("mode", d.mode)
        kw["max_trials"] = search.getint("max_trials", d.max_trials)
        kw["seed"] = search.getint("seed", d.seed)
        kw["space"] = search.get("space", d.space)
        kw["out_dir"] = search.get("out_dir", d.out_dir)
        kw["final_training"] = search.getboolean("final_training", d.final_training)
        kw["resume_final"] = search.getboolean("resume_final", d.resume_final)
        kw["dtype"] = search.get("dtype", d.dtype)
    if "score" in cp:
        sec = cp["score"]
        if "preset" in sec:
            kw["score"] = ScoreConfig.preset(sec["preset"])
        else:
            kw["score"] = ScoreConfig(
                sec.getfloat("ref_accuracy", d.score.ref_accuracy),
                sec.getfloat("ref_model_size", d.score.ref_model_size),
            )
    kw["early"] = _train_cfg(cp["train.early"] if "train.early" in cp else None, d.early)
    kw["qaft"] = _train_cfg(cp["train.qaft"] if "train.qaft" in cp else None, d.qaft)
    final_sec = cp["train.final"] if "train.final" in cp else None
    kw["final"] = _train_cfg(final_sec, d.final)
    if final_sec is not None:
        kw["final_qaft_epochs"] = final_sec.getint("qaft_epochs", d.final_qaft_epochs)
    if "surrogate" in cp:
        sec = cp["surrogate"]
        kw["acquisition"] = G.AcquisitionConfig(
            beta=sec.getfloat("beta", d.acquisition.beta),
            pool_size=sec.getint("pool_size", d.acquisition.pool_size),
            n_random_init=sec.getint("n_random_init", d.acquisition.n_random_init),
        )
    if "dataset" in cp:
        kw["dataset"] = dict(cp["dataset"])
    return RunConfig(**kw)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        from importlib import resources

        res = resources.files("qanas") / "configs" / f"{path}.ini"
        if not res.is_file():
            raise FileNotFoundError(path)
        return parse_run_config(res.read_text())
    return parse_run_config(p.read_text())


def resolve_space(cfg: RunConfig, dataset: D.Dataset) -> S.SearchSpaceSpec:
    sp = S.load_space(cfg.space)
    if sp.input_shape != dataset.input_shape or sp.num_classes < dataset.num_classes:
        sp = S.with_input(sp, dataset.input_shape, max(sp.num_classes, dataset.num_classes))
    return sp


# --------------------------------------------------------------------------
# trial records


@dataclass
class TrialRecord:
    index: int
    genome: S.ArchitectureGenome
    policy: S.QuantizationPolicy | None
    fp_accuracy: float
    quant_accuracy: float
    size_bits: int
    score: float
    duration_seconds: float
    status: str = "ok"
    mode: str = "qaft_mp"
    weight_quant: list[dict] = field(default_factory=list)
    activation_quant: list[dict] = field(default_factory=list)

    @property
    def size_kb(self) -> float:
        return self.size_bits / 8192

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "index": self.index,
            "mode": self.mode,
            "status": self.status,
            "genome": self.genome.to_dict(),
            "policy": None if self.policy is None else list(self.policy.weight_bitwidths),
            "fp_accuracy": self.fp_accuracy,
            "quant_accuracy": self.quant_accuracy,
            "size_bits": self.size_bits,
            "score": self.score,
            "duration_seconds": self.duration_seconds,
            "weight_quant": self.weight_quant,
            "activation_quant": self.activation_quant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRecord":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported trial schema {d.get('schema_version')}")
        policy = None if d["policy"] is None else S.QuantizationPolicy(tuple(d["policy"]))
        return cls(
            index=d["index"],
            genome=S.ArchitectureGenome.from_dict(d["genome"]),
            policy=policy,
            fp_accuracy=d["fp_accuracy"],
            quant_accuracy=d["quant_accuracy"],
            size_bits=int(d["size_bits"]),
            score=d["score"],
            duration_seconds=d["duration_seconds"],
            status=d["status"],
            mode=d["mode"],
            weight_quant=d.get("weight_quant", []),
            activation_quant=d.get("activation_quant", []),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        return cls.from_dict(json.loads(line))


def write_log(records: Sequence[TrialRecord], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(r.to_json() + "\n")


def read_log(path: str | Path) -> list[TrialRecord]:
    with open(path) as f:
        return [TrialRecord.from_json(line) for line in f if line.strip()]


# --------------------------------------------------------------------------
# one trial


def policy_fn_for(mode: str):
    if mode == "ptq_fixed8":
        return lambda sp, g, rng: S.QuantizationPolicy.uniform(S.quantizable_layers(g, sp), 8)
    if mode == "qaft_fixed4":
        return lambda sp, g, rng: S.QuantizationPolicy.uniform(S.quantizable_layers(g, sp), 4)
    if mode == "float_only":
        return lambda sp, g, rng: None
    return None


def trial_seed(seed: int, index: int, tag: int = 0) -> int:
    return int(np.random.SeedSequence([seed, index, tag]).generate_state(1)[0])


def quantize_and_tune(
    model: nn.Model,
    policy: S.QuantizationPolicy,
    dataset: D.Dataset,
    qaft_cfg: nn.TrainConfig | None,
) -> float:
    """Fold BN, attach the policy, calibrate activations, optionally run QAFT;
    returns quantized test accuracy."""
    model.fold_batchnorm()
    model.attach_policy(policy)
    model.calibrate(dataset.x_train)
    if qaft_cfg is not None and qaft_cfg.epochs > 0:
        nn.train(model, dataset.train, qaft_cfg, qaft=True)
    return nn.evaluate(model, dataset.test)


def _quant_snapshot(model: nn.Model) -> tuple[list[dict], list[dict]]:
    weights = [
        Q.calibrate_weights(l.params["w"], l.bitwidth, -1).to_dict() for l in model.weighted
    ]
    acts = [
        l.tracker.params(l.act_bits).to_dict()
        for l in model.layers
        if isinstance(l, nn.ReLU6) and l.tracker is not None
    ]
    return weights, acts


def evaluate_candidate(
    cfg: RunConfig,
    genome: S.ArchitectureGenome,
    policy: S.QuantizationPolicy | None,
    space: S.SearchSpaceSpec,
    dataset: D.Dataset,
    index: int,
    keep_model: bool = False,
):
    """Early-train, quantize and score one candidate; returns the record and
    (when ``keep_model``) the early-trained float model."""
    t0 = time.perf_counter()
    layers = S.materialize(genome, space)
    size = Q.model_size_bits(layers, policy).total_bits
    seed = trial_seed(cfg.seed, index)
    model = nn.Model(layers, cfg.dtype).init_params(np.random.default_rng(seed))
    snapshot = None
    wq: list[dict] = []
    aq: list[dict] = []
    try:
        nn.train(model, dataset.train, dataclasses.replace(cfg.early, seed=seed))
        fp_acc = nn.evaluate(model, dataset.test)
        if keep_model:
            snapshot = model.copy()
        if cfg.quantized:
            q_cfg = dataclasses.replace(cfg.qaft, seed=seed) if cfg.uses_qaft else None
            q_acc = quantize_and_tune(model, policy, dataset, q_cfg)
            wq, aq = _quant_snapshot(model)
        else:
            q_acc = fp_acc
        status = "ok"
        score = scalarize(q_acc, size, cfg.score)
    except nn.Diverged:
        log.warning("trial %d diverged", index)
        fp_acc = q_acc = 0.0
        status = "diverged"
        score = scalarize(0.0, size, cfg.score)
    rec = TrialRecord(
        index=index,
        genome=genome,
        policy=policy,
        fp_accuracy=fp_acc,
        quant_accuracy=q_acc,
        size_bits=size,
        score=score,
        duration_seconds=time.perf_counter() - t0,
        status=status,
        mode=cfg.mode,
        weight_quant=wq,
        activation_quant=aq,
    )
    return rec, snapshot


def run_trial(
    cfg: RunConfig,
    state: G.SurrogateState | None,
    rng: np.random.Generator,
    *,
    index: int = 0,
    dataset: D.Dataset | None = None,
    space: S.SearchSpaceSpec | None = None,
) -> TrialRecord:
    dataset = dataset or D.load_dataset(cfg.dataset)
    space = space or resolve_space(cfg, dataset)
    genome, policy = G.propose(state, space, cfg.acquisition, rng, policy_fn_for(cfg.mode))
    return evaluate_candidate(cfg, genome, policy, space, dataset, index)[0]


# --------------------------------------------------------------------------
# the search


@dataclass
class FinalResult:
    index: int
    fp_accuracy: float
    quant_accuracy: float
    size_bits: int
    score: float
    duration_seconds: float
    status: str = "ok"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SearchResult:
    config: RunConfig
    trials: list[TrialRecord]
    front: list[int]
    finals: list[FinalResult]
    search_seconds: float
    final_seconds: float
    space: S.SearchSpaceSpec | None = None

    def summary(self) -> dict:
        n = len(self.trials)
        return {
            "mode": self.config.mode,
            "seed": self.config.seed,
            "trials": n,
            "search_seconds": self.search_seconds,
            "final_seconds": self.final_seconds,
            "trial_seconds_total": sum(t.duration_seconds for t in self.trials),
            "seconds_per_trial": self.search_seconds / n,
            "front": self.front,
        }


def final_train(
    cfg: RunConfig,
    rec: TrialRecord,
    space: S.SearchSpaceSpec,
    dataset: D.Dataset,
    resume_from: nn.Model | None = None,
) -> FinalResult:
    t0 = time.perf_counter()
    layers = S.materialize(rec.genome, space)
    seed = trial_seed(cfg.seed, rec.index, 1)
    if resume_from is not None:
        model = resume_from.copy()
    else:
        model = nn.Model(layers, cfg.dtype).init_params(np.random.default_rng(seed))
    try:
        nn.train(model, dataset.train, dataclasses.replace(cfg.final, seed=seed))
        fp_acc = nn.evaluate(model, dataset.test)
        if cfg.quantized:
            q_cfg = None
            if cfg.uses_qaft:
                q_cfg = dataclasses.replace(
                    cfg.qaft, epochs=cfg.final_qaft_epochs, seed=seed
                )
            q_acc = quantize_and_tune(model, rec.policy, dataset, q_cfg)
        else:
            q_acc = fp_acc
        status = "ok"
    except nn.Diverged:
        fp_acc = q_acc = 0.0
        status = "diverged"
    return FinalResult(
        rec.index,
        fp_acc,
        q_acc,
        rec.size_bits,
        scalarize(q_acc, rec.size_bits, cfg.score),
        time.perf_counter() - t0,
        status,
    )


def run_search(
    cfg: RunConfig,
    dataset: D.Dataset | None = None,
    out_dir: str | Path | None = None,
) -> SearchResult:
    """Run ``max_trials`` sequential trials, extract the front, final-train it.

    When ``out_dir`` is given the trial log is appended line by line and the
    front, final results and summary are written at the end.
    """
    dataset = dataset or D.load_dataset(cfg.dataset)
    space = resolve_space(cfg, dataset)
    rng = np.random.default_rng(cfg.seed)
    policy_fn = policy_fn_for(cfg.mode)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "trials.jsonl").write_text("")

    trials: list[TrialRecord] = []
    snapshots: dict[int, nn.Model] = {}
    state = None
    t0 = time.perf_counter()
    for index in range(cfg.max_trials):
        genome, policy = G.propose(state, space, cfg.acquisition, rng, policy_fn)
        rec, snap = evaluate_candidate(
            cfg, genome, policy, space, dataset, index, keep_model=cfg.resume_final
        )
        trials.append(rec)
        if snap is not None:
            snapshots[index] = snap
        x = S.encode(genome, policy, space)
        if state is None:
            state = G.fit_best(x[None, :], [rec.score])
        else:
            state = G.update(state, x, rec.score)
        log.info(
            "trial %d: acc=%.3f q_acc=%.3f size=%d score=%.4f (%.1fs)",
            index, rec.fp_accuracy, rec.quant_accuracy, rec.size_bits, rec.score,
            rec.duration_seconds,
        )
        if out is not None:
            with open(out / "trials.jsonl", "a") as f:
                f.write(rec.to_json() + "\n")
    search_seconds = time.perf_counter() - t0

    ok = [t for t in trials if t.status == "ok"] or trials
    front = [ok[i].index for i in pareto_front([(t.quant_accuracy, t.size_bits) for t in ok])]

    t1 = time.perf_counter()
    finals = []
    if cfg.final_training:
        for i in front:
            finals.append(final_train(cfg, trials[i], space, dataset, snapshots.get(i)))
    final_seconds = time.perf_counter() - t1

    result = SearchResult(cfg, trials, front, finals, search_seconds, final_seconds, space)
    if out is not None:
        write_outputs(result, out)
    return result


def write_outputs(result: SearchResult, out: Path) -> None:
    by_index = {t.index: t for t in result.trials}
    with open(out / "pareto.csv", "w") as f:
        f.write("index,accuracy,size_bits,size_kB,score\n")
        for i in result.front:
            t = by_index[i]
            f.write(f"{i},{t.quant_accuracy!r},{t.size_bits},{t.size_kb!r},{t.score!r}\n")
    with open(out / "final.jsonl", "w") as f:
        for r in result.finals:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    summary = result.summary()
    summary["score"] = dataclasses.asdict(result.config.score)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
