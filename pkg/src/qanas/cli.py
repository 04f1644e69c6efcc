"""Command line: ``qanas {search,report,ablate,validate-space}``.

Every verb takes ``--config``, ``--seed`` and ``--out``. ``QANAS_OUT`` in the
environment overrides the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import data as D
from . import quant as Q
from . import report as R
from . import search
from . import space as S

ABLATION_MODES = ("qaft_mp", "ptq_mp", "ptq_fixed8", "qaft_fixed4", "float_only")


def _out_dir(args, default: str) -> Path:
    return Path(os.environ.get("QANAS_OUT") or args.out or default)


def _run_config(args) -> search.RunConfig:
    cfg = search.load_run_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "mode", None):
        cfg = cfg.replace(mode=args.mode)
    if getattr(args, "max_trials", None):
        cfg = cfg.replace(max_trials=args.max_trials)
    if getattr(args, "no_final", False):
        cfg = cfg.replace(final_training=False)
    return cfg


def cmd_validate_space(args) -> int:
    t0 = time.perf_counter()
    sp = S.load_space(args.config or "table1")
    archs, policies = S.cardinality(sp)
    seed = S.seed_genome(sp)
    layers = S.materialize(seed, sp)
    n_q = S.quantizable_layers(seed, sp)
    info = {
        "architectures": archs,
        "seed_policies": policies,
        "seed_quantizable_layers": n_q,
        "product": archs * policies,
        "total_mixed_precision_networks": S.total_mixed_precision_networks(sp),
        "seed_pre_pool_size": list(S.final_spatial_size(layers)),
        "seed_size_bits_8bit": Q.model_size_bits(layers, S.seed_policy(sp, seed)).total_bits,
        "encoding_length": S.encoding_length(sp),
        "seconds": time.perf_counter() - t0,
    }
    print(f"architectures:            {archs} ({archs:.6e})")
    print(f"seed quantizable layers:  {n_q}")
    print(f"seed policies:            {policies} ({policies:.6e})")
    print(f"architectures x policies: {archs * policies:.6e}")
    print(f"repetition-aware total:   {info['total_mixed_precision_networks']:.6e}")
    if args.out or os.environ.get("QANAS_OUT"):
        out = _out_dir(args, ".")
        out.mkdir(parents=True, exist_ok=True)
        (out / "space.json").write_text(json.dumps(info, indent=2) + "\n")
    return 0


def cmd_search(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args, cfg.out_dir)
    res = search.run_search(cfg, out_dir=out)
    print(f"{len(res.trials)} trials, front {res.front}, wrote {out}")
    if not args.no_report:
        write_report(out, res.config.score)
    return 0


def write_report(out: Path, score: search.ScoreConfig | None = None) -> None:
    trials = search.read_log(out / "trials.jsonl")
    summary_path = out / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else None
    if score is None:
        score = search.ScoreConfig(**summary["score"]) if summary else search.ScoreConfig()
    R.emit_scatter(trials, score, out / "scatter.svg")
    front = [trials[i] for i in search.pareto_front([(t.quant_accuracy, t.size_bits) for t in trials])]
    try:
        R.emit_bitwidth_chart(front, out / "bitwidths.svg")
    except ValueError as e:
        print(f"bitwidth chart skipped: {e}")
    if summary:
        R.emit_cost_table([summary], out / "cost.csv")


def cmd_report(args) -> int:
    out = _out_dir(args, "runs/default")
    if not (out / "trials.jsonl").exists():
        print(f"no trial log in {out}", file=sys.stderr)
        return 1
    score = None
    if args.config:
        score = search.load_run_config(args.config).score
    write_report(out, score)
    print(f"report written to {out}")
    return 0


def cmd_ablate(args) -> int:
    base = _run_config(args)
    out = _out_dir(args, base.out_dir)
    dataset = D.load_dataset(base.dataset)
    modes = args.modes.split(",") if args.modes else ABLATION_MODES
    summaries = []
    for mode in modes:
        cfg = base.replace(mode=mode)
        res = search.run_search(cfg, dataset, out_dir=out / mode)
        write_report(out / mode, cfg.score)
        summaries.append(res.summary())
        print(f"{mode}: {res.search_seconds:.1f}s search, front {res.front}")
    R.emit_cost_table(summaries, out / "cost.csv")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qanas", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", help=config_help)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")

    sp = sub.add_parser("search", help="run one search")
    common(sp, "run config (INI path or bundled name)")
    sp.add_argument("--mode", choices=search.MODES)
    sp.add_argument("--max-trials", type=int)
    sp.add_argument("--no-final", action="store_true", help="skip final training")
    sp.add_argument("--no-report", action="store_true")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("report", help="regenerate figures and tables from a run directory")
    common(sp, "run config whose [score] section sets the equal-score lines")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("ablate", help="run the same search in every quantization mode")
    common(sp, "run config (INI path or bundled name)")
    sp.add_argument("--modes", help="comma-separated subset of modes")
    sp.add_argument("--max-trials", type=int)
    sp.add_argument("--no-final", action="store_true")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("validate-space", help="check a space config and count it")
    common(sp, "space config (INI path or bundled name, default table1)")
    sp.set_defaults(func=cmd_validate_space)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
