"""Command-line entry point.

Every subcommand reads the shared ``key=value`` config (``--config``,
default ``train_settings.txt`` when present) and accepts ``--key=value``
overrides. Exit codes: 0 ok, 2 configuration error, 3 numeric failure,
4 acceptance-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from rglm import settings
from rglm.config import CONFIG_PATH, TrainConfig, load_config, with_overrides
from rglm.errors import AcceptanceError, ConfigurationError, RglmError
from rglm.graph.gnn import classify, pretrain, save_encoder
from rglm.graph.tag import generate_synthetic_tag, load_tag, save_tag
from rglm.harness import experiments, timing
from rglm.harness.evaluation import evaluate
from rglm.harness.gradcheck import TOLERANCE, gradient_suite
from rglm.harness.instructions import build_instructions, label_words, split_stream
from rglm.harness.trainer import load_dataset_tag, load_run, train
from rglm.info.oracle import run_oracle_suite

logger = logging.getLogger("rglm")


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, default=str) + "\n")


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise AcceptanceError(message)


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------
def cmd_gen_data(args, cfg: TrainConfig) -> None:
    tag = generate_synthetic_tag(cfg.data)
    save_tag(tag, args.out)
    _emit({"dataset": args.out, "nodes": tag.node_count, "edges": int(len(tag.edges))})


def cmd_pretrain_gnn(args, cfg: TrainConfig) -> None:
    tag = load_dataset_tag(cfg)
    encoder = pretrain(tag, cfg.gnn)
    save_encoder(encoder, args.out)
    pred = classify(encoder, tag)
    report = {}
    for split in settings.SPLITS:
        nodes = tag.split_nodes(split)
        if len(nodes):
            report[f"{split}_acc"] = float(np.mean(pred[nodes] == tag.labels[nodes]))
    _emit({"encoder": args.out, **report})


def cmd_train(args, cfg: TrainConfig) -> None:
    run_dir = Path(args.run_dir or Path(cfg.out_dir) / f"{cfg.variant}_seed{cfg.seed}")
    result = train(cfg, run_dir=run_dir)
    _emit({"run_dir": str(run_dir), **result.summary})


def cmd_eval(args, cfg: TrainConfig) -> None:
    run = load_run(args.run_dir)
    tag = load_dataset_tag(run.cfg)
    examples = build_instructions(tag, run.cfg.task, args.split, run.vocab, run.cfg.ndt,
                                  split_stream(run.cfg.seed, args.split), run.cfg.link_pairs)
    _emit({"split": args.split, **evaluate(run.model, examples, run.vocab, label_words(tag, run.cfg.task))})


def cmd_ablate(args, cfg: TrainConfig) -> None:
    rows = experiments.ablate(cfg, seeds=range(args.seeds))
    experiments.write_table(rows, args.out)
    summary = experiments.summarize(rows)
    experiments.write_table(summary, Path(args.out).with_suffix(".summary.csv"))
    _emit({"table": args.out, "summary": summary})
    if args.check:
        failures = experiments.directional_checks(rows, cfg.variant)
        _check(not failures, "; ".join(failures))


def cmd_sweep(args, cfg: TrainConfig) -> None:
    rows = experiments.sweep(cfg, seeds=range(cfg.seed, cfg.seed + args.seeds))
    experiments.write_table(rows, args.out)
    _emit({"table": args.out, "rows": len(rows)})


def cmd_mi_verify(args, cfg: TrainConfig) -> None:
    report = run_oracle_suite(np.random.default_rng(cfg.seed), args.decompositions, args.pipelines, args.chains)
    _emit(report.to_dict())
    _check(not report.failures, f"{len(report.failures)} oracle checks failed")


def cmd_grad_check(args, cfg: TrainConfig) -> None:
    errors = gradient_suite(cfg.seed, d_model=args.d_model, max_entries=args.max_entries)
    _emit({"tolerance": TOLERANCE, "errors": errors})
    worst = max(errors.values())
    _check(worst <= TOLERANCE, f"gradient check relative error {worst:.2e} exceeds {TOLERANCE}")


def cmd_attention_report(args, cfg: TrainConfig) -> None:
    run_a, run_b = load_run(args.run_a), load_run(args.run_b)
    rows, summary = experiments.attention_report(run_a, run_b, load_dataset_tag(run_a.cfg))
    experiments.write_table(rows, args.out, experiments.ATTENTION_FIELDS)
    _emit({"table": args.out, **summary})
    if args.check:
        _check(summary["mean_mass_b"] > summary["mean_mass_a"],
               f"attention mass of run b ({summary['mean_mass_b']:.4f}) is not above run a "
               f"({summary['mean_mass_a']:.4f})")


def cmd_timing_report(args, cfg: TrainConfig) -> None:
    out = Path(cfg.out_dir)
    cfgs = [experiments.ensure_pregnn(with_overrides(cfg, variant=v), out) for v in args.variants.split(",")]
    rows = timing.timing_report(cfgs, repeats=args.repeats)
    experiments.write_table(rows, args.out, timing.TIMING_FIELDS)
    ratios = timing.overhead_ratios(rows)
    _emit({"table": args.out, "overhead": ratios})
    if args.check:
        _check(all(r <= 2.0 for r in ratios.values()), f"per-epoch overhead above 2x vanilla: {ratios}")


def cmd_cross_eval(args, cfg: TrainConfig) -> None:
    run = load_run(args.run_dir)
    target = load_tag(args.target) if args.target else generate_synthetic_tag(cfg.data)
    _emit({"target": target.meta.name, **experiments.cross_dataset_eval(run, target)})


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-gnn": cmd_pretrain_gnn,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "mi-verify": cmd_mi_verify,
    "grad-check": cmd_grad_check,
    "attention-report": cmd_attention_report,
    "timing-report": cmd_timing_report,
    "cross-eval": cmd_cross_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rglm", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--config", default=None, help=f"key=value config file (default {CONFIG_PATH})")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", allow_abbrev=False).add_argument("--out", default="dataset.json")
    sub.add_parser("pretrain-gnn", allow_abbrev=False).add_argument("--out", default="pregnn.json")
    sub.add_parser("train", allow_abbrev=False).add_argument("--run-dir", default=None)
    p = sub.add_parser("eval", allow_abbrev=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--split", default="test", choices=settings.SPLITS)
    p = sub.add_parser("ablate", allow_abbrev=False)
    p.add_argument("--out", default="ablation.csv")
    p.add_argument("--seeds", type=int, default=settings.EXPERIMENT_SEEDS)
    p.add_argument("--check", action="store_true")
    p = sub.add_parser("sweep", allow_abbrev=False)
    p.add_argument("--out", default="sweep.csv")
    p.add_argument("--seeds", type=int, default=1)
    p = sub.add_parser("mi-verify", allow_abbrev=False)
    p.add_argument("--decompositions", type=int, default=1000)
    p.add_argument("--pipelines", type=int, default=200)
    p.add_argument("--chains", type=int, default=200)
    p = sub.add_parser("grad-check", allow_abbrev=False)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--max-entries", type=int, default=12)
    p = sub.add_parser("attention-report", allow_abbrev=False)
    p.add_argument("--run-a", required=True)
    p.add_argument("--run-b", required=True)
    p.add_argument("--out", default="attention.csv")
    p.add_argument("--check", action="store_true")
    p = sub.add_parser("timing-report", allow_abbrev=False)
    p.add_argument("--variants", default="vanilla,decoder,similarizer,denoiser")
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--out", default="timing.csv")
    p.add_argument("--check", action="store_true")
    p = sub.add_parser("cross-eval", allow_abbrev=False)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--target", default=None, help="dataset file; default generates from data.* settings")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        bad = [o for o in overrides if not (o.startswith("--") and "=" in o)]
        if bad:
            raise ConfigurationError(f"unrecognized arguments: {' '.join(bad)}")
        config_path = args.config or (CONFIG_PATH if Path(CONFIG_PATH).exists() else None)
        cfg = load_config(config_path, overrides)
        COMMANDS[args.command](args, cfg)
    except RglmError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return settings.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
