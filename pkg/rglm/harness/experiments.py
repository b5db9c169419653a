"""Experiment suites: ablation, lambda sweep, attention report, cross-dataset evaluation.

Runs fan out over a thread pool; each run writes its own directory.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from rglm import settings
from rglm.config import TrainConfig, with_overrides
from rglm.errors import ConfigurationError
from rglm.graph.gnn import pretrain, save_encoder
from rglm.graph.tag import Tag
from rglm.harness.evaluation import evaluate
from rglm.harness.instructions import build_instructions, label_words, missing_label_tokens, split_stream
from rglm.harness.trainer import LoadedRun, load_dataset_tag, train
from rglm.lm.model import attention_probe, encode_prefix

logger = logging.getLogger(__name__)

RESULT_FIELDS = ["setting", "variant", "seed", "lambda_f", "lambda_s", "lambda_l",
                 "test_acc", "test_f1", "best_val_acc", "mi_init", "mi_final", "seconds_per_epoch"]


def run_and_score(cfg: TrainConfig, run_dir: str | Path | None = None, setting: str = "") -> dict[str, Any]:
    """Train one configuration and score it on the test split."""
    result = train(cfg, run_dir=run_dir)
    test = evaluate(result.model, result.data.splits["test"], result.data.vocab, result.data.label_words,
                    cfg.batch_size)
    return {
        "setting": setting or cfg.variant,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "lambda_f": cfg.effective_lambda_f,
        "lambda_s": cfg.effective_lambda_s,
        "lambda_l": cfg.lambda_l,
        "test_acc": test["accuracy"],
        "test_f1": test["macro_f1"],
        "best_val_acc": result.summary["best_val_acc"],
        "mi_init": result.summary["mi_init"],
        "mi_final": result.summary["mi_final"],
        "seconds_per_epoch": result.summary["seconds_per_epoch"],
    }


def run_many(jobs: Sequence[tuple[str, TrainConfig, Path | None]], max_workers: int = 1) -> list[dict[str, Any]]:
    """Run ``(setting, cfg, run_dir)`` jobs; result order follows ``jobs``."""
    if max_workers <= 1:
        return [run_and_score(cfg, run_dir, setting) for setting, cfg, run_dir in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(run_and_score, cfg, run_dir, setting) for setting, cfg, run_dir in jobs]
        return [f.result() for f in futures]


def ensure_pregnn(cfg: TrainConfig, out_dir: Path) -> TrainConfig:
    """Pretrain (once) and point ``cfg.pregnn`` at the encoder when a latent variant needs it."""
    if cfg.variant not in settings.LATENT_VARIANTS or cfg.pregnn:
        return cfg
    path = out_dir / "pregnn.json"
    if not path.exists():
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = load_dataset_tag(cfg)
        save_encoder(pretrain(tag, cfg.gnn), path)
    return with_overrides(cfg, pregnn=str(path))


def ablation_settings(variant: str) -> list[tuple[str, dict[str, Any]]]:
    rows = [("vanilla", {"variant": "vanilla"}), ("full", {"variant": variant})]
    if variant == "decoder":
        rows += [("no_feat", {"variant": variant, "no_feat": True}),
                 ("no_topo", {"variant": variant, "no_topo": True})]
    elif variant in settings.LATENT_VARIANTS:
        rows += [("no_pregnn", {"variant": variant, "no_pregnn": True})]
    else:
        raise ConfigurationError(f"ablate: variant {variant!r} has no ablations")
    return rows


def ablate(cfg: TrainConfig, seeds: Sequence[int] | None = None, out_dir: str | Path | None = None) -> list[dict]:
    """Variant-versus-ablation matrix, one row per (setting, seed).

    Args:
        cfg: Base configuration; its variant selects the ablations.
        seeds: Seeds per setting; ``settings.EXPERIMENT_SEEDS`` seeds from 0
            when omitted.
        out_dir: Parent of the per-run directories (``cfg.out_dir`` by
            default).

    Returns:
        Scored rows in job order.
    """
    seeds = list(seeds) if seeds is not None else list(range(settings.EXPERIMENT_SEEDS))
    out = Path(out_dir or cfg.out_dir)
    base = ensure_pregnn(cfg, out)
    jobs = []
    for name, changes in ablation_settings(cfg.variant):
        for seed in seeds:
            run_cfg = with_overrides(base, seed=seed, **changes)
            jobs.append((name, run_cfg, out / f"ablate_{name}_seed{seed}"))
    rows = run_many(jobs, cfg.max_workers)
    logger.info("Experiments: ablation finished with %d rows", len(rows))
    return rows


def default_grid(variant: str) -> dict[str, list[float]]:
    if variant == "decoder":
        return {"lambda_f": list(settings.LAMBDA_F_GRID), "lambda_s": list(settings.LAMBDA_S_GRID)}
    if variant in settings.LATENT_VARIANTS:
        return {"lambda_l": list(settings.LAMBDA_L_GRID)}
    raise ConfigurationError(f"sweep: variant {variant!r} has no loss weights to sweep")


def sweep(cfg: TrainConfig, grid: dict[str, Sequence[Any]] | None = None, seeds: Sequence[int] | None = None,
          out_dir: str | Path | None = None) -> list[dict]:
    """One run per grid point per seed; grid keys are configuration keys."""
    grid = grid if grid is not None else default_grid(cfg.variant)
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigurationError("sweep: grid must be nonempty")
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    out = Path(out_dir or cfg.out_dir)
    base = ensure_pregnn(cfg, out)
    keys = list(grid)
    jobs = []
    for point in itertools.product(*(grid[k] for k in keys)):
        changes = dict(zip(keys, point))
        tag = "_".join(f"{k}{v}" for k, v in changes.items())
        for seed in seeds:
            jobs.append((tag, with_overrides(base, seed=seed, **changes), out / f"sweep_{tag}_seed{seed}"))
    rows = run_many(jobs, cfg.max_workers)
    for row, (_, run_cfg, _) in zip(rows, jobs):
        for key in keys:
            row[key] = _dotted(run_cfg, key)
    return rows


def _dotted(cfg: Any, key: str) -> Any:
    for part in key.split("."):
        cfg = getattr(cfg, part)
    return cfg


def summarize(rows: Sequence[dict], metric: str = "test_acc") -> list[dict]:
    """Mean and population std of ``metric`` per setting, in first-seen order."""
    groups: dict[str, list[float]] = {}
    for row in rows:
        groups.setdefault(row["setting"], []).append(float(row[metric]))
    return [
        {"setting": name, "runs": len(values), f"{metric}_mean": float(np.mean(values)),
         f"{metric}_std": float(np.std(values))}
        for name, values in groups.items()
    ]


def write_table(rows: Sequence[dict], path: str | Path, fields: Sequence[str] | None = None) -> None:
    fields = list(fields) if fields is not None else _fields(rows)
    with Path(path).open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in fields})


def read_table(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as handle:
        return list(csv.DictReader(handle))


def _fields(rows: Sequence[dict]) -> list[str]:
    fields = [f for f in RESULT_FIELDS if any(f in r for r in rows)]
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    return fields


def _cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ----------------------------------------------------------------------
# Attention and transfer
# ----------------------------------------------------------------------
ATTENTION_FIELDS = ["example", "mass_a", "log_mass_a", "mass_b", "log_mass_b"]


def attention_report(run_a: LoadedRun, run_b: LoadedRun, tag: Tag, batch_size: int = 32) -> tuple[list[dict], dict]:
    """Last-token attention mass on real graph tokens for two checkpoints on the test split."""
    if run_a.vocab.to_list() != run_b.vocab.to_list():
        raise ConfigurationError("attention_report: runs use different vocabularies")
    cfg = run_a.cfg
    examples = build_instructions(tag, cfg.task, "test", run_a.vocab, cfg.ndt, split_stream(cfg.seed, "test"),
                                  cfg.link_pairs)
    columns = {}
    for name, run in (("a", run_a), ("b", run_b)):
        masses = []
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            prefix = encode_prefix([ex.seq for ex in batch], run.model)
            prompts = np.array([ex.instruction.prompt_tokens for ex in batch], dtype=np.int64)
            mask = np.stack([ex.seq.placeholder_mask for ex in batch])
            masses.extend(p.total for p in attention_probe(run.model, prefix, prompts, mask))
        columns[name] = masses
    rows = []
    for i, ex in enumerate(examples):
        row = {"example": i}
        for name in ("a", "b"):
            mass = columns[name][i]
            row[f"mass_{name}"] = mass
            row[f"log_mass_{name}"] = math.log(mass) if mass > 0 else -math.inf
        rows.append(row)
    summary = {
        "examples": len(rows),
        "mean_mass_a": float(np.mean(columns["a"])) if rows else math.nan,
        "mean_mass_b": float(np.mean(columns["b"])) if rows else math.nan,
    }
    return rows, summary


def cross_dataset_eval(run: LoadedRun, target: Tag) -> dict[str, float]:
    """Evaluate a trained run on another dataset's test split without training on it."""
    words = label_words(target, run.cfg.task)
    missing = missing_label_tokens(run.vocab, words)
    if missing:
        raise ConfigurationError(f"cross_dataset_eval: labels {missing} are not in the trained vocabulary")
    cfg = run.cfg
    examples = build_instructions(target, cfg.task, "test", run.vocab, cfg.ndt, split_stream(cfg.seed, "test"),
                                  cfg.link_pairs)
    return evaluate(run.model, examples, run.vocab, words, cfg.batch_size)


def directional_checks(rows: Sequence[dict], variant: str) -> list[str]:
    """Failed seed-mean comparisons of an ablation table (empty when all hold)."""
    means = {s["setting"]: s["test_acc_mean"] for s in summarize(rows)}
    failures = []
    if "full" in means and "vanilla" in means and means["full"] < means["vanilla"]:
        failures.append(f"full {variant} below vanilla: {means['full']:.4f} < {means['vanilla']:.4f}")
    for ablated in ("no_feat", "no_topo"):
        if ablated in means and means["full"] < means[ablated]:
            failures.append(f"full {variant} below {ablated}: {means['full']:.4f} < {means[ablated]:.4f}")
    if "no_pregnn" in means and means["no_pregnn"] > means["full"]:
        failures.append(f"no_pregnn above full {variant}: {means['no_pregnn']:.4f} > {means['full']:.4f}")
    return failures
