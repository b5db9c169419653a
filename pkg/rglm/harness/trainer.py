"""Joint text + graph-reconstruction training loop, checkpoints and run directories."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import psutil

from rglm import settings
from rglm.config import TrainConfig, load_config, save_config
from rglm.core import autodiff as ad
from rglm.core.autodiff import Tensor
from rglm.core.optim import Adam, LinearWarmup
from rglm.errors import EstimationError, NumericError, ParseError
from rglm.graph.gnn import GnnEncoder, TargetCache, encode_targets, load_encoder
from rglm.graph.tag import Tag, generate_synthetic_tag, load_tag
from rglm.harness.evaluation import evaluate
from rglm.harness.instructions import Example, build_instructions, label_words, split_stream
from rglm.info.oracle import binned_mi_estimate
from rglm.lm.heads import NoiseSchedule, ReconHeads, combined_loss, graph_loss, report_lower_bound
from rglm.lm.model import LmModel, aggregate_H, encode_prefix, forward, text_loss
from rglm.lm.vocab import Vocabulary

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
SUMMARY_FILE = "summary.json"
MODEL_FILE = "model.json"
HEADS_FILE = "heads.json"
CONFIG_FILE = "train_settings.txt"
MI_BINS = 4


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    loss_text: float
    loss_graph: float
    loss_total: float
    bound_report: float
    val_acc: float
    val_f1: float
    wall_time_s: float
    peak_memory_note: str = ""

    def row(self) -> list:
        return [getattr(self, name) for name in settings.METRICS_HEADER]


class MetricsWriter:
    """Per-run CSV streams: seed-deterministic metrics and wall-clock timing kept apart.

    Two runs with the same configuration write byte-identical ``metrics.csv``
    files; only ``timing.csv`` differs.
    """

    def __init__(self, run_dir: str | Path):
        run_dir = Path(run_dir)
        self.streams = [
            (run_dir / METRICS_FILE, settings.METRICS_HEADER),
            (run_dir / TIMING_FILE, settings.TIMING_HEADER),
        ]
        for path, header in self.streams:
            with path.open("w", newline="") as handle:
                csv.writer(handle).writerow(header)

    def write(self, record: MetricsRecord) -> None:
        for path, header in self.streams:
            with path.open("a", newline="") as handle:
                csv.writer(handle).writerow([_fmt(getattr(record, name)) for name in header])


def _fmt(value) -> str:
    return repr(float(value)) if isinstance(value, float) else str(value)


@dataclass
class Dataset:
    tag: Tag
    vocab: Vocabulary
    task: str
    splits: dict[str, list[Example]] = field(default_factory=dict)

    @property
    def label_words(self) -> tuple[str, ...]:
        return label_words(self.tag, self.task)


def load_dataset_tag(cfg: TrainConfig) -> Tag:
    return load_tag(cfg.dataset) if cfg.dataset else generate_synthetic_tag(cfg.data)


def prepare_data(cfg: TrainConfig, tag: Tag | None = None, vocab: Vocabulary | None = None,
                 splits: Sequence[str] = settings.SPLITS) -> Dataset:
    tag = tag if tag is not None else load_dataset_tag(cfg)
    vocab = vocab if vocab is not None else Vocabulary.build(tag.meta.class_names)
    data = Dataset(tag, vocab, cfg.task)
    for split in splits:
        data.splits[split] = build_instructions(
            tag, cfg.task, split, vocab, cfg.ndt, split_stream(cfg.seed, split), cfg.link_pairs
        )
    logger.info("Trainer: dataset %s with %s examples", tag.meta.name,
                ", ".join(f"{s}={len(v)}" for s, v in data.splits.items()))
    return data


def attach_latents(cfg: TrainConfig, data: Dataset, encoder: GnnEncoder | None,
                   cache: TargetCache | None = None) -> None:
    """Fill ``target.latent``; raw features stand in when no encoder is used."""
    cache = cache if cache is not None else TargetCache()
    for examples in data.splits.values():
        for ex in examples:
            if encoder is None:
                ex.target.latent = ex.target.features
                continue
            key = TargetCache.key(data.tag.meta.name, ex.center, cfg.ndt.hops, cfg.seed)
            E = cache.get(key, lambda ex=ex: encode_targets(encoder, ex.context))
            rows = [ex.context.local_index[int(v)] for v in ex.target.node_ids]
            ex.target.latent = E[rows]


def model_config(cfg: TrainConfig, data: Dataset):
    return dataclasses.replace(cfg.lm, vocab_size=len(data.vocab), d_z=data.tag.meta.d_z)


def build_heads(cfg: TrainConfig, d_model: int, d_z: int, d_e: int, rng: np.random.Generator) -> ReconHeads:
    return ReconHeads(
        cfg.variant, d_model, d_z, d_e, rng,
        lambda_f=cfg.effective_lambda_f, lambda_s=cfg.effective_lambda_s, lambda_l=cfg.lambda_l,
        sim_per_node=cfg.sim_per_node, schedule=NoiseSchedule.linear(cfg.diffusion_steps),
        denoiser_blocks=cfg.denoiser_blocks,
    )


@dataclass
class StepLoss:
    text: Tensor
    graph: Tensor
    total: Tensor
    parts: dict[str, float]


def step_loss(model: LmModel, heads: ReconHeads, batch: Sequence[Example], variant: str,
              rng: np.random.Generator) -> StepLoss:
    """Text loss over the batch plus the mean per-example reconstruction loss."""
    prefix = encode_prefix([ex.seq for ex in batch], model)
    text = np.array([ex.instruction.text_tokens for ex in batch], dtype=np.int64)
    mask = np.stack([ex.seq.placeholder_mask for ex in batch])
    out = forward(model, prefix, text, mask)
    l_text = text_loss(out.logits, [ex.instruction for ex in batch])
    if variant == "vanilla":
        l_graph, parts = Tensor(0.0), {}
    else:
        s_graph = out.s_graph
        l_graph, parts = Tensor(0.0), {}
        for b, ex in enumerate(batch):
            H = aggregate_H(s_graph[b], ex.seq)
            g = graph_loss(variant, heads, H, ex.target, rng)
            l_graph = l_graph + g.total
            for name, value in g.components.items():
                parts[name] = parts.get(name, 0.0) + value / len(batch)
        l_graph = l_graph * (1.0 / len(batch))
    return StepLoss(l_text, l_graph, combined_loss(l_text, l_graph), parts)


def summary_embeddings(model: LmModel, examples: Sequence[Example], batch_size: int = 32):
    """Per-example (mean subgraph feature, mean H row) pairs."""
    graph_side, token_side = [], []
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        prefix = encode_prefix([ex.seq for ex in batch], model)
        text = np.array([ex.instruction.prompt_tokens for ex in batch], dtype=np.int64)
        out = forward(model, prefix, text, np.stack([ex.seq.placeholder_mask for ex in batch]))
        for b, ex in enumerate(batch):
            graph_side.append(ex.target.features.mean(axis=0))
            token_side.append(aggregate_H(out.s_graph[b], ex.seq).data.mean(axis=0))
    return np.array(graph_side), np.array(token_side)


def mi_estimate(model: LmModel, examples: Sequence[Example]) -> float | None:
    if not examples:
        return None
    a, b = summary_embeddings(model, examples)
    try:
        return binned_mi_estimate(a, b, bins=MI_BINS, min_samples=4 * MI_BINS * MI_BINS)
    except EstimationError as exc:
        logger.info("Trainer: MI estimate skipped (%s)", exc)
        return None


def _bound(cfg: TrainConfig, heads: ReconHeads, parts: dict[str, float]) -> float:
    if cfg.variant == "decoder":
        arg = (parts.get("feat", 0.0), parts.get("topo", 0.0))
    elif cfg.variant == "similarizer":
        arg = parts.get("sim", 0.0)
    elif cfg.variant == "denoiser":
        arg = parts.get("diff", 0.0)
    else:
        arg = 0.0
    return report_lower_bound(cfg.variant, arg, lambda_f=cfg.effective_lambda_f, lambda_s=cfg.effective_lambda_s,
                              lambda_l=cfg.lambda_l).value


def _memory_note() -> str:
    return f"rss={psutil.Process().memory_info().rss / 1024 / 1024:.1f}MB"


@dataclass
class RunResult:
    cfg: TrainConfig
    model: LmModel
    heads: ReconHeads
    data: Dataset
    records: list[MetricsRecord]
    best_epoch: int
    summary: dict
    run_dir: Path | None = None


def train(cfg: TrainConfig, data: Dataset | None = None, run_dir: str | Path | None = None,
          encoder: GnnEncoder | None = None) -> RunResult:
    """Minimize text loss plus the configured reconstruction loss.

    Keeps the best-validation weights; writes metrics, timing, summary,
    config and checkpoints to ``run_dir`` when given.

    Args:
        cfg: Validated training configuration; ``cfg.variant`` picks the
            reconstruction objective.
        data: Prepared instructions; built from ``cfg`` when omitted.
        run_dir: Output directory for the run files, or None to keep
            everything in memory.
        encoder: Frozen pre-trained GNN for latent variants; loaded from
            ``cfg.pregnn`` when omitted.

    Returns:
        The trained model and heads (best-validation weights restored), the
        per-epoch records and the run summary.

    Raises:
        ConfigurationError: A latent variant has neither an encoder nor
            ``no_pregnn``.
        NumericError: A loss became non-finite; the message carries the
            last finite losses.
    """
    cfg.validate()
    data = data if data is not None else prepare_data(cfg)
    if cfg.variant in settings.LATENT_VARIANTS:
        if encoder is None and not cfg.no_pregnn:
            encoder = load_encoder(cfg.pregnn)
        attach_latents(cfg, data, None if cfg.no_pregnn else encoder)
    d_e = encoder.cfg.d_e if encoder is not None and not cfg.no_pregnn else data.tag.meta.d_z

    init_rng, heads_rng, order_rng, loss_rng = ad.split_rng(np.random.default_rng(cfg.seed), 4)
    model = LmModel(model_config(cfg, data), init_rng)
    heads = build_heads(cfg, model.cfg.d_model, data.tag.meta.d_z, d_e, heads_rng)

    train_set = data.splits["train"] * cfg.replicate_for(data.tag.node_count)
    val_set = data.splits.get("val", [])
    steps_per_epoch = max(1, math.ceil(len(train_set) / cfg.batch_size))
    optimizer = Adam(model.parameters(trainable_only=True) + heads.parameters(), lr=cfg.lr,
                     schedule=LinearWarmup(cfg.epochs * steps_per_epoch, cfg.warmup_ratio))
    mi_init = mi_estimate(model, data.splits["train"])

    writer = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, run_dir / CONFIG_FILE)
        writer = MetricsWriter(run_dir)

    records: list[MetricsRecord] = []
    best = (-math.inf, -1)
    best_state = None
    step = 0
    last_finite = (math.nan, math.nan)
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(train_set))
        sums = {"text": 0.0, "graph": 0.0}
        parts_sum: dict[str, float] = {}
        for k in range(steps_per_epoch):
            batch = [train_set[i] for i in order[k * cfg.batch_size:(k + 1) * cfg.batch_size]]
            if not batch:
                continue
            try:
                loss = step_loss(model, heads, batch, cfg.variant, loss_rng)
                optimizer.zero_grad()
                ad.backward(loss.total, optimizer.params)
                optimizer.step()
            except NumericError as exc:
                raise NumericError(
                    f"Trainer: divergence at epoch {epoch} step {step}; last finite losses "
                    f"text={last_finite[0]:.6g} graph={last_finite[1]:.6g} ({exc})"
                ) from exc
            step += 1
            last_finite = (loss.text.item(), loss.graph.item())
            sums["text"] += last_finite[0]
            sums["graph"] += last_finite[1]
            for name, value in loss.parts.items():
                parts_sum[name] = parts_sum.get(name, 0.0) + value
        loss_text = sums["text"] / steps_per_epoch
        loss_graph = sums["graph"] / steps_per_epoch
        parts = {name: value / steps_per_epoch for name, value in parts_sum.items()}
        if val_set:
            val = evaluate(model, val_set, data.vocab, data.label_words, cfg.batch_size)
        else:
            val = {"accuracy": math.nan, "macro_f1": math.nan}
        record = MetricsRecord(
            epoch=epoch, step=step, loss_text=loss_text, loss_graph=loss_graph,
            loss_total=loss_text + loss_graph, bound_report=_bound(cfg, heads, parts),
            val_acc=val["accuracy"], val_f1=val["macro_f1"],
            wall_time_s=time.perf_counter() - start, peak_memory_note=_memory_note(),
        )
        records.append(record)
        if writer is not None:
            writer.write(record)
        score = val["accuracy"] if not math.isnan(val["accuracy"]) else float(epoch)
        if score > best[0]:
            best = (score, epoch)
            best_state = (model.state_dict(), heads.state_dict())
        logger.info("Trainer: epoch %d text=%.4f graph=%.4f val_acc=%.4f", epoch, loss_text, loss_graph,
                    val["accuracy"])

    model.load_state_dict(best_state[0])
    heads.load_state_dict(best_state[1])
    summary = {
        "variant": cfg.variant,
        "seed": cfg.seed,
        "best_epoch": best[1],
        "best_val_acc": records[best[1]].val_acc,
        "best_val_f1": records[best[1]].val_f1,
        "mi_init": mi_init,
        "mi_final": mi_estimate(model, data.splits["train"]),
        "epochs": cfg.epochs,
        "steps": step,
        "wall_time_s": records[-1].wall_time_s,
        "seconds_per_epoch": records[-1].wall_time_s / cfg.epochs,
        "peak_memory_note": records[-1].peak_memory_note,
    }
    result = RunResult(cfg, model, heads, data, records, best[1], summary, run_dir)
    if run_dir is not None:
        save_run(result)
    return result


# ----------------------------------------------------------------------
# Run directories
# ----------------------------------------------------------------------
def save_run(result: RunResult) -> None:
    run_dir = Path(result.run_dir)
    lm = result.model.cfg
    ad.save_parameters(result.model, run_dir / MODEL_FILE, {
        "vocab": result.data.vocab.to_list(), "vocab_size": lm.vocab_size, "d_z": lm.d_z,
    })
    ad.save_parameters(result.heads, run_dir / HEADS_FILE, {"variant": result.cfg.variant})
    (run_dir / SUMMARY_FILE).write_text(json.dumps(result.summary, indent=2, default=_json_default))
    logger.info("Trainer: run saved to %s", run_dir)


def _json_default(value):
    if isinstance(value, float) and math.isnan(value):
        return None
    return str(value)


@dataclass
class LoadedRun:
    cfg: TrainConfig
    model: LmModel
    heads: ReconHeads
    vocab: Vocabulary
    summary: dict


def load_run(run_dir: str | Path) -> LoadedRun:
    """Rebuild model, heads and vocabulary from a run directory."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / CONFIG_FILE)
    state, meta = ad.read_parameters(run_dir / MODEL_FILE)
    try:
        vocab = Vocabulary(meta["vocab"])
        lm_cfg = dataclasses.replace(cfg.lm, vocab_size=int(meta["vocab_size"]), d_z=int(meta["d_z"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"run {run_dir} has a malformed model checkpoint: {exc}", record="meta") from exc
    model = LmModel(lm_cfg, np.random.default_rng(0))
    model.load_state_dict(state)
    heads_state, _ = ad.read_parameters(run_dir / HEADS_FILE)
    d_e = _infer_d_e(cfg, heads_state, lm_cfg.d_z)
    heads = build_heads(cfg, lm_cfg.d_model, lm_cfg.d_z, d_e, np.random.default_rng(0))
    heads.load_state_dict(heads_state)
    summary_path = run_dir / SUMMARY_FILE
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    return LoadedRun(cfg, model, heads, vocab, summary)


def _infer_d_e(cfg: TrainConfig, heads_state: dict[str, np.ndarray], d_z: int) -> int:
    if "similarizer.s.fc2.weight" in heads_state:
        return heads_state["similarizer.s.fc2.weight"].shape[1]
    if "denoiser.out_proj.weight" in heads_state:
        return heads_state["denoiser.out_proj.weight"].shape[1]
    return d_z
