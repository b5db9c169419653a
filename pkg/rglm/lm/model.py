"""Tiny decoder-only transformer that reads projected graph tokens as a prefix."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rglm import settings
from rglm.core import autodiff as ad
from rglm.core.autodiff import Module, Tensor
from rglm.core.layers import MLP, Embedding, LayerNorm, Linear
from rglm.errors import DimensionError, LengthError, ParameterError, UsageError
from rglm.graph.ndt import GraphTokenSequence

logger = logging.getLogger(__name__)


@dataclass
class LoraConfig:
    enabled: bool = False
    rank: int = settings.LORA_DEFAULTS["rank"]
    alpha: float = settings.LORA_DEFAULTS["alpha"]
    targets: tuple[str, ...] = settings.LORA_DEFAULTS["targets"]


@dataclass
class LmConfig:
    vocab_size: int = 32
    d_model: int = settings.LM_DEFAULTS["d_model"]
    n_layers: int = settings.LM_DEFAULTS["n_layers"]
    n_heads: int = settings.LM_DEFAULTS["n_heads"]
    max_len: int = settings.LM_DEFAULTS["max_len"]
    d_z: int = 16
    projector_act: str = "gelu"
    mask_placeholders: bool = False
    state_layer: int = -1
    lora: LoraConfig = field(default_factory=LoraConfig)

    def validate(self) -> None:
        if self.d_model % self.n_heads:
            raise ParameterError(f"LmConfig: d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.lora.enabled and self.lora.rank < 1:
            raise ParameterError("LmConfig: LoRA rank must be >= 1")
        if not -(self.n_layers + 1) <= self.state_layer <= self.n_layers:
            raise ParameterError(f"LmConfig: state_layer {self.state_layer} outside the layer stack")


@dataclass
class Instruction:
    """Prompt and label token ids for one example with ``graph_length`` prefix slots."""

    prompt_tokens: list[int]
    label_tokens: list[int]
    graph_length: int

    @property
    def text_tokens(self) -> list[int]:
        return [*self.prompt_tokens, *self.label_tokens]

    @property
    def supervised(self) -> list[int]:
        """0-based full-sequence positions of the label tokens."""
        start = self.graph_length + len(self.prompt_tokens)
        return list(range(start, start + len(self.label_tokens)))


@dataclass
class ForwardOutput:
    logits: Tensor
    hidden: Tensor
    graph_length: int
    attentions: list[np.ndarray]

    @property
    def s_graph(self) -> Tensor:
        return self.hidden[:, : self.graph_length]

    @property
    def s_text(self) -> Tensor:
        return self.hidden[:, self.graph_length:]


class CausalSelfAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        b, t, d = x.shape
        dh = d // self.n_heads

        def heads(y: Tensor) -> Tensor:
            return ad.transpose(y.reshape(b, t, self.n_heads, dh), (0, 2, 1, 3))

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(dh))
        probs = ad.softmax(scores, axis=-1, mask=mask)
        out = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3)).reshape(b, t, d)
        return self.o(out), probs.data


class TransformerBlock(Module):
    """Pre-norm attention + feedforward block."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, eps: float = settings.LAYER_NORM_EPS):
        self.ln1 = LayerNorm(d_model, eps)
        self.attn = CausalSelfAttention(d_model, n_heads, rng)
        self.ln2 = LayerNorm(d_model, eps)
        self.mlp = MLP(d_model, 4 * d_model, d_model, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        attended, probs = self.attn(self.ln1(x), mask)
        x = x + attended
        return x + self.mlp(self.ln2(x)), probs


def attention_mask(t: int, key_mask: np.ndarray | None = None, causal: bool = True) -> np.ndarray:
    """Boolean ``(B or 1, 1, T, T)`` mask; True means attendable."""
    base = np.tril(np.ones((t, t), dtype=bool)) if causal else np.ones((t, t), dtype=bool)
    mask = base[None, None]
    if key_mask is not None:
        mask = mask & np.asarray(key_mask, dtype=bool)[:, None, None, :]
    return mask


class LmModel(Module):
    """Token + positional embeddings, graph projector, transformer stack, output head."""

    def __init__(self, cfg: LmConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.tok_emb = Embedding(cfg.vocab_size, cfg.d_model, rng)
        self.pos_emb = Embedding(cfg.max_len, cfg.d_model, rng)
        self.projector = MLP(cfg.d_z, cfg.d_model, cfg.d_model, rng, activation=cfg.projector_act)
        self.blocks = [TransformerBlock(cfg.d_model, cfg.n_heads, rng) for _ in range(cfg.n_layers)]
        self.ln_f = LayerNorm(cfg.d_model)
        self.head = Linear(cfg.d_model, cfg.vocab_size, rng)
        if cfg.lora.enabled:
            apply_lora(self, cfg.lora, rng)

    def projector_parameters(self):
        return self.projector.parameters()


def encode_prefix(seqs: GraphTokenSequence | Sequence[GraphTokenSequence], model: LmModel) -> Tensor:
    """Map each slot's feature through the projector; output ``(B, N, d_model)``."""
    if isinstance(seqs, GraphTokenSequence):
        seqs = [seqs]
    lengths = {s.length for s in seqs}
    if len(lengths) != 1:
        raise DimensionError(f"encode_prefix: batch mixes sequence lengths {sorted(lengths)}")
    feats = np.stack([s.features for s in seqs])
    if feats.shape[-1] != model.cfg.d_z:
        raise DimensionError(f"encode_prefix: feature shape {feats.shape} does not match d_z={model.cfg.d_z}")
    return model.projector(Tensor(feats))


def forward(model: LmModel, prefix: Tensor, text_tokens, placeholder_mask: np.ndarray | None = None) -> ForwardOutput:
    """Run the transformer over ``[prefix ; text]`` with strict causal masking."""
    text = np.atleast_2d(np.asarray(text_tokens, dtype=np.int64))
    b, n = prefix.shape[0], prefix.shape[1]
    if text.shape[0] != b:
        raise DimensionError(f"forward: prefix batch {prefix.shape} vs text batch {text.shape}")
    t = n + text.shape[1]
    if t > model.cfg.max_len:
        raise LengthError(f"forward: input length {t} exceeds max_len {model.cfg.max_len}")
    x = ad.concat([prefix, model.tok_emb(text)], axis=1) + model.pos_emb(np.arange(t))
    key_mask = None
    if model.cfg.mask_placeholders and placeholder_mask is not None:
        key_mask = np.concatenate([~np.atleast_2d(placeholder_mask), np.ones((b, text.shape[1]), dtype=bool)], axis=1)
    mask = attention_mask(t, key_mask)
    states = [x]
    attentions = []
    for block in model.blocks:
        x, probs = block(x, mask)
        states.append(x)
        attentions.append(probs)
    final = model.ln_f(x)
    states[-1] = final
    logits = model.head(final)
    return ForwardOutput(logits, states[model.cfg.state_layer], n, attentions)


def text_loss(logits: Tensor, instructions: Sequence[Instruction]) -> Tensor:
    """Mean over examples of the mean negative log-likelihood on supervised positions."""
    if isinstance(instructions, Instruction):
        instructions = [instructions]
    rows, cols, toks, weights = [], [], [], []
    for b, ins in enumerate(instructions):
        positions = ins.supervised
        if not positions:
            raise UsageError("text_loss: empty supervised set")
        text = ins.text_tokens
        for i in positions:
            rows.append(b)
            cols.append(i - 1)
            toks.append(text[i - ins.graph_length])
            weights.append(1.0 / (len(positions) * len(instructions)))
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[(np.array(rows), np.array(cols), np.array(toks))]
    return -ad.tsum(picked * np.array(weights))


def aggregate_H(s_graph: Tensor, gamma: dict[int, Sequence[int]] | GraphTokenSequence,
                order: Sequence[int] | None = None) -> Tensor:
    """Row ``v`` is the mean of ``s_graph`` rows at ``gamma[v]``."""
    if isinstance(gamma, GraphTokenSequence):
        order = gamma.node_order if order is None else order
        gamma = gamma.gamma
    order = list(gamma) if order is None else list(order)
    groups = []
    for v in order:
        slots = gamma.get(v, ())
        if not slots:
            raise UsageError(f"aggregate_H: node {v} occupies no slot")
        groups.append(slots)
    return ad.index_mean_pool(s_graph, groups)


@dataclass
class ProbeResult:
    slots: np.ndarray
    mass: np.ndarray
    log_mass: np.ndarray

    @property
    def total(self) -> float:
        return float(self.mass.sum())

    @property
    def log_total(self) -> float:
        return float(np.log(max(self.total, 1e-300)))


def attention_probe(model: LmModel, prefix: Tensor, text_tokens, placeholder_mask: np.ndarray) -> list[ProbeResult]:
    """Final-layer, head-averaged attention of the last position onto graph slots."""
    out = forward(model, prefix, text_tokens, placeholder_mask)
    last = out.attentions[-1][:, :, -1, :].mean(axis=1)
    placeholder_mask = np.atleast_2d(placeholder_mask)
    results = []
    for b in range(last.shape[0]):
        slots = np.flatnonzero(~placeholder_mask[b])
        mass = last[b, slots]
        with np.errstate(divide="ignore"):
            log_mass = np.log(mass)
        results.append(ProbeResult(slots, mass, log_mass))
    return results


def greedy_decode(model: LmModel, prefix: Tensor, prompt_tokens, n_tokens: int,
                  placeholder_mask: np.ndarray | None = None) -> np.ndarray:
    """Argmax decoding of ``n_tokens`` tokens after the prompt; shape ``(B, n_tokens)``."""
    text = np.atleast_2d(np.asarray(prompt_tokens, dtype=np.int64))
    produced = []
    for _ in range(n_tokens):
        logits = forward(model, prefix, text, placeholder_mask).logits.data
        nxt = logits[:, -1, :].argmax(axis=-1)
        produced.append(nxt)
        text = np.concatenate([text, nxt[:, None]], axis=1)
    return np.stack(produced, axis=1) if produced else np.zeros((text.shape[0], 0), dtype=np.int64)


def _lora_targets(model: LmModel, targets: Sequence[str]) -> list[Linear]:
    layers: list[Linear] = []
    for block in model.blocks:
        if "attn" in targets:
            layers.extend([block.attn.q, block.attn.k, block.attn.v, block.attn.o])
        if "mlp" in targets:
            layers.extend([block.mlp.fc1, block.mlp.fc2])
    return layers


def apply_lora(model: LmModel, cfg: LoraConfig, rng: np.random.Generator) -> None:
    """Attach zero-initialized adapters and freeze the base transformer.

    The projector stays trainable.
    """
    model.requires_grad_(False)
    for layer in _lora_targets(model, cfg.targets):
        layer.attach_lora(cfg.rank, cfg.alpha, rng)
    model.projector.requires_grad_(True)
    logger.info("LmModel: LoRA rank=%d alpha=%.1f on %s", cfg.rank, cfg.alpha, ",".join(cfg.targets))


def merge_lora(model: LmModel) -> None:
    """Fold every adapter into its base weight."""
    merged = 0
    for block in model.blocks:
        for layer in (block.attn.q, block.attn.k, block.attn.v, block.attn.o, block.mlp.fc1, block.mlp.fc2):
            if layer.lora is not None:
                layer.merge_lora()
                merged += 1
    if not merged:
        raise UsageError("merge_lora: model has no adapters")
    model.cfg.lora.enabled = False
