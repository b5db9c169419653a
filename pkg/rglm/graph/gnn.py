"""Masked-label GNN autoencoder that supplies frozen latent targets.

The encoder mixes residual graph-convolution layers with one
attention-weighted aggregation layer, consumes Laplacian and random-walk
positional encodings, and exposes a Gaussian latent ``(mu, logvar)``
decoded to class logits by a linear layer.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from rglm import settings
from rglm.core import autodiff as ad
from rglm.core.autodiff import Module, Parameter, Tensor
from rglm.core.layers import Embedding, Linear
from rglm.core.optim import Adam, CosineWarmup
from rglm.errors import (
    ConfigurationError, DimensionError, NumericError, ParameterError, ParseError, PreconditionError,
)
from rglm.graph.tag import UNLABELED, Subgraph, Tag

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-9


# ----------------------------------------------------------------------
# Positional encodings
# ----------------------------------------------------------------------
def _graph_arrays(graph: Tag | Subgraph) -> tuple[int, np.ndarray]:
    n = graph.node_count if isinstance(graph, Tag) else graph.num_nodes
    return n, np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)


def adjacency(graph: Tag | Subgraph) -> np.ndarray:
    n, edges = _graph_arrays(graph)
    adj = np.zeros((n, n))
    adj[edges[:, 0], edges[:, 1]] = 1.0
    adj[edges[:, 1], edges[:, 0]] = 1.0
    return adj


def laplacian_spectrum(graph: Tag | Subgraph) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors of ``L = D - A``."""
    adj = adjacency(graph)
    lap = np.diag(adj.sum(axis=1)) - adj
    return np.linalg.eigh(lap)


def lap_pe(graph: Tag | Subgraph, k: int, pad: bool = False) -> np.ndarray:
    """Eigenvectors of the ``k`` smallest positive Laplacian eigenvalues.

    Each vector is sign-fixed so its first entry of non-negligible
    magnitude is positive. With ``pad`` the result is zero-filled when the
    graph has fewer than ``k`` positive eigenvalues; otherwise that and
    ``k >= node_count`` raise ``ParameterError``.
    """
    n, _ = _graph_arrays(graph)
    if k < 1:
        raise ParameterError(f"lap_pe: k must be >= 1, got {k}")
    if k >= n and not pad:
        raise ParameterError(f"lap_pe: k={k} must be smaller than node count {n}")
    evals, evecs = laplacian_spectrum(graph)
    keep = np.flatnonzero(evals > EIGEN_TOL)[:k]
    if len(keep) < k and not pad:
        raise ParameterError(f"lap_pe: only {len(keep)} nonzero eigenvalues for k={k}")
    out = np.zeros((n, k))
    for col, idx in enumerate(keep):
        vec = evecs[:, idx]
        lead = np.flatnonzero(np.abs(vec) > 1e-10)
        if lead.size and vec[lead[0]] < 0:
            vec = -vec
        out[:, col] = vec
    return out


def rwse(graph: Tag | Subgraph, K: int) -> np.ndarray:
    """Return probabilities of 1..K-step uniform random walks; isolated nodes get 0."""
    if K < 1:
        raise ParameterError(f"rwse: K must be >= 1, got {K}")
    adj = adjacency(graph)
    deg = adj.sum(axis=1, keepdims=True)
    walk = np.divide(adj, deg, out=np.zeros_like(adj), where=deg > 0)
    out = np.zeros((adj.shape[0], K))
    power = np.eye(adj.shape[0])
    for step in range(K):
        power = power @ walk
        out[:, step] = np.clip(np.diag(power), 0.0, 1.0)
    return out


# ----------------------------------------------------------------------
# Encoder
# ----------------------------------------------------------------------
@dataclass
class GnnConfig:
    n_layers: int = settings.GNN_DEFAULTS["n_layers"]
    d_e: int = settings.GNN_DEFAULTS["d_e"]
    k: int = settings.GNN_DEFAULTS["k"]
    K: int = settings.GNN_DEFAULTS["K"]
    mask_ratio: float = settings.GNN_DEFAULTS["mask_ratio"]
    epochs: int = settings.GNN_DEFAULTS["epochs"]
    lr: float = settings.GNN_DEFAULTS["lr"]
    warmup_epochs: int = settings.GNN_DEFAULTS["warmup_epochs"]
    seed: int = 0
    dense_bias: bool = False

    def validate(self) -> None:
        if self.n_layers < 1 or self.d_e < 1 or self.k < 1 or self.K < 1:
            raise ParameterError("GnnConfig: n_layers, d_e, k and K must be positive")
        if not 0.0 < self.mask_ratio <= 1.0:
            raise ParameterError(f"GnnConfig: mask_ratio must be in (0, 1], got {self.mask_ratio}")
        if self.epochs < 1 or self.lr <= 0:
            raise ParameterError("GnnConfig: epochs and lr must be positive")


@dataclass
class GraphInputs:
    """Dense per-graph constants consumed by ``GnnEncoder``."""

    features: np.ndarray
    norm_adj: np.ndarray
    attn_mask: np.ndarray
    pair_type: np.ndarray
    lap: np.ndarray
    rw: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]


def graph_inputs(graph: Tag | Subgraph, cfg: GnnConfig) -> GraphInputs:
    n, _ = _graph_arrays(graph)
    if cfg.dense_bias and n > settings.DENSE_BIAS_MAX_NODES:
        raise ConfigurationError(
            f"GnnConfig: dense pair bias is limited to {settings.DENSE_BIAS_MAX_NODES} nodes, graph has {n}"
        )
    adj = adjacency(graph)
    self_loops = adj + np.eye(n)
    inv_sqrt = 1.0 / np.sqrt(self_loops.sum(axis=1))
    norm_adj = self_loops * inv_sqrt[:, None] * inv_sqrt[None, :]
    # 0 absent pair, 1 edge, 2 self
    pair_type = adj.astype(np.int64) + 2 * np.eye(n, dtype=np.int64)
    attn_mask = np.ones((n, n), dtype=bool) if cfg.dense_bias else self_loops > 0
    return GraphInputs(
        features=np.asarray(graph.features, dtype=np.float64),
        norm_adj=norm_adj,
        attn_mask=attn_mask,
        pair_type=pair_type,
        lap=lap_pe(graph, cfg.k, pad=True),
        rw=rwse(graph, cfg.K),
    )


class GnnEncoder(Module):
    """Residual GCN stack + one neighbor-attention layer + Gaussian latent head."""

    def __init__(self, cfg: GnnConfig, d_z: int, num_classes: int, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.d_z = d_z
        self.num_classes = num_classes
        d = cfg.d_e
        # index num_classes is the MASK label
        self.label_emb = Embedding(num_classes + 1, d, rng, scale=0.1)
        self.in_proj = Linear(d_z + d, d, rng)
        self.lap_proj = Linear(cfg.k, d, rng)
        # keeps zero (padded) eigenvector entries off the relu kink
        self.lap_proj.bias.data = rng.uniform(0.05, 0.15, size=d)
        self.rw_proj = Linear(cfg.K, d, rng)
        self.convs = [Linear(d, d, rng) for _ in range(cfg.n_layers - 1)]
        self.attn_q = Linear(d, d, rng, bias=False)
        self.attn_k = Linear(d, d, rng, bias=False)
        self.attn_v = Linear(d, d, rng)
        self.pair_bias = Parameter(np.zeros(3)) if cfg.dense_bias else None
        self.mu = Linear(d, d, rng)
        self.logvar = Linear(d, d, rng)
        self.decoder = Linear(d, num_classes, rng)

    @property
    def mask_id(self) -> int:
        return self.num_classes

    def encode(self, inputs: GraphInputs, visible_labels: np.ndarray) -> tuple[Tensor, Tensor]:
        """Return ``(mu, logvar)``; ``visible_labels`` uses ``mask_id`` for hidden nodes."""
        if inputs.features.shape[1] != self.d_z:
            raise DimensionError(f"GnnEncoder: features {inputs.features.shape} but d_z={self.d_z}")
        x = ad.concat([Tensor(inputs.features), self.label_emb(visible_labels)], axis=1)
        h = self.in_proj(x)
        # invariant to the sign of each eigenvector separately
        per_vec = ad.mul(Tensor(inputs.lap[:, :, None]), self.lap_proj.weight)
        bias = self.lap_proj.bias
        h = h + ad.tsum(ad.relu(per_vec + bias) + ad.relu(-per_vec + bias), axis=1)
        h = h + self.rw_proj(inputs.rw)
        for conv in self.convs:
            h = h + ad.relu(ad.matmul(Tensor(inputs.norm_adj), conv(h)))
        scores = ad.matmul(self.attn_q(h), ad.transpose(self.attn_k(h))) * (1.0 / math.sqrt(self.cfg.d_e))
        if self.pair_bias is not None:
            scores = scores + ad.getitem(self.pair_bias, inputs.pair_type)
        weights = ad.softmax(scores, axis=-1, mask=inputs.attn_mask)
        h = h + ad.matmul(weights, self.attn_v(h))
        return self.mu(h), self.logvar(h)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------
def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over nodes of ``KL(N(mu, exp(logvar)) || N(0, I))``."""
    per_node = ad.tsum(ad.square(mu) + ad.exp(logvar) - logvar - 1.0, axis=-1) * 0.5
    return ad.mean(per_node)


def mask_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Cross-entropy of ``logits`` rows against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    return -ad.mean(logp[(np.arange(len(labels)), labels)])


def mask_nodes(train_nodes: np.ndarray, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted random subset of ``ceil(ratio * |train|)`` training nodes."""
    count = max(1, int(math.ceil(ratio * len(train_nodes))))
    return np.sort(rng.choice(train_nodes, size=min(count, len(train_nodes)), replace=False))


def visible_labels(encoder: GnnEncoder, labels: np.ndarray, reveal: np.ndarray | None) -> np.ndarray:
    out = np.full(len(labels), encoder.mask_id, dtype=np.int64)
    if reveal is not None and len(reveal):
        reveal = np.asarray(reveal, dtype=np.int64)
        known = labels[reveal] != UNLABELED
        out[reveal[known]] = labels[reveal[known]]
    return out


@dataclass
class PretrainLoss:
    total: Tensor
    mask: Tensor
    kl: Tensor


def pretrain_loss(encoder: GnnEncoder, inputs: GraphInputs, shown: np.ndarray, masked: np.ndarray,
                  labels: np.ndarray, noise: np.ndarray | None = None) -> PretrainLoss:
    """Masked-label cross-entropy plus KL regularizer.

    ``noise`` drives the reparameterized sample; ``None`` decodes ``mu``.
    """
    mu, logvar = encoder.encode(inputs, shown)
    z = mu if noise is None else mu + ad.exp(logvar * 0.5) * noise
    logits = ad.gather_rows(encoder.decoder(z), masked)
    lm = mask_loss(logits, labels[masked])
    kl = kl_loss(mu, logvar)
    return PretrainLoss(lm + kl, lm, kl)


def pretrain(tag: Tag, cfg: GnnConfig, rng: np.random.Generator | None = None,
             on_epoch: Callable[[int, PretrainLoss], None] | None = None) -> GnnEncoder:
    """Train an encoder by masked-label prediction; returns it frozen.

    Args:
        tag: Graph whose labeled training nodes supervise the encoder.
        cfg: Encoder and schedule settings.
        rng: Seeded stream; ``default_rng(cfg.seed)`` when omitted.
        on_epoch: Called with the epoch index and its loss parts.
    """
    cfg.validate()
    train_nodes = np.array([v for v in tag.split_nodes("train") if tag.labels[v] != UNLABELED], dtype=np.int64)
    if train_nodes.size == 0:
        raise ConfigurationError("pretrain: dataset has no labeled training nodes")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    init_rng, mask_rng, noise_rng = ad.split_rng(rng, 3)
    encoder = GnnEncoder(cfg, tag.meta.d_z, tag.meta.num_classes, init_rng)
    inputs = graph_inputs(tag, cfg)
    optimizer = Adam(encoder.parameters(), lr=cfg.lr, schedule=CosineWarmup(cfg.epochs, cfg.warmup_epochs))
    for epoch in range(cfg.epochs):
        masked = mask_nodes(train_nodes, cfg.mask_ratio, mask_rng)
        shown = visible_labels(encoder, tag.labels, np.setdiff1d(train_nodes, masked))
        noise = noise_rng.standard_normal((tag.node_count, cfg.d_e))
        loss = pretrain_loss(encoder, inputs, shown, masked, tag.labels, noise)
        if not math.isfinite(loss.total.item()):
            raise NumericError(f"pretrain: non-finite loss at epoch {epoch}")
        optimizer.zero_grad()
        ad.backward(loss.total, optimizer.params)
        optimizer.step()
        if on_epoch is not None:
            on_epoch(epoch, loss)
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            logger.info("GnnPretrain: epoch %d mask=%.4f kl=%.4f", epoch, loss.mask.item(), loss.kl.item())
    encoder.requires_grad_(False)
    return encoder


def classify(encoder: GnnEncoder, tag: Tag, reveal: np.ndarray | None = None) -> np.ndarray:
    """Predicted class per node from ``mu``; labels of ``reveal`` nodes are shown, all others masked."""
    inputs = graph_inputs(tag, encoder.cfg)
    mu, _ = encoder.encode(inputs, visible_labels(encoder, tag.labels, reveal))
    return encoder.decoder(mu).data.argmax(axis=-1)


def encode_targets(encoder: GnnEncoder, sub: Subgraph) -> np.ndarray:
    """Deterministic latents ``mu`` for each subgraph node (rows in ``sub.node_ids`` order)."""
    if not encoder.frozen:
        raise PreconditionError("encode_targets: encoder must be frozen")
    if sub.features.shape[1] != encoder.d_z:
        raise DimensionError(f"encode_targets: subgraph features {sub.features.shape} but d_z={encoder.d_z}")
    inputs = graph_inputs(sub, encoder.cfg)
    mu, _ = encoder.encode(inputs, np.full(sub.num_nodes, encoder.mask_id, dtype=np.int64))
    return mu.data.copy()


# ----------------------------------------------------------------------
# Persistence
# ----------------------------------------------------------------------
def save_encoder(encoder: GnnEncoder, path: str | Path) -> None:
    meta = {"gnn": asdict(encoder.cfg), "d_z": encoder.d_z, "num_classes": encoder.num_classes}
    ad.save_parameters(encoder, path, meta)
    logger.info("GnnPretrain: encoder saved to %s", path)


def load_encoder(path: str | Path) -> GnnEncoder:
    state, meta = ad.read_parameters(path)
    try:
        cfg = GnnConfig(**meta["gnn"])
        encoder = GnnEncoder(cfg, int(meta["d_z"]), int(meta["num_classes"]), np.random.default_rng(0))
    except (KeyError, TypeError) as exc:
        raise ParseError(f"encoder checkpoint {path} has malformed metadata: {exc}", record="meta") from exc
    encoder.load_state_dict(state)
    encoder.requires_grad_(False)
    return encoder


class TargetCache:
    """Latent targets keyed by ``(dataset, center, h, seed)``, persisted as JSON."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.entries: dict[str, np.ndarray] = {}
        self.stats = {"hits": 0, "misses": 0}
        if self.path is not None and self.path.exists():
            self.load(self.path)

    @staticmethod
    def key(dataset: str, center: int | Sequence[int], h: int, seed: int) -> str:
        c = "-".join(str(int(v)) for v in center) if isinstance(center, (tuple, list)) else str(int(center))
        return f"{dataset}|{c}|{h}|{seed}"

    def get(self, key: str, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if key in self.entries:
            self.stats["hits"] += 1
        else:
            self.stats["misses"] += 1
            self.entries[key] = np.asarray(compute(), dtype=np.float64)
        return self.entries[key]

    def save(self, path: str | Path | None = None) -> None:
        target = Path(path) if path is not None else self.path
        if target is None:
            raise ConfigurationError("TargetCache: no path to save to")
        payload = {k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for k, v in self.entries.items()}
        target.write_text(json.dumps(payload))

    def load(self, path: str | Path) -> None:
        try:
            payload = json.loads(Path(path).read_text())
            for k, entry in payload.items():
                self.entries[k] = np.asarray(entry["values"], dtype=np.float64).reshape(entry["shape"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ParseError(f"cannot read target cache {path}: {exc}") from exc
