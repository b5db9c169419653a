"""Graph reconstruction objectives: Decoder, Similarizer and Denoiser.

All losses take the aggregated node tokens ``H`` (one row per distinct
node of the graph token sequence) and return scalar tensors.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from rglm import settings
from rglm.core import autodiff as ad
from rglm.core.autodiff import Module, Tensor
from rglm.core.layers import MLP, Linear, sinusoidal_embedding
from rglm.errors import ConfigurationError, NumericError, ParameterError, UsageError
from rglm.lm.model import TransformerBlock

logger = logging.getLogger(__name__)


@dataclass
class ReconTarget:
    """Reconstruction targets row-aligned with ``H``.

    ``edges`` are local index pairs into ``node_ids``; ``latent`` is the
    frozen-encoder output (or raw features when the encoder is ablated).
    """

    node_ids: np.ndarray
    features: np.ndarray
    edges: np.ndarray
    latent: np.ndarray | None = None


@dataclass
class NegativeEdges:
    pairs: np.ndarray
    truncated: bool


# ----------------------------------------------------------------------
# Decoder (input space)
# ----------------------------------------------------------------------
class DecoderHead(Module):
    """Feature decoder ``d_f`` and bilinear structure scorer ``d_s``."""

    def __init__(self, d_model: int, d_z: int, rng: np.random.Generator,
                 lambda_f: float = settings.LAMBDA_F, lambda_s: float = settings.LAMBDA_S):
        if lambda_f < 0 or lambda_s < 0:
            raise ParameterError("DecoderHead: loss weights must be nonnegative")
        self.d_f = MLP(d_model, d_model, d_z, rng)
        self.d_s = Linear(d_model, d_model, rng, bias=False)
        self.lambda_f = lambda_f
        self.lambda_s = lambda_s

    def score(self, H: Tensor, pairs: np.ndarray) -> Tensor:
        """Logits ``(W h_i) . (W h_j)`` for each pair."""
        proj = self.d_s(H)
        left = ad.gather_rows(proj, pairs[:, 0])
        right = ad.gather_rows(proj, pairs[:, 1])
        return ad.tsum(left * right, axis=-1)


def feat_loss(H: Tensor, Z_sub: np.ndarray, head: DecoderHead) -> Tensor:
    Z_sub = np.asarray(Z_sub, dtype=np.float64)
    if H.shape[0] != Z_sub.shape[0]:
        raise UsageError(f"feat_loss: {H.shape[0]} token rows for {Z_sub.shape[0]} nodes")
    diff = head.d_f(H) - Z_sub
    return ad.tsum(ad.square(diff)) * (1.0 / Z_sub.shape[0])


def sample_negative_edges(sub, count: int, rng: np.random.Generator) -> NegativeEdges:
    """Uniform sample of ``count`` absent node pairs (local ids, ``i < j``).

    ``sub`` is anything with ``node_ids`` and local ``edges``. When fewer
    absent pairs exist, all are returned and ``truncated`` is set.
    """
    n = len(sub.node_ids)
    present = {(min(int(u), int(v)), max(int(u), int(v))) for u, v in np.asarray(sub.edges).reshape(-1, 2)}
    absent = [(i, j) for i in range(n) for j in range(i + 1, n) if (i, j) not in present]
    if count >= len(absent):
        pairs = absent
        truncated = count > len(absent)
    else:
        picked = np.sort(rng.choice(len(absent), size=count, replace=False))
        pairs = [absent[k] for k in picked]
        truncated = False
    return NegativeEdges(np.array(pairs, dtype=np.int64).reshape(-1, 2), truncated)


def topo_loss(H: Tensor, E: np.ndarray, E_neg: np.ndarray, head: DecoderHead) -> Tensor:
    E = np.asarray(E, dtype=np.int64).reshape(-1, 2)
    E_neg = np.asarray(E_neg, dtype=np.int64).reshape(-1, 2)
    if len(E) == 0 or len(E_neg) == 0:
        raise UsageError("topo_loss: positive and negative edge sets must be nonempty")
    pos = ad.log_sigmoid(head.score(H, E))
    neg = ad.log_sigmoid(-head.score(H, E_neg))
    return -(ad.mean(pos) + ad.mean(neg))


# ----------------------------------------------------------------------
# Similarizer (latent space)
# ----------------------------------------------------------------------
class SimilarizerHead(Module):
    def __init__(self, d_model: int, d_e: int, rng: np.random.Generator,
                 lambda_l: float = settings.LAMBDA_L, per_node: bool = True):
        if lambda_l < 0:
            raise ParameterError("SimilarizerHead: lambda_l must be nonnegative")
        self.s = MLP(d_model, d_model, d_e, rng)
        self.lambda_l = lambda_l
        self.per_node = per_node


def sim_loss(H: Tensor, E_target: np.ndarray, head: SimilarizerHead) -> Tensor:
    """Mean of ``1 - cos(s(h_v), e_v)``; both sides unit-normalized."""
    E_target = np.asarray(E_target, dtype=np.float64)
    pred = head.s(H)
    if pred.shape != E_target.shape:
        raise UsageError(f"sim_loss: prediction {pred.shape} vs target {E_target.shape}")
    if not head.per_node:
        pred = pred.reshape(1, -1)
        E_target = E_target.reshape(1, -1)
    target_norm = np.linalg.norm(E_target, axis=-1, keepdims=True)
    for row in np.flatnonzero(target_norm[:, 0] == 0):
        raise NumericError(f"sim_loss: target row {row} has zero norm")
    pred_norm = ad.l2_norm(pred, axis=-1, keepdims=True)
    for row in np.flatnonzero(pred_norm.data[:, 0] == 0):
        raise NumericError(f"sim_loss: predicted row {row} has zero norm")
    cos = ad.tsum((pred / pred_norm) * (E_target / target_norm), axis=-1)
    return ad.mean(1.0 - cos)


# ----------------------------------------------------------------------
# Denoiser (latent space)
# ----------------------------------------------------------------------
@dataclass
class NoiseSchedule:
    """Variance-preserving schedule; arrays are indexed by timestep ``t``.

    ``alpha_bar[0] == 1``; ``betas[t - 1]`` and ``sigma2[t - 1]`` belong to
    step ``t`` in ``[1, T]``.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray = field(init=False)
    sigma2: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.ndim != 1 or self.betas.size == 0:
            raise ParameterError("NoiseSchedule: betas must be a nonempty vector")
        if np.any(self.betas < 0) or np.any(self.betas >= 1):
            raise ParameterError("NoiseSchedule: betas must lie in [0, 1)")
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])
        prev = self.alpha_bar[:-1]
        cur = self.alpha_bar[1:]
        with np.errstate(divide="ignore", invalid="ignore"):
            self.sigma2 = np.where(cur < 1.0, self.betas * (1.0 - prev) / (1.0 - cur), 0.0)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    @classmethod
    def linear(cls, T: int = settings.DIFFUSION_STEPS, start: float = settings.BETA_START,
               end: float = settings.BETA_END) -> "NoiseSchedule":
        return cls(np.linspace(start, end, T))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": self.betas.tolist()}

    @classmethod
    def from_dict(cls, payload: dict) -> "NoiseSchedule":
        schedule = cls(payload["beta"])
        if schedule.T != int(payload["T"]):
            raise ParameterError("NoiseSchedule: T does not match the beta list")
        return schedule


def forward_noise(E: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``E_t = sqrt(abar_t) E + sqrt(1 - abar_t) eps``."""
    if not 1 <= t <= schedule.T:
        raise ParameterError(f"forward_noise: t={t} outside [1, {schedule.T}]")
    a = schedule.alpha_bar[t]
    return math.sqrt(a) * np.asarray(E, dtype=np.float64) + math.sqrt(1.0 - a) * np.asarray(eps, dtype=np.float64)


class DenoiserHead(Module):
    """Noise predictor ``f(E_t, H, t)``.

    Three input projections (noisy latents, condition ``C = Psi(H)``,
    timestep embedding) are summed and passed through bidirectional
    transformer blocks.
    """

    def __init__(self, d_model: int, d_e: int, rng: np.random.Generator, schedule: NoiseSchedule | None = None,
                 lambda_l: float = settings.LAMBDA_L, n_blocks: int = settings.DENOISER_BLOCKS, n_heads: int = 1):
        if lambda_l < 0:
            raise ParameterError("DenoiserHead: lambda_l must be nonnegative")
        self.schedule = schedule or NoiseSchedule.linear()
        self.lambda_l = lambda_l
        self.d_time = d_model
        self.in_proj = Linear(d_e, d_model, rng)
        self.cond_proj = Linear(d_model, d_model, rng)
        self.time_proj = Linear(self.d_time, d_model, rng)
        self.blocks = [TransformerBlock(d_model, n_heads, rng) for _ in range(n_blocks)]
        self.out_proj = Linear(d_model, d_e, rng)

    def predict(self, E_t: np.ndarray, H: Tensor, t: int) -> Tensor:
        if not 1 <= t <= self.schedule.T:
            raise ParameterError(f"DenoiserHead: timestep {t} outside [1, {self.schedule.T}]")
        temb = sinusoidal_embedding(t, self.d_time)[None, :]
        x = self.in_proj(Tensor(E_t)) + self.cond_proj(H) + self.time_proj(Tensor(temb))
        n = x.shape[0]
        x = x.reshape(1, n, x.shape[1])
        full = np.ones((1, 1, n, n), dtype=bool)
        for block in self.blocks:
            x, _ = block(x, full)
        return self.out_proj(x.reshape(n, x.shape[2]))


def diff_loss(head: DenoiserHead, E: np.ndarray, H: Tensor, rng: np.random.Generator,
              predict: Callable[[np.ndarray, Tensor, int], Tensor] | None = None) -> Tensor:
    """Single-sample noise-prediction loss, mean over elements."""
    E = np.asarray(E, dtype=np.float64)
    if E.shape[0] != H.shape[0]:
        raise UsageError(f"diff_loss: {E.shape[0]} latent rows vs {H.shape[0]} token rows")
    t = int(rng.integers(1, head.schedule.T + 1))
    eps = rng.standard_normal(E.shape)
    E_t = forward_noise(E, t, eps, head.schedule)
    pred = (predict or head.predict)(E_t, H, t)
    return ad.mean(ad.square(pred - eps))


# ----------------------------------------------------------------------
# Combined objective
# ----------------------------------------------------------------------
class ReconHeads(Module):
    """The head (if any) for one variant."""

    def __init__(self, variant: str, d_model: int, d_z: int, d_e: int, rng: np.random.Generator,
                 lambda_f: float = settings.LAMBDA_F, lambda_s: float = settings.LAMBDA_S,
                 lambda_l: float = settings.LAMBDA_L, sim_per_node: bool = True,
                 schedule: NoiseSchedule | None = None, denoiser_blocks: int = settings.DENOISER_BLOCKS):
        if variant not in settings.VARIANTS:
            raise ConfigurationError(f"ReconHeads: unknown variant {variant!r}")
        self.variant = variant
        self.decoder = DecoderHead(d_model, d_z, rng, lambda_f, lambda_s) if variant == "decoder" else None
        self.similarizer = (
            SimilarizerHead(d_model, d_e, rng, lambda_l, sim_per_node) if variant == "similarizer" else None
        )
        self.denoiser = (
            DenoiserHead(d_model, d_e, rng, schedule, lambda_l, denoiser_blocks) if variant == "denoiser" else None
        )


@dataclass
class GraphLoss:
    total: Tensor
    components: dict[str, float]


def graph_loss(variant: str, heads: ReconHeads, H: Tensor | None, target: ReconTarget | None,
               rng: np.random.Generator) -> GraphLoss:
    """Weighted reconstruction loss for ``variant`` (zero for vanilla)."""
    zero = Tensor(0.0)
    if variant == "vanilla":
        return GraphLoss(zero, {})
    if H is None or target is None:
        raise UsageError("graph_loss: reconstruction variants need H and targets")
    if variant == "decoder":
        head = heads.decoder
        total, parts = zero, {}
        if head.lambda_f > 0:
            lf = feat_loss(H, target.features, head)
            total = total + lf * head.lambda_f
            parts["feat"] = lf.item()
        if head.lambda_s > 0 and len(target.edges):
            negatives = sample_negative_edges(target, len(target.edges), rng)
            if len(negatives.pairs):
                lt = topo_loss(H, target.edges, negatives.pairs, head)
                total = total + lt * head.lambda_s
                parts["topo"] = lt.item()
        return GraphLoss(total, parts)
    if target.latent is None:
        raise ConfigurationError(f"graph_loss: variant {variant!r} needs pre-trained latent targets")
    if variant == "similarizer":
        ls = sim_loss(H, target.latent, heads.similarizer)
        return GraphLoss(ls * heads.similarizer.lambda_l, {"sim": ls.item()})
    if variant == "denoiser":
        ld = diff_loss(heads.denoiser, target.latent, H, rng)
        return GraphLoss(ld * heads.denoiser.lambda_l, {"diff": ld.item()})
    raise ConfigurationError(f"graph_loss: unknown variant {variant!r}")


def combined_loss(l_text: Tensor, l_graph: Tensor) -> Tensor:
    for name, value in (("text", l_text), ("graph", l_graph)):
        if not np.all(np.isfinite(value.data)):
            raise NumericError(f"combined_loss: non-finite {name} loss")
    return l_text + l_graph


@dataclass
class BoundReport:
    """Variational lower-bound value for monotone tracking.

    ``kappa`` and ``constant`` are placeholders, so ``value`` is not an
    absolute mutual-information claim.
    """

    variant: str
    value: float
    entropy_estimate: float
    kappa: float = 1.0
    constant: float = 0.0
    caveat: bool = True


def report_lower_bound(variant: str, loss_value: float | Sequence[float], entropy_estimate: float = 0.0, *,
                       lambda_f: float = settings.LAMBDA_F, lambda_s: float = settings.LAMBDA_S,
                       lambda_l: float = settings.LAMBDA_L, kappa: float = 1.0,
                       constant: float = 0.0) -> BoundReport:
    """Bound expression for ``variant``.

    decoder: ``H(Z)+H(A) - L_feat/lambda_f - L_topo/lambda_s`` with
    ``loss_value = (L_feat, L_topo)``; an ablated (zero-weight) term is
    omitted. similarizer: ``H(E) - (kappa*lambda_l*L_sim + C)``.
    denoiser: ``H(E) - (lambda_l*L_diff + C)``. vanilla has no bound and
    reports the entropy estimate.
    """
    if variant == "decoder":
        feat, topo = loss_value
        value = entropy_estimate
        if lambda_f > 0:
            value -= feat / lambda_f
        if lambda_s > 0:
            value -= topo / lambda_s
    elif variant == "similarizer":
        value = entropy_estimate - (kappa * lambda_l * float(loss_value) + constant)
    elif variant == "denoiser":
        value = entropy_estimate - (lambda_l * float(loss_value) + constant)
    elif variant == "vanilla":
        value = entropy_estimate
    else:
        raise ConfigurationError(f"report_lower_bound: unknown variant {variant!r}")
    return BoundReport(variant, float(value), entropy_estimate, kappa, constant)
