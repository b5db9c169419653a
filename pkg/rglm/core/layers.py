"""Reusable trainable layers built on the autodiff core."""

from __future__ import annotations

import math

import numpy as np

from rglm.core import autodiff as ad
from rglm.core.autodiff import Module, Parameter, Tensor
from rglm.errors import ParameterError, UsageError


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class LoraAdapter(Module):
    """Low-rank delta ``(alpha / rank) * A @ B`` with ``B`` zero-initialized."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, rng: np.random.Generator):
        if rank < 1 or rank > min(d_in, d_out):
            raise ParameterError(f"LoRA rank {rank} must be in [1, {min(d_in, d_out)}]")
        self.rank = rank
        self.scale = alpha / rank
        self.A = Parameter(rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank)))
        self.B = Parameter(np.zeros((rank, d_out)))

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    def __call__(self, x: Tensor) -> Tensor:
        return ((x @ self.A) @ self.B) * self.scale


class Linear(Module):
    """``y = x @ W + b`` with an optional low-rank adapter."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.weight = Parameter(_glorot(rng, d_in, d_out))
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.lora: LoraAdapter | None = None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        if self.lora is not None:
            y = y + self.lora(x)
        return y

    def attach_lora(self, rank: int, alpha: float, rng: np.random.Generator) -> LoraAdapter:
        self.lora = LoraAdapter(self.d_in, self.d_out, rank, alpha, rng)
        return self.lora

    def merge_lora(self) -> None:
        """Fold the adapter delta into ``weight`` and drop the adapter."""
        if self.lora is None:
            raise UsageError("merge_lora: no adapter attached")
        self.weight.data = self.weight.data + self.lora.delta()
        self.lora = None


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.gain = Parameter(np.ones(dim))
        self.shift = Parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.eps) * self.gain + self.shift


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, scale, size=(count, dim)))

    def __call__(self, ids) -> Tensor:
        return ad.embedding(self.weight, ids)


class MLP(Module):
    """Two-layer perceptron ``Linear -> activation -> Linear``."""

    ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "tanh": ad.tanh, "identity": lambda h: h}

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, activation: str = "gelu"):
        if activation not in self.ACTIVATIONS:
            raise ParameterError(f"MLP: unknown activation {activation!r}")
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)
        self.activation = activation

    def __call__(self, x) -> Tensor:
        return self.fc2(self.ACTIVATIONS[self.activation](self.fc1(x)))


def sinusoidal_embedding(t: int | np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal features for integer timesteps, shape ``(..., dim)``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(1, half))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb
