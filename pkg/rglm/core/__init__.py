"""Autodiff core, trainable layers and optimizers."""

from __future__ import annotations

from rglm.core.autodiff import Module, Parameter, Tensor, backward, grad_check, split_rng

__all__ = ["Module", "Parameter", "Tensor", "backward", "grad_check", "split_rng"]
