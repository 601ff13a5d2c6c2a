"""Minimal float64 tensor engine with reverse-mode derivatives."""

from __future__ import annotations

from typing import Dict

import numpy as np

from . import ops
from .gradcheck import finite_diff_check
from .ops import (
    concat,
    conv2d,
    depthwise_conv2d,
    fold,
    gelu,
    layer_norm,
    linear,
    matmul,
    relu,
    sigmoid,
    softmax,
    unfold,
)
from .tensor import (
    MacCounter,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    count_macs,
    grad_enabled,
    no_grad,
)
from .window import SlidingWindowSpec, WindowError, fold_array, overlap_count, unfold_array

ParamSet = Dict[str, Tensor]


def param(data, name: str | None = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, requires_grad=True, name=name)


def check_paramset(params: ParamSet) -> None:
    for name, p in params.items():
        if not p.requires_grad:
            raise ValueError(f"parameter {name!r} is not trainable")


def zero_grads(params: ParamSet) -> None:
    for p in params.values():
        p.zero_grad()


def clone_params(params: ParamSet) -> ParamSet:
    return {k: param(np.array(v.data), name=k) for k, v in params.items()}


__all__ = [
    "MacCounter",
    "NonFiniteError",
    "ParamSet",
    "ShapeError",
    "SlidingWindowSpec",
    "Tensor",
    "WindowError",
    "backward",
    "check_paramset",
    "clone_params",
    "concat",
    "conv2d",
    "count_macs",
    "depthwise_conv2d",
    "finite_diff_check",
    "fold",
    "fold_array",
    "gelu",
    "grad_enabled",
    "layer_norm",
    "linear",
    "matmul",
    "no_grad",
    "ops",
    "overlap_count",
    "param",
    "relu",
    "sigmoid",
    "softmax",
    "unfold",
    "unfold_array",
    "zero_grads",
]
