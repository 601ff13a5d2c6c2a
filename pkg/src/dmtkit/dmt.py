"""Masked transformer layer and stack for inpainting with hole-aware tokens.

A layer carries the full feature grid ``T x d x H_g x W_g`` with exact zeros
at invalid cells. Attention and the FFN only ever see the valid tokens; the
attention updater (AU) and convolution updater (CU) grow the mask after the
FFN and the RFC respectively, so content written into freshly activated cells
becomes a regular token in the next layer.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .masking import (
    TokenBatch,
    grid_to_tokens,
    mask_update,
    token_scatter,
    token_select,
    valid_cells,
)
from .numerics import (
    MacCounter,
    ParamSet,
    SlidingWindowSpec,
    Tensor,
    conv2d,
    count_macs,
    depthwise_conv2d,
    fold,
    gelu,
    layer_norm,
    linear,
    matmul,
    ops,
    overlap_count,
    param,
    softmax,
    unfold,
    WindowError,
)


class ConfigError(ValueError):
    """Inconsistent model configuration."""


def _window_count(spec: SlidingWindowSpec, hg: int, wg: int) -> int:
    try:
        return spec.count(hg, wg)
    except WindowError:
        return 0


@dataclass(frozen=True)
class DmtConfig:
    L: int = 4
    d: int = 64
    heads: int = 4
    ffn_hidden: int = 256
    K: int = 13
    warp_spec: SlidingWindowSpec = field(default_factory=lambda: SlidingWindowSpec(3, 1, 1))
    grid_dims: Optional[tuple[int, int, int]] = None
    # ablation switches
    token_selection: bool = True
    mask_activation: bool = True
    use_rfc: bool = True

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError(f"L must be >= 1, got {self.L}")
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.ffn_hidden < 1:
            raise ConfigError("ffn_hidden must be positive")
        if self.K < 1 or self.K % 2 == 0:
            raise ConfigError(f"RFC kernel K must be odd, got {self.K}")
        if self.grid_dims is not None:
            self.check_grid(self.grid_dims)

    def check_grid(self, grid_dims) -> None:
        _, hg, wg = grid_dims
        if _window_count(self.warp_spec, hg, wg) < 1:
            raise ConfigError(f"warp window {self.warp_spec} yields no windows on {hg}x{wg}")

    @property
    def rfc_spec(self) -> SlidingWindowSpec:
        return SlidingWindowSpec.same(self.K)

    def with_grid(self, grid_dims) -> "DmtConfig":
        return replace(self, grid_dims=tuple(int(v) for v in grid_dims))


@dataclass
class LayerState:
    grid: Tensor  # T x d x H_g x W_g
    mask: np.ndarray  # T x 1 x H_g x W_g
    index: int = 0


@dataclass
class LayerTrace:
    grids: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.grids)

    def append(self, state: LayerState) -> None:
        self.grids.append(state.grid)
        self.masks.append(state.mask)


RESIDUAL_OUTPUTS = ("wo", "ffn_w2", "rfc_a_w", "rfc_pw_w")


def init_layer_params(config: DmtConfig, rng: np.random.Generator, zero_residual: bool = False) -> ParamSet:
    """Fan-in scaled normal weights, zero biases, unit LayerNorm gains.

    With ``zero_residual`` the last projection of every residual branch
    (``wo``, ``ffn_w2``, ``rfc_a_w``, ``rfc_pw_w``) starts at zero, so a fresh
    layer is the identity on valid cells. Random draws are made either way, so
    the remaining weights do not depend on the flag.
    """
    d, hid, k = config.d, config.ffn_hidden, config.warp_spec.kernel
    win = d * k * k

    def w(*shape, fan_in):
        return param(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))

    def zeros(*shape):
        return param(np.zeros(shape))

    p: ParamSet = {
        "ln1_g": param(np.ones(d)),
        "ln1_b": zeros(d),
        "wq": w(d, d, fan_in=d),
        "bq": zeros(d),
        "wk": w(d, d, fan_in=d),
        "bk": zeros(d),
        "wv": w(d, d, fan_in=d),
        "bv": zeros(d),
        "wo": w(d, d, fan_in=d),
        "bo": zeros(d),
        "ln2_g": param(np.ones(d)),
        "ln2_b": zeros(d),
        "ffn_w1": w(win, hid, fan_in=win),
        "ffn_b1": zeros(hid),
        "ffn_w2": w(hid, win, fan_in=hid),
        "ffn_b2": zeros(win),
        "rfc_a_w": w(d, d, 1, 1, fan_in=d),
        "rfc_a_b": zeros(d),
        "rfc_b_w": w(d, d, 1, 1, fan_in=d),
        "rfc_b_b": zeros(d),
        "rfc_dw_w": w(d, 1, config.K, config.K, fan_in=config.K * config.K),
        "rfc_dw_b": zeros(d),
        "rfc_pw_w": w(d, d, 1, 1, fan_in=d),
        "rfc_pw_b": zeros(d),
    }
    if zero_residual:
        for name in RESIDUAL_OUTPUTS:
            p[name].data = np.zeros_like(p[name].data)
    for name, t in p.items():
        t.name = name
    return p


_attention_log: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar("attention_log", default=None)


@contextlib.contextmanager
def log_attention_macs() -> Iterator[list]:
    """Collect ``(n_tokens, MacCounter)`` for every attention block run in scope, in order."""
    log: list = []
    token = _attention_log.set(log)
    try:
        yield log
    finally:
        _attention_log.reset(token)


def attention_macs(n_tokens: int, d: int) -> int:
    """Multiply-accumulates of Q/K/V/O projections plus the two attention products."""
    return 4 * n_tokens * d * d + 2 * n_tokens * n_tokens * d


def msa_valid(batch: TokenBatch, params: ParamSet, heads: int) -> TokenBatch:
    """Pre-norm multi-head self-attention over the valid tokens of all frames, with residual."""
    z = batch.tokens
    n = batch.n_tokens
    if n == 0:
        return batch
    d = z.shape[1]
    if d % heads:
        raise ConfigError(f"token width {d} is not divisible by {heads} heads")
    dh = d // heads
    x = layer_norm(z, params["ln1_g"], params["ln1_b"])
    q = linear(x, params["wq"], params["bq"])
    k = linear(x, params["wk"], params["bk"])
    v = linear(x, params["wv"], params["bv"])
    qh = ops.transpose(ops.reshape(q, (n, heads, dh)), (1, 0, 2))
    kt = ops.transpose(ops.reshape(k, (n, heads, dh)), (1, 2, 0))
    vh = ops.transpose(ops.reshape(v, (n, heads, dh)), (1, 0, 2))
    att = softmax(matmul(qh, kt) * (1.0 / math.sqrt(dh)), axis=-1)
    ctx = ops.reshape(ops.transpose(matmul(att, vh), (1, 0, 2)), (n, d))
    return batch.with_tokens(z + linear(ctx, params["wo"], params["bo"]))


def soft_split(grid: Tensor, spec: SlidingWindowSpec) -> Tensor:
    """``T x d x H x W -> (T*N_w) x (d*k*k)``: one row per overlapping window."""
    cols = unfold(grid, spec)
    t, r, nw = cols.shape
    return ops.reshape(ops.transpose(cols, (0, 2, 1)), (t * nw, r))


def soft_composite(rows: Tensor, spec: SlidingWindowSpec, grid_dims) -> Tensor:
    """Overlap-add window rows back to a grid, dividing by per-pixel window counts."""
    t, hg, wg = grid_dims
    nw = spec.count(hg, wg)
    cols = ops.transpose(ops.reshape(rows, (t, nw, rows.shape[1])), (0, 2, 1))
    count = np.maximum(overlap_count(spec, hg, wg), 1.0)
    return fold(cols, spec, hg, wg) * (1.0 / count)


def ffn_tokenwarp(
    batch: TokenBatch,
    params: ParamSet,
    warp_spec: SlidingWindowSpec,
    grid_dims,
    select_mask: Optional[np.ndarray] = None,
) -> TokenBatch:
    """Pre-norm FFN over overlapping windows of the token grid, with residual.

    Tokens are normalised, scattered to the grid, soft-split into windows,
    passed through a two-layer GELU MLP per window and soft-composed back. The
    result is read at the cells of ``select_mask`` (default: the input cells),
    so cells newly activated by the attention updater pick up the composed
    content with a zero residual.
    """
    grid_dims = tuple(batch.grid_dims)
    t, hg, wg = grid_dims
    if _window_count(warp_spec, hg, wg) < 1:
        raise ConfigError(f"warp window {warp_spec} is degenerate on {hg}x{wg}")
    x = layer_norm(batch.tokens, params["ln2_g"], params["ln2_b"]) if batch.n_tokens else batch.tokens
    rows = soft_split(token_scatter(batch.with_tokens(x), batch.d), warp_spec)
    hidden = gelu(linear(rows, params["ffn_w1"], params["ffn_b1"]))
    composed = soft_composite(linear(hidden, params["ffn_w2"], params["ffn_b2"]), warp_spec, grid_dims)
    out = composed + token_scatter(batch, batch.d)
    if select_mask is None:
        flat = batch.flat_index
        return batch.with_tokens(ops.take_rows(grid_to_tokens(out), flat))
    return token_select(grid_to_tokens(out), select_mask)


def rfc_forward(grid: Tensor, params: ParamSet, K: int) -> Tensor:
    """Receptive field contextualizer with its skip connection, applied per frame.

    Branch A: 1x1 conv then GELU. Branch B: 1x1 conv, depthwise ``K x K``,
    pointwise 1x1. Output is ``grid + A + B``.
    """
    if K % 2 == 0:
        raise ConfigError(f"RFC kernel K must be odd, got {K}")
    one = SlidingWindowSpec(1)
    a = gelu(conv2d(grid, params["rfc_a_w"], params["rfc_a_b"], one))
    b = conv2d(grid, params["rfc_b_w"], params["rfc_b_b"], one)
    b = depthwise_conv2d(b, params["rfc_dw_w"], params["rfc_dw_b"], SlidingWindowSpec.same(K))
    b = conv2d(b, params["rfc_pw_w"], params["rfc_pw_b"], one)
    return grid + a + b


def dmt_layer(state: LayerState, params: ParamSet, config: DmtConfig) -> LayerState:
    """One masked transformer block with attention and convolution mask updaters."""
    t, d, hg, wg = state.grid.shape
    mask = np.asarray(state.mask, dtype=np.float64).reshape(t, 1, hg, wg)
    dense = np.ones_like(mask)
    tokens = grid_to_tokens(state.grid)

    batch = token_select(tokens, mask if config.token_selection else dense)
    log = _attention_log.get()
    if log is None:
        batch = msa_valid(batch, params, config.heads)
    else:
        n_in = batch.n_tokens
        with count_macs(MacCounter()) as counter:
            batch = msa_valid(batch, params, config.heads)
        log.append((n_in, counter))
    if config.mask_activation:
        mask = mask_update(mask, config.warp_spec)
    batch = ffn_tokenwarp(
        batch, params, config.warp_spec, (t, hg, wg), select_mask=mask if config.token_selection else dense
    )
    grid = token_scatter(batch, d)
    if config.use_rfc:
        grid = rfc_forward(grid, params, config.K)
        if config.mask_activation:
            mask = mask_update(mask, config.rfc_spec)
        if config.token_selection:
            grid = grid * mask
    return LayerState(grid, mask, state.index + 1)


def dmt_stack(
    state: LayerState, layer_params: list, config: DmtConfig, record_trace: bool = False
) -> tuple[LayerState, LayerTrace]:
    """Apply ``len(layer_params)`` layers; the trace holds every layer's output grid and mask."""
    if len(layer_params) < 1:
        raise ConfigError("dmt_stack needs at least one layer")
    trace = LayerTrace()
    for params in layer_params:
        state = dmt_layer(state, params, config)
        if record_trace:
            trace.append(state)
    return state, trace


def initial_state(features: Tensor, mask) -> LayerState:
    """Layer-0 state from a full token grid: invalid cells are replaced by exact zeros."""
    t, d, hg, wg = features.shape
    mask = np.asarray(mask, dtype=np.float64).reshape(t, 1, hg, wg)
    batch = token_select(grid_to_tokens(features), mask)
    return LayerState(token_scatter(batch, d), mask, 0)


def valid_token_count(mask) -> int:
    return len(valid_cells(mask)[0])
