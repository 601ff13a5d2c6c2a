"""Encoder -> tokens -> masked transformer stack -> decoder, plus checkpoints."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig, model_config_text, parse_model_config
from .dmt import ConfigError, LayerTrace, dmt_stack, init_layer_params, initial_state
from .masking import MaskError, as_mask, downscale_mask, grid_to_tokens, tokens_to_grid
from .numerics import (
    ParamSet,
    SlidingWindowSpec,
    Tensor,
    concat,
    conv2d,
    gelu,
    layer_norm,
    linear,
    ops,
    param,
    sigmoid,
)

DOWNSCALE = 4
_DOWN = SlidingWindowSpec(3, 2, 1)
_SAME3 = SlidingWindowSpec(3, 1, 1)


@dataclass
class ModelParams:
    encoder: ParamSet
    tokenizer: ParamSet
    layers: list
    detokenizer: ParamSet
    decoder: ParamSet

    def named(self) -> dict:
        """Flat ``name -> Tensor`` view in a fixed order (checkpoint and optimiser order)."""
        out = {}
        for prefix, group in (("enc", self.encoder), ("tok", self.tokenizer)):
            out.update({f"{prefix}.{k}": v for k, v in group.items()})
        for i, layer in enumerate(self.layers):
            out.update({f"layer{i}.{k}": v for k, v in layer.items()})
        for prefix, group in (("detok", self.detokenizer), ("dec", self.decoder)):
            out.update({f"{prefix}.{k}": v for k, v in group.items()})
        return out

    @classmethod
    def from_named(cls, named: dict, n_layers: int) -> "ModelParams":
        groups = {"enc": {}, "tok": {}, "detok": {}, "dec": {}}
        layers = [{} for _ in range(n_layers)]
        for name, t in named.items():
            prefix, key = name.split(".", 1)
            if prefix.startswith("layer"):
                layers[int(prefix[5:])][key] = t
            else:
                groups[prefix][key] = t
        return cls(groups["enc"], groups["tok"], layers, groups["detok"], groups["dec"])


def init_model_params(config: ModelConfig, seed: int = 0, zero_residual: bool = True) -> ModelParams:
    """Seeded initialisation; see ``init_layer_params`` for ``zero_residual``."""
    rng = np.random.default_rng(seed)
    c, half, d = config.C, max(1, config.C // 2), config.d

    def w(*shape, fan_in):
        return param(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape))

    def zeros(*shape):
        return param(np.zeros(shape))

    encoder = {
        "conv1_w": w(half, 4, 3, 3, fan_in=36),
        "conv1_b": zeros(half),
        "conv2_w": w(c, half, 3, 3, fan_in=9 * half),
        "conv2_b": zeros(c),
    }
    tokenizer = {"w": w(c, d, fan_in=c), "b": zeros(d), "ln_g": param(np.ones(d)), "ln_b": zeros(d)}
    layers = [init_layer_params(config.dmt(), rng, zero_residual=zero_residual) for _ in range(config.L)]
    detokenizer = {"w": w(d, c, fan_in=d), "b": zeros(c)}
    decoder = {
        "conv1_w": w(half, c, 3, 3, fan_in=9 * c),
        "conv1_b": zeros(half),
        "ln_g": param(np.ones(half)),
        "ln_b": zeros(half),
        "conv2_w": w(3, half, 3, 3, fan_in=9 * half),
        "conv2_b": zeros(3),
    }
    params = ModelParams(encoder, tokenizer, layers, detokenizer, decoder)
    for name, t in params.named().items():
        t.name = name
    return params


def as_frames(frames) -> np.ndarray:
    arr = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[0] < 1:
        raise ValueError(f"frames must be T x 3 x H x W with T >= 1, got {arr.shape}")
    return arr


def encode(frames, masks, params: ParamSet) -> Tensor:
    """Masked frames plus validity channel -> ``T x C x H/4 x W/4`` features."""
    frames = frames if isinstance(frames, Tensor) else Tensor(as_frames(frames))
    masks = as_mask(masks)
    t, _, h, w = frames.shape
    if h % DOWNSCALE or w % DOWNSCALE:
        raise MaskError(f"frame size {h}x{w} is not divisible by {DOWNSCALE}")
    if masks.shape != (t, 1, h, w):
        raise MaskError(f"masks shaped {masks.shape} do not match frames {frames.shape}")
    # hole pixels are forced to exactly 0 so the encoder never reads them
    held = frames * masks
    x = concat([held, Tensor(masks)], axis=1)
    x = gelu(conv2d(x, params["conv1_w"], params["conv1_b"], _DOWN))
    return conv2d(x, params["conv2_w"], params["conv2_b"], _DOWN)


def tokenize(features: Tensor, params: ParamSet) -> Tensor:
    """``T x C x H_g x W_g -> N x d`` with one row per cell, frame-then-raster order."""
    return linear(grid_to_tokens(features), params["w"], params["b"])


def embed_norm(tokens: Tensor, params: ParamSet) -> Tensor:
    """LayerNorm on fresh tokens so they enter the residual stream at the branch-output scale."""
    return layer_norm(tokens, params["ln_g"], params["ln_b"])


def inverse_tokenize(tokens: Tensor, params: ParamSet, grid_dims) -> Tensor:
    return tokens_to_grid(linear(tokens, params["w"], params["b"]), grid_dims)


def channel_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """LayerNorm over the channel axis of a ``T x C x H x W`` map."""
    y = layer_norm(ops.transpose(x, (0, 2, 3, 1)), gain, bias)
    return ops.transpose(y, (0, 3, 1, 2))


def decode(grid: Tensor, params: ParamSet) -> Tensor:
    """Two nearest-neighbour x2 upsample + conv stages, sigmoid output in ``[0, 1]``.

    The hidden stage is normalised over channels at every pixel before GELU;
    without it the pre-activations drift negative under Adam and the stage dies.
    """
    x = conv2d(ops.upsample_nearest2x(grid), params["conv1_w"], params["conv1_b"], _SAME3)
    x = gelu(channel_norm(x, params["ln_g"], params["ln_b"]))
    x = conv2d(ops.upsample_nearest2x(x), params["conv2_w"], params["conv2_b"], _SAME3)
    return sigmoid(x)


def compose_output(raw, frames, masks) -> Tensor:
    """Known pixels from ``frames``, hole pixels from ``raw``."""
    raw = raw if isinstance(raw, Tensor) else Tensor(raw)
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    masks = as_mask(masks)
    if raw.shape != frames.shape:
        raise ValueError(f"raw output {raw.shape} vs frames {frames.shape}")
    return raw * (1.0 - masks) + frames * masks


@dataclass
class ForwardResult:
    raw: Tensor
    composed: Tensor
    trace: LayerTrace
    masks: list  # grid-resolution mask after every layer
    grid_mask: np.ndarray  # grid-resolution mask entering the stack


def forward(frames, masks, params: ModelParams, config: ModelConfig, record_trace: bool = False) -> ForwardResult:
    """Run the whole model; ``T = 1`` is image mode through the same code path."""
    frames_t = frames if isinstance(frames, Tensor) else Tensor(as_frames(frames))
    masks = as_mask(masks)
    t, _, h, w = frames_t.shape
    grid_dims = (t, h // DOWNSCALE, w // DOWNSCALE)
    dmt_config = config.dmt(grid_dims)
    feats = encode(frames_t, masks, params.encoder)
    grid_mask = downscale_mask(masks, DOWNSCALE)
    tokens = embed_norm(tokenize(feats, params.tokenizer), params.tokenizer)
    state = initial_state(tokens_to_grid(tokens, grid_dims), grid_mask)
    state, trace = dmt_stack(state, params.layers, dmt_config, record_trace=True)
    out = inverse_tokenize(grid_to_tokens(state.grid), params.detokenizer, grid_dims)
    raw = decode(out, params.decoder)
    composed = compose_output(raw, frames_t, masks)
    return ForwardResult(
        raw=raw,
        composed=composed,
        trace=trace if record_trace else LayerTrace(),
        masks=list(trace.masks),
        grid_mask=grid_mask,
    )


# -- checkpoints --------------------------------------------------------------

MAGIC = b"DMTC"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Little-endian: magic, u32 version, u32-length config text, u32 tensor count, tensor records.

    Each record is u32 name length, UTF-8 name, u32 rank, u64 dims, float64 payload.
    """
    cfg = model_config_text(config).encode("utf-8")
    named = params.named()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg)), cfg, struct.pack("<I", len(named))]
    for name, t in named.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}Q", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointTruncatedError(f"checkpoint ends inside {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    r = _Reader(Path(path).read_bytes())
    if r.blob[:4] != MAGIC:
        raise CheckpointMagicError(f"{path}: not a DMTC checkpoint")
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (cfg_len,) = r.unpack("<I", "config length")
    try:
        config = parse_model_config(r.take(cfg_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointShapeError(f"{path}: bad config block: {exc}") from exc
    expected = {k: v.shape for k, v in init_model_params(config).named().items()}
    (count,) = r.unpack("<I", "tensor count")
    named = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I", f"rank of {name}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name}")
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name!r}")
        if tuple(dims) != expected[name]:
            raise CheckpointShapeError(
                f"{path}: tensor {name!r} has shape {tuple(dims)}, config implies {expected[name]}"
            )
        payload = r.take(8 * int(np.prod(dims)), f"payload of {name}")
        named[name] = param(np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64), name=name)
    missing = [k for k in expected if k not in named]
    if missing:
        raise CheckpointShapeError(f"{path}: missing tensor {missing[0]!r}")
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes")
    ordered = {k: named[k] for k in expected}
    return ModelParams.from_named(ordered, config.L), config
