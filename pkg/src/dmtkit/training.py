"""Losses, Adam and the two-stage (image prior, then video) training protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

import numpy as np

from .config import ModelConfig, TrainConfig
from .dmt import LayerTrace
from .masking import gen_mask_sequence
from .numerics import Tensor, backward, no_grad, ops
from .pipeline import ModelParams, forward, init_model_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged or was given incompatible inputs."""


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    mig: float = 0.1

    def __post_init__(self):
        for v in (self.rec, self.mig):
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weights must be finite and non-negative, got {self}")


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target_data.shape:
        raise ValueError(f"l1_loss shapes differ: {pred.shape} vs {target_data.shape}")
    return ops.mean(ops.abs(pred - target_data))


def migration_loss(video_trace: LayerTrace, prior_trace: LayerTrace) -> Tensor:
    """Sum over layers of ``|| m * (h - ReLU(h_prior)) ||^2``.

    ``m`` is the video model's activated mask after each layer, broadcast over
    channels. Prior features are treated as constants.
    """
    if len(video_trace) != len(prior_trace) or len(video_trace) == 0:
        raise ValueError(f"trace lengths differ: {len(video_trace)} vs {len(prior_trace)}")
    total: Tensor | None = None
    for h, prior, m in zip(video_trace.grids, prior_trace.grids, video_trace.masks):
        prior_data = prior.data if isinstance(prior, Tensor) else np.asarray(prior, dtype=np.float64)
        if h.shape != prior_data.shape:
            raise ValueError(f"trace feature shapes differ: {h.shape} vs {prior_data.shape}")
        m = np.asarray(m, dtype=np.float64)
        diff = (h - np.maximum(prior_data, 0.0)) * m
        term = ops.sum(ops.square(diff))
        total = term if total is None else total + term
    return total


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: OptimizerState) -> None:
    """Bias-corrected Adam update of every tensor in ``params`` from its ``.grad``."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing and len(missing) == len(params):
        raise TrainingError("adam_step called without gradients")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p.data), np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Clips of translating rectangles over colour gradients, with seeded masks."""

    clips: int = 64
    T: int = 4
    H: int = 16
    W: int = 16
    mask_kind: str = "freeform"
    mask_ratio: float = 0.4
    seed: int = 0

    @classmethod
    def from_train_config(cls, cfg: TrainConfig, **overrides) -> "SyntheticDatasetSpec":
        base = cls(cfg.clips, cfg.T, cfg.H, cfg.W, cfg.mask_kind, cfg.mask_ratio, cfg.seed)
        return replace(base, **overrides)


def generate_clip(spec: SyntheticDatasetSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """``(frames T x 3 x H x W, masks T x 1 x H x W)`` for clip ``index`` (wraps modulo ``clips``)."""
    index %= spec.clips
    rng = np.random.default_rng([spec.seed, index, 17])
    t, h, w = spec.T, spec.H, spec.W
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * yy + np.sin(angle) * xx
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    background = c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp
    frames = np.repeat(background[None], t, axis=0)
    for _ in range(int(rng.integers(1, 4))):
        rh, rw = rng.integers(max(2, h // 4), max(3, h // 2) + 1), rng.integers(max(2, w // 4), max(3, w // 2) + 1)
        y0, x0 = rng.uniform(0, h - rh), rng.uniform(0, w - rw)
        vy, vx = rng.uniform(-1.5, 1.5, size=2)
        color = rng.uniform(0, 1, size=3)
        for f in range(t):
            y = int(round(y0 + vy * f)) % h
            x = int(round(x0 + vx * f)) % w
            frames[f, :, y : y + rh, x : x + rw] = color[:, None, None]
    mask_seed = int(rng.integers(0, 2**31))
    masks = gen_mask_sequence(spec.mask_kind, t, h, w, spec.mask_ratio, mask_seed)
    return frames, masks


# -- training loops -----------------------------------------------------------


@dataclass
class LogRow:
    step: int
    loss_total: float
    loss_rec: float
    loss_mig: float

    def csv(self) -> str:
        return f"{self.step},{self.loss_total:.10g},{self.loss_rec:.10g},{self.loss_mig:.10g}"


LOG_HEADER = "step,loss_total,loss_rec,loss_mig"


def running_mean(values: Iterable[float], window: int = 10) -> np.ndarray:
    """Trailing mean over the last ``window`` values (shorter at the start)."""
    vals = np.asarray(list(values), dtype=np.float64)
    csum = np.concatenate([[0.0], np.cumsum(vals)])
    idx = np.arange(1, len(vals) + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def _check_finite(value: float, step: int, what: str) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"{what} became non-finite at step {step}")


def pretrain_image(
    config: ModelConfig,
    train: TrainConfig,
    steps: int,
    on_log: Optional[Callable[[LogRow], None]] = None,
) -> tuple[ModelParams, list]:
    """Train the image prior with L1 on single frames (``T`` forced to 1)."""
    params = init_model_params(config, seed=train.seed)
    data = SyntheticDatasetSpec.from_train_config(train, T=1)
    named = params.named()
    opt = OptimizerState(lr=train.pretrain_lr, beta1=train.beta1, beta2=train.beta2, eps=train.adam_eps)
    history = []
    for step in range(steps):
        for p in named.values():
            p.zero_grad()
        rec_total = 0.0
        for b in range(train.batch):
            frames, masks = generate_clip(data, step * train.batch + b)
            loss = l1_loss(forward(frames, masks, params, config).raw, frames) * (1.0 / train.batch)
            backward(loss)
            rec_total += loss.item()
        _check_finite(rec_total, step, "image L1 loss")
        adam_step(named, opt)
        row = LogRow(step, rec_total, rec_total, 0.0)
        history.append(row)
        if on_log:
            on_log(row)
    return params, history


def prior_trace(prior: ModelParams, prior_config: ModelConfig, frames, masks) -> LayerTrace:
    """Run the frozen image model frame by frame and stack its layer features over time."""
    per_frame = []
    with no_grad():
        for t in range(frames.shape[0]):
            res = forward(frames[t : t + 1], masks[t : t + 1], prior, prior_config, record_trace=True)
            per_frame.append(res.trace)
    trace = LayerTrace()
    for layer in range(len(per_frame[0])):
        trace.grids.append(np.concatenate([tr.grids[layer].data for tr in per_frame], axis=0))
        trace.masks.append(np.concatenate([tr.masks[layer] for tr in per_frame], axis=0))
    return trace


def check_prior_compatible(config: ModelConfig, prior_config: ModelConfig) -> None:
    if (prior_config.L, prior_config.d) != (config.L, config.d):
        raise TrainingError(
            f"prior has L={prior_config.L}, d={prior_config.d}; video model needs L={config.L}, d={config.d}"
        )


def video_step_losses(
    params: ModelParams,
    config: ModelConfig,
    frames,
    masks,
    prior: Optional[ModelParams],
    prior_config: Optional[ModelConfig],
    weights: LossWeights,
) -> tuple[Tensor, Tensor, Optional[Tensor]]:
    """``(total, L1, L_mig)`` for one clip; L_mig is ``None`` when its weight is 0."""
    res = forward(frames, masks, params, config, record_trace=True)
    rec = l1_loss(res.raw, frames)
    total = rec * weights.rec
    mig = None
    if weights.mig > 0 and prior is not None:
        mig = migration_loss(res.trace, prior_trace(prior, prior_config or config, frames, masks))
        total = total + mig * weights.mig
    return total, rec, mig


def train_video(
    config: ModelConfig,
    train: TrainConfig,
    prior: Optional[ModelParams],
    weights: LossWeights,
    steps: int,
    prior_config: Optional[ModelConfig] = None,
    on_log: Optional[Callable[[LogRow], None]] = None,
) -> tuple[ModelParams, list]:
    """Train the video model from a fresh initialisation with migration regularisation.

    The prior is only ever evaluated under ``no_grad``; its tensors never
    receive gradients or updates.
    """
    prior_config = prior_config or config
    if prior is not None:
        check_prior_compatible(config, prior_config)
    elif weights.mig > 0:
        raise TrainingError("migration weight > 0 needs a prior model")
    # a different seed stream than the prior's initialisation
    params = init_model_params(config, seed=train.seed + 1)
    data = SyntheticDatasetSpec.from_train_config(train)
    named = params.named()
    opt = OptimizerState(lr=train.lr, beta1=train.beta1, beta2=train.beta2, eps=train.adam_eps)
    history = []
    for step in range(steps):
        for p in named.values():
            p.zero_grad()
        tot = rec_sum = mig_sum = 0.0
        for b in range(train.batch):
            frames, masks = generate_clip(data, step * train.batch + b)
            total, rec, mig = video_step_losses(params, config, frames, masks, prior, prior_config, weights)
            backward(total * (1.0 / train.batch))
            tot += total.item() / train.batch
            rec_sum += rec.item() / train.batch
            mig_sum += (mig.item() if mig is not None else 0.0) / train.batch
        _check_finite(tot, step, "video loss")
        adam_step(named, opt)
        row = LogRow(step, tot, rec_sum, mig_sum)
        history.append(row)
        if on_log:
            on_log(row)
    return params, history
