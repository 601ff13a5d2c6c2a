"""Component ablation on the synthetic toy task.

Every variant is a video model trained from scratch against one shared image
prior, then scored by PSNR/SSIM of its composed output on held-out clips.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import ModelConfig, TrainConfig
from .metrics import psnr, ssim
from .numerics import no_grad
from .pipeline import ModelParams, forward
from .training import LogRow, LossWeights, SyntheticDatasetSpec, generate_clip, pretrain_image, train_video

VARIANTS = ("full", "no_token_selection", "no_mask_activation", "no_rfc", "no_migration")
ABLATE_COLUMNS = ("variant", "psnr_mean", "ssim_mean", "final_loss_rec", "final_loss_mig")
HELDOUT_SEED_OFFSET = 7919


@dataclass
class AblationRow:
    variant: str
    psnr_mean: float
    ssim_mean: float
    final_loss_rec: float
    final_loss_mig: float


def variant_setup(name: str, config: ModelConfig, weights: LossWeights) -> tuple[ModelConfig, LossWeights]:
    if name == "full":
        return config, weights
    if name == "no_token_selection":
        return replace(config, token_selection=False), weights
    if name == "no_mask_activation":
        return replace(config, mask_activation=False), weights
    if name == "no_rfc":
        return replace(config, use_rfc=False), weights
    if name == "no_migration":
        return config, replace(weights, mig=0.0)
    raise ValueError(f"unknown ablation variant {name!r}; choose from {', '.join(VARIANTS)}")


def heldout_spec(train: TrainConfig, clips: int) -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec.from_train_config(train, clips=clips, seed=train.seed + HELDOUT_SEED_OFFSET)


def evaluate(params: ModelParams, config: ModelConfig, spec: SyntheticDatasetSpec) -> tuple[float, float]:
    """Mean PSNR and SSIM of composed outputs over every held-out clip."""
    p_vals, s_vals = [], []
    with no_grad():
        for i in range(spec.clips):
            frames, masks = generate_clip(spec, i)
            out = forward(frames, masks, params, config).composed.data
            p_vals.append(psnr(out, frames)[1])
            s_vals.append(ssim(out, frames)[1])
    return float(np.mean(p_vals)), float(np.mean(s_vals))


def run_ablation(
    config: ModelConfig,
    train: TrainConfig,
    steps: int,
    prior_steps: Optional[int] = None,
    eval_clips: int = 8,
    variants=VARIANTS,
    on_log: Optional[Callable[[str, LogRow], None]] = None,
) -> list[AblationRow]:
    """Train the shared prior once, then each variant for ``steps`` video steps."""
    prior, _ = pretrain_image(config, train, steps if prior_steps is None else prior_steps)
    spec = heldout_spec(train, eval_clips)
    base_weights = LossWeights(train.lambda_rec, train.lambda_mig)
    rows = []
    for name in variants:
        cfg, weights = variant_setup(name, config, base_weights)
        log = (lambda row, n=name: on_log(n, row)) if on_log else None
        params, history = train_video(cfg, train, prior, weights, steps, prior_config=config, on_log=log)
        p, s = evaluate(params, cfg, spec)
        last = history[-1] if history else LogRow(0, float("nan"), float("nan"), float("nan"))
        rows.append(AblationRow(name, p, s, last.loss_rec, last.loss_mig))
    return rows


def write_ablation(rows: list[AblationRow], out) -> tuple[Path, Path]:
    out = Path(out)
    csv_path, json_path = out.with_suffix(".csv"), out.with_suffix(".json")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATE_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    # NaN losses (zero training steps) become null so the file stays strict JSON
    doc = [{k: (v if not isinstance(v, float) or math.isfinite(v) else None) for k, v in asdict(r).items()} for r in rows]
    json_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path
