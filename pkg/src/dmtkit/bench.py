"""Attention cost and latency of the masked stack as a function of the mask ratio."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .dmt import (
    attention_macs,
    dmt_layer,
    dmt_stack,
    init_layer_params,
    initial_state,
    log_attention_macs,
    valid_token_count,
)
from .masking import MaskError, gen_freeform_mask
from .numerics import Tensor, no_grad

BENCH_COLUMNS = (
    "mask_ratio",
    "N",
    "N_valid",
    "formula_macs",
    "counted_macs",
    "stack_formula_macs",
    "stack_counted_macs",
    "wall_ms_mean",
    "wall_ms_std",
    "layer1_ms_mean",
    "layer1_ms_std",
)
MAX_RATIO = 0.95
WARMUP = 3


@dataclass
class BenchRow:
    mask_ratio: float
    N: int
    N_valid: int  # valid tokens entering the first layer
    formula_macs: int  # first-layer attention, 4N'd^2 + 2N'^2 d
    counted_macs: int  # first-layer attention, instrumented
    stack_formula_macs: int  # all layers, each at its own N'
    stack_counted_macs: int
    wall_ms_mean: float  # whole stack
    wall_ms_std: float
    layer1_ms_mean: float  # first layer only, where the input mask is still sparse
    layer1_ms_std: float


@dataclass
class BenchSetup:
    T: int = 8
    H: int = 64
    W: int = 64
    repetitions: int = 20
    seed: int = 0

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        return (self.T, self.H // 4, self.W // 4)


def bench_masks(setup: BenchSetup, ratio: float) -> np.ndarray:
    """Seeded free-form masks at token-grid resolution, one per frame."""
    if not 0.0 <= ratio <= MAX_RATIO:
        raise MaskError(f"mask ratio {ratio} outside [0, {MAX_RATIO}]")
    t, hg, wg = setup.grid_dims
    base = setup.seed * 1009 + int(round(ratio * 1000))
    return np.stack([gen_freeform_mask(hg, wg, ratio, seed=base + 31 * i) for i in range(t)])


def bench_row(config: ModelConfig, setup: BenchSetup, ratio: float, clock=time.perf_counter) -> BenchRow:
    rng = np.random.default_rng(setup.seed)
    grid_dims = setup.grid_dims
    dmt_config = config.dmt(grid_dims)
    layers = [init_layer_params(dmt_config, rng) for _ in range(config.L)]
    masks = bench_masks(setup, ratio)
    features = Tensor(rng.normal(size=(grid_dims[0], config.d, *grid_dims[1:])))
    state = initial_state(features, masks)
    n_valid = valid_token_count(masks)

    with no_grad():
        with log_attention_macs() as log:
            dmt_stack(state, layers, dmt_config)
        for _ in range(WARMUP - 1):
            dmt_stack(state, layers, dmt_config)
        times, first = [], []
        for _ in range(setup.repetitions):
            t0 = clock()
            dmt_stack(state, layers, dmt_config)
            times.append((clock() - t0) * 1000.0)
        for _ in range(WARMUP):
            dmt_layer(state, layers[0], dmt_config)
        for _ in range(setup.repetitions):
            t0 = clock()
            dmt_layer(state, layers[0], dmt_config)
            first.append((clock() - t0) * 1000.0)

    return BenchRow(
        mask_ratio=float(ratio),
        N=int(np.prod(grid_dims)),
        N_valid=n_valid,
        formula_macs=attention_macs(n_valid, config.d),
        counted_macs=log[0][1].macs,
        stack_formula_macs=sum(attention_macs(n, config.d) for n, _ in log),
        stack_counted_macs=sum(c.macs for _, c in log),
        wall_ms_mean=_mean(times),
        wall_ms_std=_std(times),
        layer1_ms_mean=_mean(first),
        layer1_ms_std=_std(first),
    )


def _mean(v) -> float:
    return float(np.mean(v))


def _std(v) -> float:
    return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0


def run_bench(config: ModelConfig, ratios: Sequence[float], setup: Optional[BenchSetup] = None) -> list[BenchRow]:
    setup = setup or BenchSetup()
    if setup.repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for r in ratios:
        if not (math.isfinite(r) and 0.0 <= r <= MAX_RATIO):
            raise MaskError(f"mask ratio {r} outside [0, {MAX_RATIO}]")
    return [bench_row(config, setup, r) for r in sorted(set(float(r) for r in ratios))]


def write_bench(rows: list[BenchRow], out: Path, setup: BenchSetup, config: ModelConfig) -> tuple[Path, Path]:
    """``out`` gets a ``.csv`` and a ``.json`` sibling; the JSON also records the setup."""
    out = Path(out)
    csv_path, json_path = out.with_suffix(".csv"), out.with_suffix(".json")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
    doc = {"setup": asdict(setup), "model": asdict(config), "rows": [asdict(r) for r in rows]}
    json_path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return csv_path, json_path
