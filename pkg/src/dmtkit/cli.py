"""``dmtkit`` command line: bench, train, inpaint, eval, genmask, ablate.

Exit status is 0 on success, 1 for a usage error (bad flags, missing
arguments) and 2 for a data error (unreadable images, bad checkpoints or
configs, mismatched inputs).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .ablate import ABLATE_COLUMNS, VARIANTS, run_ablation, write_ablation
from .bench import BENCH_COLUMNS, BenchSetup, run_bench, write_bench
from .config import ModelConfig, TrainConfig, load_config
from .dmt import ConfigError
from .imageio import ImageReadError, list_images, read_frame, read_hole_mask, read_image_u8, to_u8, write_image_u8
from .masking import MaskError, gen_freeform_mask, gen_stationary_mask
from .metrics import LUMA, MetricReport
from .numerics import NonFiniteError, no_grad
from .pipeline import DOWNSCALE, CheckpointError, forward, load_checkpoint, save_checkpoint
from .training import LOG_HEADER, LossWeights, TrainingError, pretrain_image, train_video

log = logging.getLogger("dmtkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

HOLE_NOTE = """\
Masks on disk: grayscale PGM/PNG, pixel >= 128 marks a HOLE (white = missing),
darker pixels are known. Internally the map is inverted to validity (1 = known).
"""

BENCH_NOTE = f"""\
Writes OUT.csv and OUT.json. CSV columns:
  {", ".join(BENCH_COLUMNS)}
N is the token count, N_valid the valid tokens entering layer 1. formula_macs
is 4*N_valid*d^2 + 2*N_valid^2*d; counted_macs is the instrumented attention
count of layer 1. stack_* sum attention over all layers at each layer's own
token count. wall_ms_* time the whole stack and layer1_ms_* the first layer
(mean and sample std over R runs after 3 warmups). The JSON holds
{{"setup", "model", "rows"}} with the same row keys.
"""

TRAIN_NOTE = f"""\
The log is CSV with header: {LOG_HEADER}
Video mode requires --prior (an image-mode checkpoint with the same L and d).
--steps 0 writes the seeded initialisation.
"""

ABLATE_NOTE = f"""\
Variants: {", ".join(VARIANTS)}. Writes OUT.csv and OUT.json with columns:
  {", ".join(ABLATE_COLUMNS)}
PSNR (dB) and SSIM are means over held-out synthetic clips of the composed output.
"""

EVAL_NOTE = """\
Prints (or writes with --out) JSON keys: psnr_per_frame, ssim_per_frame,
psnr_mean, ssim_mean, psnr_infinite, setting. Identical frames give an
infinite PSNR, reported as null with psnr_infinite=true.
"""


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ratios(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(
        prog="dmtkit",
        description="Masked video-inpainting transformer toolkit.",
        epilog=HOLE_NOTE + "\nExit status: 0 ok, 1 usage error, 2 data error.",
        formatter_class=fmt,
    )
    parser.add_argument("--version", action="version", version=f"dmtkit {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("bench", help="attention MACs and latency versus mask ratio", epilog=BENCH_NOTE, formatter_class=fmt)
    p.add_argument("--config", type=Path, help="key=value config file (model keys are used)")
    p.add_argument("--ratios", type=_ratios, default=[0.0, 0.1, 0.3, 0.6, 0.9], help="comma-separated hole ratios in [0, 0.95]")
    p.add_argument("-R", "--repetitions", type=int, default=20)
    p.add_argument("-T", "--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True, help="output stem; .csv and .json are written")

    p = sub.add_parser("train", help="train the image prior or the video model", epilog=TRAIN_NOTE, formatter_class=fmt)
    p.add_argument("mode", choices=("image", "video"))
    p.add_argument("--config", type=Path)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int)
    p.add_argument("--prior", type=Path, help="image checkpoint (video mode)")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="CSV training log (default: OUT with .csv suffix)")

    p = sub.add_parser("inpaint", help="fill holes in a folder of frames", epilog=HOLE_NOTE, formatter_class=fmt)
    p.add_argument("--frames", type=Path, required=True, help="folder of PPM/PGM/PNG frames")
    p.add_argument("--masks", type=Path, required=True, help="folder of hole masks, same count and order")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output folder; file names and formats are kept")

    p = sub.add_parser("eval", help="PSNR/SSIM between two frame folders", epilog=EVAL_NOTE, formatter_class=fmt)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--target", type=Path, required=True)
    p.add_argument("--setting", default="", help="free-text mask setting stored in the report")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("genmask", help="write seeded hole masks", epilog=HOLE_NOTE, formatter_class=fmt)
    p.add_argument("--type", dest="kind", choices=("freeform", "stationary"), default="freeform")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--ratio", type=float, default=0.4, help="hole share (freeform) or rectangle area (stationary)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("pgm", "png"), default="pgm")
    p.add_argument("--out", type=Path, required=True, help="output folder")

    p = sub.add_parser("ablate", help="toy component ablation", epilog=ABLATE_NOTE, formatter_class=fmt)
    p.add_argument("--config", type=Path)
    p.add_argument("--steps", type=int, default=200, help="video steps per variant")
    p.add_argument("--prior-steps", type=int, help="image prior steps (default: --steps)")
    p.add_argument("--eval-clips", type=int, default=8)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, required=True, help="output stem; .csv and .json are written")
    return parser


def _configs(path, seed=None) -> tuple[ModelConfig, TrainConfig]:
    model, train = load_config(path) if path else (ModelConfig(), TrainConfig())
    if seed is not None:
        train = replace(train, seed=seed)
    return model, train


def _non_negative(value: int, flag: str) -> None:
    if value < 0:
        raise UsageError(f"{flag} must be >= 0, got {value}")


def cmd_bench(args) -> int:
    model, _ = _configs(args.config)
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    if args.height % DOWNSCALE or args.width % DOWNSCALE or args.frames < 1:
        raise UsageError(f"--height/--width must be multiples of {DOWNSCALE} and -T >= 1")
    setup = BenchSetup(args.frames, args.height, args.width, args.repetitions, args.seed)
    rows = run_bench(model, args.ratios, setup)
    csv_path, json_path = write_bench(rows, args.out, setup, model)
    for r in rows:
        print(f"ratio {r.mask_ratio:.2f}  N'={r.N_valid:5d}  attn MACs {r.counted_macs:.4g}  stack {r.wall_ms_mean:.1f} ms  layer1 {r.layer1_ms_mean:.1f} ms")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def _log_writer(path: Path, tag: str = ""):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = open(path, "w", encoding="utf-8")
    fh.write(LOG_HEADER + "\n")

    def write(row):
        fh.write(row.csv() + "\n")
        if row.step % 50 == 0:
            log.info("%sstep %d loss %.5g", tag, row.step, row.loss_total)

    return fh, write


def cmd_train(args) -> int:
    _non_negative(args.steps, "--steps")
    if args.mode == "video" and args.prior is None:
        raise UsageError("train video: --prior CHECKPOINT is required")
    model, train = _configs(args.config, args.seed)
    log_path = args.log or args.out.with_suffix(".csv")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    fh, on_log = _log_writer(log_path)
    with fh:
        if args.mode == "image":
            params, _ = pretrain_image(model, train, args.steps, on_log=on_log)
        else:
            prior, prior_config = load_checkpoint(args.prior)
            if args.config is None:
                model = prior_config
            weights = LossWeights(train.lambda_rec, train.lambda_mig)
            params, _ = train_video(model, train, prior, weights, args.steps, prior_config=prior_config, on_log=on_log)
    save_checkpoint(params, model, args.out)
    print(f"wrote {args.out} and {log_path}")
    return EXIT_OK


def _paired_images(frames_dir: Path, masks_dir: Path) -> list[tuple[Path, Path]]:
    frames, masks = list_images(frames_dir), list_images(masks_dir)
    if not frames:
        raise DataError(f"{frames_dir}: no images found")
    if len(frames) != len(masks):
        raise DataError(f"frame/mask count mismatch: {len(frames)} frames vs {len(masks)} masks")
    return list(zip(frames, masks))


def _write_like(src: Path, dst: Path, frame: np.ndarray, channels: int) -> None:
    img = to_u8(frame).transpose(1, 2, 0)
    if channels == 1:
        img = np.rint(img @ LUMA).astype(np.uint8)
    write_image_u8(dst, img)


def cmd_inpaint(args) -> int:
    pairs = _paired_images(args.frames, args.masks)
    frames, masks, channels = [], [], []
    for fp, mp in pairs:
        frames.append(read_frame(fp))
        channels.append(read_image_u8(fp).shape[2])
        masks.append(read_hole_mask(mp))
        if frames[-1].shape[1:] != frames[0].shape[1:]:
            raise DataError(f"{fp}: size {frames[-1].shape[1:]} differs from {frames[0].shape[1:]}")
        if masks[-1].shape[1:] != frames[-1].shape[1:]:
            raise DataError(f"{mp}: mask size {masks[-1].shape[1:]} differs from frame size {frames[-1].shape[1:]}")
    h, w = frames[0].shape[1:]
    if h % DOWNSCALE or w % DOWNSCALE:
        raise DataError(f"frame size {h}x{w} is not divisible by {DOWNSCALE}")
    params, config = load_checkpoint(args.checkpoint)
    with no_grad():
        out = forward(np.stack(frames), np.stack(masks), params, config).composed.data
    args.out.mkdir(parents=True, exist_ok=True)
    for (fp, _), frame, ch in zip(pairs, out, channels):
        _write_like(fp, args.out / fp.name, frame, ch)
    print(f"wrote {len(pairs)} frames to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds, targets = list_images(args.pred), list_images(args.target)
    if not preds or len(preds) != len(targets):
        raise DataError(f"need equal, non-zero image counts: {len(preds)} vs {len(targets)}")
    a = np.stack([read_frame(p) for p in preds])
    b = np.stack([read_frame(p) for p in targets])
    try:
        report = MetricReport.compute(a, b, mask_setting=args.setting, frames=len(preds))
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_genmask(args) -> int:
    if args.count < 1 or args.height < 1 or args.width < 1:
        raise UsageError("--count, --height and --width must be positive")
    args.out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed * 1009 + i
        if args.kind == "freeform":
            valid = gen_freeform_mask(args.height, args.width, args.ratio, seed)
        else:
            valid = gen_stationary_mask(args.height, args.width, args.ratio, seed)
        hole = np.where(valid[0] == 0, 255, 0).astype(np.uint8)
        write_image_u8(args.out / f"mask_{i:04d}.{args.format}", hole)
    print(f"wrote {args.count} masks to {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    _non_negative(args.steps, "--steps")
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise UsageError(f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    model, train = _configs(args.config, args.seed)
    rows = run_ablation(model, train, args.steps, args.prior_steps, args.eval_clips, variants)
    csv_path, json_path = write_ablation(rows, args.out)
    for r in rows:
        print(f"{r.variant:20s} PSNR {r.psnr_mean:7.3f} dB  SSIM {r.ssim_mean:.4f}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


COMMANDS = {
    "bench": cmd_bench,
    "train": cmd_train,
    "inpaint": cmd_inpaint,
    "eval": cmd_eval,
    "genmask": cmd_genmask,
    "ablate": cmd_ablate,
}

DATA_ERRORS = (
    DataError,
    ImageReadError,
    CheckpointError,
    MaskError,
    ConfigError,
    TrainingError,
    NonFiniteError,
    OSError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        print(f"try '{parser.prog} --help'", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dmtkit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"dmtkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
