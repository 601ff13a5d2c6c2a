"""Binary PPM/PGM codecs, with PNG through Pillow when it is installed."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

IMAGE_SUFFIXES = (".ppm", ".pgm", ".pnm", ".png")


class ImageReadError(ValueError):
    """An image file could not be decoded."""


def _read_pnm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    header = re.compile(rb"\s*((?:#[^\n]*\n\s*)*)(\S+)")
    fields, pos = [], 0
    while len(fields) < 4:
        m = header.match(blob, pos)
        if not m:
            raise ImageReadError(f"{path}: truncated PNM header")
        fields.append(m.group(2))
        pos = m.end()
    magic = fields[0]
    if magic not in (b"P5", b"P6"):
        raise ImageReadError(f"{path}: unsupported PNM type {magic!r}")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageReadError(f"{path}: malformed PNM header") from exc
    if maxval != 255:
        raise ImageReadError(f"{path}: only 8-bit PNM (maxval 255) is supported")
    channels = 3 if magic == b"P6" else 1
    data = blob[pos + 1 : pos + 1 + w * h * channels]
    if len(data) != w * h * channels:
        raise ImageReadError(f"{path}: PNM payload too short")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels)
    return arr


def _read_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImageReadError(f"{path}: PNG support needs Pillow (pip install dmtkit[png])") from exc
    try:
        with Image.open(path) as im:
            im = im.convert("L") if im.mode in ("L", "1", "I", "I;16") else im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise ImageReadError(f"{path}: {exc}") from exc
    return arr[:, :, None] if arr.ndim == 2 else arr


def read_image_u8(path) -> np.ndarray:
    """``H x W x C`` uint8 array, C in {1, 3}."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in (".ppm", ".pgm", ".pnm"):
            return _read_pnm(path)
        if suffix == ".png":
            return _read_png(path)
    except OSError as exc:
        raise ImageReadError(f"{path}: {exc}") from exc
    raise ImageReadError(f"{path}: unsupported image type {suffix!r}")


def read_frame(path) -> np.ndarray:
    """RGB image as ``3 x H x W`` floats in ``[0, 1]``; grey images are replicated."""
    arr = read_image_u8(path)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_hole_mask(path) -> np.ndarray:
    """``1 x H x W`` validity map; a pixel >= 128 marks a hole (0), anything darker is valid (1)."""
    arr = read_image_u8(path)
    gray = arr[:, :, 0] if arr.shape[2] == 1 else np.rint(arr @ np.array([0.299, 0.587, 0.114]))
    return (gray < 128).astype(np.float64)[None]


def to_u8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image_u8(path, arr: np.ndarray) -> None:
    """Write ``H x W`` or ``H x W x C`` uint8 data; format from the suffix."""
    path = Path(path)
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    suffix = path.suffix.lower()
    if suffix in (".ppm", ".pgm", ".pnm"):
        if arr.ndim == 2 and suffix == ".ppm":
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        if arr.ndim == 3 and suffix == ".pgm":
            raise ValueError(f"{path}: cannot store a colour image as PGM")
        magic = b"P6" if arr.ndim == 3 else b"P5"
        h, w = arr.shape[:2]
        path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + arr.tobytes())
        return
    if suffix == ".png":
        from PIL import Image

        Image.fromarray(arr).save(path)
        return
    raise ValueError(f"{path}: unsupported image type {suffix!r}")


def write_frame(path, frame: np.ndarray) -> None:
    write_image_u8(path, to_u8(frame).transpose(1, 2, 0))


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        raise ImageReadError(f"{folder}: not a directory")
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
