"""File formats: PFM float images, PNG import/export, raw pattern arrays, CSV.

PFM files use the little-endian convention (negative scale header) and are
lossless for float32 data. 8-bit PNGs are treated as gamma-encoded sRGB and
linearized on load; 16-bit grayscale PNGs carry SLM levels (4-bit values in
the low nibble).
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .colorimetry import ColorImage, convert

_RAW_MAGIC = b"PCGHRAW1"


def write_pfm(path, data: torch.Tensor | np.ndarray) -> None:
    """Write a (H, W) or (H, W, 3) float image as little-endian PFM."""
    arr = data.detach().cpu().numpy() if torch.is_tensor(data) else np.asarray(data)
    arr = arr.astype(np.float32)
    if arr.ndim == 2:
        header = b"Pf"
        channels = 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
        channels = 3
    else:
        raise ValueError(f"PFM supports HxW or HxWx3 data, got shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")  # negative scale = little endian
        flipped = np.flipud(arr.reshape(h, w, channels))
        fh.write(flipped.astype("<f4").tobytes())


def read_pfm(path) -> torch.Tensor:
    """Read a PFM file back into a float32 tensor (H, W) or (H, W, 3)."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {path}")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline())
        endian = "<" if scale < 0 else ">"
        channels = 3 if header == b"PF" else 1
        raw = np.frombuffer(fh.read(w * h * channels * 4), dtype=f"{endian}f4")
    arr = np.flipud(raw.reshape(h, w, channels)).copy()
    if channels == 1:
        arr = arr[..., 0]
    return torch.from_numpy(arr)


def write_png_srgb(path, linear: torch.Tensor) -> None:
    """Save a linear-sRGB (H, W, 3) image as a gamma-encoded 8-bit PNG."""
    img = ColorImage(linear.detach().to(torch.float64).clamp(0.0, None), "srgb-linear")
    encoded = convert(img, "srgb").data.clamp(0.0, 1.0)
    arr = (encoded.numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png_linear(path) -> torch.Tensor:
    """Load an 8-bit PNG as linear sRGB float64 (H, W, 3)."""
    img = Image.open(path).convert("RGB")
    arr = torch.from_numpy(np.asarray(img)).to(torch.float64) / 255.0
    return convert(ColorImage(arr, "srgb"), "srgb-linear").data


def read_png_gray(path) -> torch.Tensor:
    """Load a grayscale PNG (any depth) as float64 in [0, 1]."""
    img = Image.open(path)
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    peak = 65535.0 if arr.dtype == np.uint16 or arr.dtype == np.int32 else 255.0
    return torch.from_numpy(arr.astype(np.float64)) / peak


def save_pattern_png(path, levels: torch.Tensor) -> None:
    """Store integer SLM levels in a 16-bit grayscale PNG (values in the low nibble)."""
    arr = levels.detach().cpu().numpy()
    if arr.min() < 0 or arr.max() > 15:
        raise ValueError("pattern levels must be 4-bit (0..15)")
    Image.fromarray(np.round(arr).astype(np.uint16), mode="I;16").save(path)


def load_pattern_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path)).astype(np.int64) & 0xF
    return torch.from_numpy(arr)


def save_raw_pattern(path, data: torch.Tensor, pitch: float) -> None:
    """Raw little-endian float64 array with a small dims+pitch header."""
    arr = data.detach().cpu().numpy().astype("<f8")
    if arr.ndim != 2:
        raise ValueError("raw pattern files hold one 2D array")
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<IId", arr.shape[0], arr.shape[1], pitch))
        fh.write(arr.tobytes())


def load_raw_pattern(path) -> tuple[torch.Tensor, float]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_RAW_MAGIC))
        if magic != _RAW_MAGIC:
            raise ValueError(f"not a raw pattern file: {path}")
        h, w, pitch = struct.unpack("<IId", fh.read(16))
        arr = np.frombuffer(fh.read(h * w * 8), dtype="<f8").reshape(h, w).copy()
    return torch.from_numpy(arr), pitch


def write_csv(path, header: list[str], rows: list[list]) -> None:
    """RFC-4180 CSV with a mandatory header row and repeatable float formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(c) for c in row])


def _format_cell(c):
    if isinstance(c, float):
        return format(c, ".17g")
    return c


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"empty CSV: {path}")
    return rows[0], rows[1:]


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())
