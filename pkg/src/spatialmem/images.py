"""Image conversion and file helpers shared by rendering, CLI and service."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(rgb: np.ndarray) -> np.ndarray:
    """Float [0,1] (or already-uint8) image to uint8."""
    if rgb.dtype == np.uint8:
        return rgb
    return np.clip(np.rint(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def png_bytes(rgb: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb)).save(buf, format="PNG")
    return buf.getvalue()


def mask_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(mask, dtype=bool)).save(buf, format="PNG", bits=1)
    return buf.getvalue()


def save_png(rgb: np.ndarray, path) -> None:
    Path(path).write_bytes(png_bytes(rgb))


def load_png(path) -> np.ndarray:
    """Load a PNG as float32 RGB in [0,1]."""
    img = np.asarray(Image.open(path).convert("RGB"))
    return img.astype(np.float32) / 255.0


def save_depth_pfm(depth: np.ndarray, path) -> None:
    """Write a depth map as a grayscale little-endian PFM (rows bottom-up)."""
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise ValueError("depth must be 2-D")
    header = f"Pf\n{depth.shape[1]} {depth.shape[0]}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + depth[::-1].tobytes())


def load_depth_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"Pf":
        raise ValueError("not a grayscale PFM file")
    width, height = (int(v) for v in parts[1].split())
    scale = float(parts[2])
    data = np.frombuffer(parts[3], dtype="<f4" if scale < 0 else ">f4", count=width * height)
    return data.reshape(height, width)[::-1].astype(np.float32)
