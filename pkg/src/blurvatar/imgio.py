"""Image I/O: 8-bit PNG plus an exact float dump for bit-level tests.

Float dump layout: magic b"BAL1", then width and height as little-endian
int32, then height x width x 3 float32 values row-major. In-memory images are
float64 arrays in [0, 1]; `quantize_f32` snaps them onto the float32 grid so
that averaging stored subframes reproduces a stored blur composite bitwise.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image as PILImage

from .errors import DataError, ParameterError

MAGIC = b"BAL1"


def quantize_f32(img: np.ndarray) -> np.ndarray:
    """Round a float64 image onto the float32 grid, keeping float64 storage."""
    return np.float32(img).astype(np.float64)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * img), 0, 255).astype(np.uint8)


def from_uint8(img: np.ndarray) -> np.ndarray:
    return img.astype(np.float64) / 255.0


def write_png(path: str, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"expected (H, W, 3) image, got {img.shape}")
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path: str) -> np.ndarray:
    """Load a PNG as float64 in [0, 1]."""
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DataError(f"missing image file: {path}") from exc
    return from_uint8(arr)


def write_f32(path: str, img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ParameterError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<ii", w, h))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_f32(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise DataError(f"{path}: bad magic {magic!r}")
            w, h = struct.unpack("<ii", fh.read(8))
            data = np.frombuffer(fh.read(w * h * 3 * 4), dtype="<f4")
    except FileNotFoundError as exc:
        raise DataError(f"missing float dump: {path}") from exc
    if data.size != w * h * 3:
        raise DataError(f"{path}: truncated float dump")
    return data.reshape(h, w, 3).astype(np.float64)
