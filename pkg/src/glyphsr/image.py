"""Raster conventions and PNG round-tripping.

Every image in this package is a float64 numpy array of shape (H, W, C)
with C in {1, 3} and values in [-1, 1]. 8-bit PNG files map to that range
via v / 127.5 - 1.
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import IOFailure, ShapeMismatch


def assert_image(img: np.ndarray) -> None:
    """Validate the (H, W, C) raster contract; raises ShapeMismatch."""
    if not isinstance(img, np.ndarray) or img.ndim != 3:
        raise ShapeMismatch(f"expected (H, W, C) array, got {getattr(img, 'shape', type(img))}")
    if img.shape[2] not in (1, 3):
        raise ShapeMismatch(f"channels must be 1 or 3, got {img.shape[2]}")
    if not np.all(np.isfinite(img)):
        raise ShapeMismatch("image contains non-finite values")


def new_image(height: int, width: int, channels: int = 1, fill: float = 0.0) -> np.ndarray:
    return np.full((height, width, channels), fill, dtype=np.float64)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8, rounding to the nearest code."""
    v = np.clip(img, -1.0, 1.0)
    return np.round((v + 1.0) * 127.5).astype(np.uint8)


def from_uint8(u: np.ndarray) -> np.ndarray:
    v = u.astype(np.float64) / 127.5 - 1.0
    if v.ndim == 2:
        v = v[:, :, None]
    return v


def save_image(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an image as an 8-bit PNG (mode L for 1 channel, RGB for 3)."""
    assert_image(img)
    u = to_uint8(img)
    if u.shape[2] == 1:
        pil = Image.fromarray(u[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(u, mode="RGB")
    try:
        pil.save(path, format="PNG")
    except OSError as e:
        raise IOFailure(f"cannot write {path}: {e}") from e


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Read an 8-bit PNG into the [-1, 1] float convention."""
    try:
        with Image.open(path) as pil:
            if pil.mode not in ("L", "RGB"):
                pil = pil.convert("RGB" if pil.mode in ("RGBA", "P") else "L")
            u = np.asarray(pil)
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from e
    return from_uint8(u)


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized cross-correlation of two equal-shape arrays in [-1, 1].

    Returns 0 when either input is constant (zero variance).
    """
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    af = a.astype(np.float64).ravel() - a.mean()
    bf = b.astype(np.float64).ravel() - b.mean()
    denom = np.linalg.norm(af) * np.linalg.norm(bf)
    if denom == 0.0:
        return 0.0
    return float(np.dot(af, bf) / denom)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for the [-1, 1] value range."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(4.0 / mse)
