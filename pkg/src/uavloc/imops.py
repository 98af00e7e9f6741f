"""Shared raster plumbing: grayscale conversion, bilinear sampling, resizing,
affine warping, and block averaging. All sampling is float64-exact bilinear
with edge clamping; callers are responsible for bounds semantics.
"""

from __future__ import annotations

import numpy as np


def to_gray(img: np.ndarray) -> np.ndarray:
    """RGB or gray array to float32 grayscale in the 0..255 range."""
    if img.ndim == 2:
        return img.astype(np.float32)
    if img.ndim == 3 and img.shape[2] == 3:
        w = np.array([0.299, 0.587, 0.114], dtype=np.float32)
        return img.astype(np.float32) @ w
    raise ValueError(f"expected HxW or HxWx3 array, got shape {img.shape}")


def bilinear_sample(img: np.ndarray, x, y):
    """Sample ``img`` at fractional pixel coordinates with edge clamping.

    Works for 2D arrays and for HxWxC arrays (samples every channel).
    Coordinates outside the raster are clamped to the edge pixels, so the
    caller decides what out-of-bounds means.
    """
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(h - 2, 0))
    fx = np.clip(x - x0, 0.0, 1.0)
    fy = np.clip(y - y0, 0.0, 1.0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    a = img[y0, x0]
    b = img[y0, x1]
    c = img[y1, x0]
    d = img[y1, x1]
    return (
        a * (1 - fx) * (1 - fy)
        + b * fx * (1 - fy)
        + c * (1 - fx) * fy
        + d * fx * fy
    )


def resize_bilinear(img: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Resize with center-aligned bilinear sampling (separable, edge-clamped)."""
    h, w = img.shape[:2]
    ys = np.clip((np.arange(out_rows, dtype=np.float64) + 0.5) * h / out_rows - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_cols, dtype=np.float64) + 0.5) * w / out_cols - 0.5, 0, w - 1)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    fy = (ys - y0)
    fx = (xs - x0)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3:
        fy_r = fy[:, None, None]
        fx_c = fx[None, :, None]
    else:
        fy_r = fy[:, None]
        fx_c = fx[None, :]
    rows = a[y0] * (1 - fy_r) + a[y1] * fy_r
    return rows[:, x0] * (1 - fx_c) + rows[:, x1] * fx_c


def block_sum(img: np.ndarray, factor: int) -> np.ndarray:
    """Sum over factor x factor blocks; trailing partial blocks sum what exists."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = img.shape[:2]
    oh = -(-h // factor)
    ow = -(-w // factor)
    pad_h = oh * factor - h
    pad_w = ow * factor - w
    a = np.asarray(img, dtype=np.float64)
    if pad_h or pad_w:
        pads = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (a.ndim - 2)
        a = np.pad(a, pads)
    a = a.reshape((oh, factor, ow, factor) + a.shape[2:])
    return a.sum(axis=(1, 3))


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    """Block-average downsampling by an integer factor; a trailing partial
    block is averaged over the cells it actually contains."""
    if factor == 1:
        return np.asarray(img, dtype=np.float64).copy()
    counts = block_sum(np.ones(img.shape[:2]), factor)
    if img.ndim == 3:
        counts = counts[..., None]
    return block_sum(img, factor) / counts


def affine_warp(
    img: np.ndarray,
    linear: np.ndarray,
    center_in: tuple[float, float],
    center_out: tuple[float, float],
    out_shape: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Warp ``img`` by ``dst = linear @ (src - center_in) + center_out``.

    Inverse-maps every output pixel and samples bilinearly. Output pixels
    whose source falls outside the image are zero and marked invalid.

    Returns:
        (warped float32 array, boolean validity mask), both ``out_shape``.
    """
    oh, ow = out_shape
    inv = np.linalg.inv(np.asarray(linear, dtype=np.float64))
    gx, gy = np.meshgrid(
        np.arange(ow, dtype=np.float64) - center_out[0],
        np.arange(oh, dtype=np.float64) - center_out[1],
    )
    sx = inv[0, 0] * gx + inv[0, 1] * gy + center_in[0]
    sy = inv[1, 0] * gx + inv[1, 1] * gy + center_in[1]
    h, w = img.shape[:2]
    valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = np.zeros(out_shape if img.ndim == 2 else out_shape + img.shape[2:], dtype=np.float32)
    out[valid] = bilinear_sample(img, sx[valid], sy[valid])
    return out, valid
