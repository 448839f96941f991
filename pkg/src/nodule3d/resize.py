"""Separable cubic resampling of 3-D arrays."""
from __future__ import annotations

import numpy as np

CUBIC_A = -0.5


def _cubic_weights(t: np.ndarray, a: float = CUBIC_A) -> np.ndarray:
    """Catmull-Rom weights for taps at offsets -1, 0, 1, 2 from floor(src)."""
    d = np.stack([1 + t, t, 1 - t, 2 - t], axis=-1)
    w = np.where(
        d <= 1,
        (a + 2) * d**3 - (a + 3) * d**2 + 1,
        a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a,
    )
    return w


def _resize_axis(arr: np.ndarray, axis: int, out: int) -> np.ndarray:
    n = arr.shape[axis]
    if n == out:
        return arr
    if out == 1:
        src = np.array([(n - 1) / 2.0])
    else:
        src = np.arange(out) * ((n - 1) / (out - 1))
    base = np.floor(src).astype(np.int64)
    t = src - base
    w = _cubic_weights(t)
    taps = np.clip(base[:, None] + np.arange(-1, 3)[None, :], 0, n - 1)
    moved = np.moveaxis(arr, axis, -1)
    gathered = moved[..., taps]  # (..., out, 4)
    res = (gathered * w).sum(axis=-1)
    return np.moveaxis(res, -1, axis).astype(arr.dtype, copy=False)


def resize_cubic3d(volume: np.ndarray, out) -> np.ndarray:
    """Resize a (D, H, W) array with align-corners Catmull-Rom interpolation.

    Taps falling outside the array are clamped to the edge voxel. Axes whose
    size already matches are returned untouched, so an identity resize is
    bit-exact.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3-D array, got shape {volume.shape}")
    out = (out,) * 3 if isinstance(out, int) else tuple(out)
    if min(volume.shape) < 2:
        raise ValueError(f"every axis needs at least 2 samples, got {volume.shape}")
    if min(out) < 1:
        raise ValueError(f"output size must be positive, got {out}")
    if volume.dtype.kind != "f":
        volume = volume.astype(np.float32)
    res = volume
    for axis in range(3):
        res = _resize_axis(res, axis, out[axis])
    return np.ascontiguousarray(res)
