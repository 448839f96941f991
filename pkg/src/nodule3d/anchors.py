"""Reference anchor lattice over the detection head grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SIZES = (5.0, 10.0, 20.0)


@dataclass(frozen=True)
class AnchorSpec:
    sizes: tuple[float, ...] = DEFAULT_SIZES
    stride: int = 8

    def __post_init__(self):
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        if any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"anchor sizes must be strictly increasing: {self.sizes}")

    def generate(self, grid_shape) -> np.ndarray:
        return anchor_grid(grid_shape, self.stride, self.sizes)


def anchor_grid(grid_shape, stride: int, sizes=DEFAULT_SIZES) -> np.ndarray:
    """Anchors as an (A, gD, gH, gW, 4) array of (z, y, x, d).

    Cell ``i`` is centred at ``(i + 0.5) * stride`` on each axis. The layout
    matches the head outputs, whose channel axis indexes the anchor size.
    """
    if stride <= 0:
        raise ValueError("stride must be positive")
    gd, gh, gw = grid_shape
    cz = (np.arange(gd) + 0.5) * stride
    cy = (np.arange(gh) + 0.5) * stride
    cx = (np.arange(gw) + 0.5) * stride
    zz, yy, xx = np.meshgrid(cz, cy, cx, indexing="ij")
    out = np.empty((len(sizes), gd, gh, gw, 4), dtype=np.float64)
    for a, size in enumerate(sizes):
        out[a, ..., 0], out[a, ..., 1], out[a, ..., 2] = zz, yy, xx
        out[a, ..., 3] = size
    return out
