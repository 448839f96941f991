"""Attention gates and residual building blocks for 3-D feature maps.

Every gate produces a map ``A`` in (0, 1) and a refined feature map
``A * F``. The fully convolutional channel gate keeps a 3x3x3 pooled
descriptor instead of collapsing to 1x1x1; the cross-sectional spatial gate
runs separate 2-D convolutions over the axial, coronal and sagittal stacks of
a one-channel projection.
"""
from __future__ import annotations

import numpy as np

from . import functional as F
from .nn import (
    Activation,
    BatchNorm3d,
    Conv2d,
    Conv3d,
    ConvBNAct,
    ConvTranspose3d,
    Linear,
    MaxPool3d,
    Module,
)
from .tensor import ShapeError, Tensor, concat, mul, permute, reshape

ATTENTION_MODES = (
    "none",
    "proposed_ca",
    "proposed_sa",
    "proposed_ca_sa",
    "se",
    "cbam_ca",
    "cbam_sa",
    "cbam_ca_sa",
)

# (N, D, H, W) -> 2-D stack whose channel axis is the named plane's normal
PLANE_ORDER = {
    "axial": (0, 1, 2, 3),
    "coronal": (0, 2, 1, 3),
    "sagittal": (0, 3, 1, 2),
}


def to_view(e: Tensor, plane: str) -> Tensor:
    """Reinterpret an (N, D, H, W) map as a 2-D stack for ``plane``."""
    order = PLANE_ORDER[plane]
    return e if plane == "axial" else permute(e, order)


def from_view(v: Tensor, plane: str) -> Tensor:
    """Inverse of :func:`to_view`."""
    if plane == "axial":
        return v
    return permute(v, tuple(int(i) for i in np.argsort(PLANE_ORDER[plane])))


class ChannelAttention(Module):
    """Adaptive-average-pool to 3^3, dense 3^3 conv without padding, sigmoid."""

    pooled = 3

    def __init__(self, channels: int, rng=None):
        super().__init__()
        self.conv = Conv3d(channels, channels, self.pooled, rng=rng)

    def attention_map(self, x: Tensor) -> Tensor:
        if min(x.shape[2:]) < self.pooled:
            raise ShapeError(f"channel attention needs spatial dims >= 3, got {x.shape[2:]}")
        return F.sigmoid(self.conv(F.adaptive_avg_pool3d(x, self.pooled)))

    def forward(self, x):
        return mul(self.attention_map(x), x)


class CrossSectionSpatialAttention(Module):
    """Spatial gate built from axial, coronal and sagittal 2-D convolutions.

    The plane convolutions treat the slice axis as channels, so their weights
    depend on the feature-map extent given at construction.
    """

    def __init__(self, channels: int, spatial, rng=None):
        super().__init__()
        D, H, W = F._triple(spatial)
        self.spatial = (D, H, W)
        self.project_in = Conv3d(channels, 1, 1, rng=rng)
        self.axial = Conv2d(D, D, 3, padding=1, rng=rng)
        self.coronal = Conv2d(H, H, 3, padding=1, rng=rng)
        self.sagittal = Conv2d(W, W, 3, padding=1, rng=rng)
        self.project_out = Conv3d(3, channels, 1, rng=rng)

    def attention_map(self, x: Tensor) -> Tensor:
        N = x.shape[0]
        if x.shape[2:] != self.spatial:
            raise ShapeError(f"built for spatial {self.spatial}, got {x.shape[2:]}")
        e = self.project_in(x)
        e = reshape(e, (N,) + self.spatial)
        branches = []
        for plane in ("axial", "coronal", "sagittal"):
            conv = getattr(self, plane)
            v = from_view(conv(to_view(e, plane)), plane)
            branches.append(reshape(v, (N, 1) + self.spatial))
        stacked = concat(branches, axis=1)
        return F.sigmoid(self.project_out(stacked))

    def forward(self, x):
        return mul(self.attention_map(x), x)


class SEAttention(Module):
    """Global average pool, C -> C/r -> C MLP, sigmoid."""

    def __init__(self, channels: int, reduction: int = 16, act: str = "modified_relu", rng=None):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        self.fc1 = Linear(channels, channels // reduction, rng=rng)
        self.act = Activation(act)
        self.fc2 = Linear(channels // reduction, channels, rng=rng)

    def attention_map(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        desc = x.mean(axis=(2, 3, 4))
        logits = self.fc2(self.act(self.fc1(desc)))
        return reshape(F.sigmoid(logits), (N, C, 1, 1, 1))

    def forward(self, x):
        return mul(self.attention_map(x), x)


class CBAMChannelAttention(Module):
    """Shared MLP over average- and max-pooled descriptors, summed."""

    def __init__(self, channels: int, reduction: int = 16, act: str = "modified_relu", rng=None):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        self.fc1 = Linear(channels, channels // reduction, rng=rng)
        self.act = Activation(act)
        self.fc2 = Linear(channels // reduction, channels, rng=rng)

    def _mlp(self, v):
        return self.fc2(self.act(self.fc1(v)))

    def attention_map(self, x: Tensor) -> Tensor:
        N, C = x.shape[:2]
        avg = x.mean(axis=(2, 3, 4))
        mx = reshape(F.adaptive_max_pool3d(x, 1), (N, C))
        return reshape(F.sigmoid(self._mlp(avg) + self._mlp(mx)), (N, C, 1, 1, 1))

    def forward(self, x):
        return mul(self.attention_map(x), x)


class CBAMSpatialAttention(Module):
    """Channel-wise mean map plus max map, 3^3 conv to one channel, sigmoid."""

    def __init__(self, kernel: int = 3, rng=None):
        super().__init__()
        self.conv = Conv3d(1, 1, kernel, padding=kernel // 2, rng=rng)

    def attention_map(self, x: Tensor) -> Tensor:
        pooled = F.channel_pool(x, "avg") + F.channel_pool(x, "max")
        return F.sigmoid(self.conv(pooled))

    def forward(self, x):
        return mul(self.attention_map(x), x)


# -- functional entry points ---------------------------------------------
def _gate(block, x):
    a = block.attention_map(x)
    return a, mul(a, x)


def channel_attention(x: Tensor, params: ChannelAttention):
    return _gate(params, x)


def spatial_attention(x: Tensor, params: CrossSectionSpatialAttention):
    return _gate(params, x)


def se_channel_attention(x: Tensor, params: SEAttention):
    return _gate(params, x)


def cbam_channel_attention(x: Tensor, params: CBAMChannelAttention):
    return _gate(params, x)


def cbam_spatial_attention(x: Tensor, params: CBAMSpatialAttention):
    return _gate(params, x)


def build_attention(mode: str, channels: int, spatial, reduction=16, act="modified_relu", rng=None) -> list[Module]:
    """Gates to apply in order (channel first, then spatial)."""
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}")
    gates: list[Module] = []
    if mode in ("proposed_ca", "proposed_ca_sa"):
        gates.append(ChannelAttention(channels, rng=rng))
    if mode in ("proposed_sa", "proposed_ca_sa"):
        gates.append(CrossSectionSpatialAttention(channels, spatial, rng=rng))
    if mode == "se":
        gates.append(SEAttention(channels, reduction, act, rng=rng))
    if mode in ("cbam_ca", "cbam_ca_sa"):
        gates.append(CBAMChannelAttention(channels, reduction, act, rng=rng))
    if mode in ("cbam_sa", "cbam_ca_sa"):
        gates.append(CBAMSpatialAttention(3, rng=rng))
    return gates


# -- residual blocks -----------------------------------------------------
class ZoomIn(Module):
    """Transposed conv x2 -> batch norm -> activation -> max pool /2.

    Doubling then halving restores every extent, so the output has the input
    shape and is added into the residual sum by the caller.
    """

    def __init__(self, channels: int, act: str = "modified_relu", rng=None):
        super().__init__()
        self.up = ConvTranspose3d(channels, channels, 2, 2, rng=rng)
        self.bn = BatchNorm3d(channels)
        self.act = Activation(act)
        self.pool = MaxPool3d(2, 2)

    def forward(self, x):
        return self.pool(self.act(self.bn(self.up(x))))


def zoom_in_path(x: Tensor, params: ZoomIn) -> Tensor:
    return params(x)


class ResidualUnit(Module):
    """1x1x1 -> grouped 3x3x3 -> 1x1x1 bottleneck with an identity skip.

    ``out = act(attention(branch(x)) + x [+ zoom_in(x)])``.
    """

    def __init__(
        self,
        channels: int,
        spatial,
        groups: int = 32,
        act: str = "modified_relu",
        attention: str = "none",
        reduction: int = 16,
        zoom_in: bool = False,
        rng=None,
    ):
        super().__init__()
        self.conv1 = ConvBNAct(channels, channels, 1, act=act, rng=rng)
        self.conv2 = ConvBNAct(channels, channels, 3, padding=1, groups=groups, act=act, rng=rng)
        self.conv3 = ConvBNAct(channels, channels, 1, act=None, rng=rng)
        self.attention_mode = attention
        self.gates = build_attention(attention, channels, spatial, reduction, act, rng=rng)
        self.zoom = ZoomIn(channels, act, rng=rng) if zoom_in else None
        self.act = Activation(act)

    def branch(self, x):
        return self.conv3(self.conv2(self.conv1(x)))

    def forward(self, x):
        y = self.branch(x)
        for gate in self.gates:
            y = gate(y)
        y = y + x
        if self.zoom is not None:
            y = y + self.zoom(x)
        return self.act(y)


def residual_unit(x: Tensor, params: ResidualUnit) -> Tensor:
    return params(x)


class ResidualBlock(Module):
    """A run of residual units at fixed width, with an optional 1x1x1 entry
    projection when the incoming width differs."""

    def __init__(self, cin, channels, units, spatial, groups, act, attention, reduction=16, zoom_in=False, rng=None):
        super().__init__()
        self.entry = ConvBNAct(cin, channels, 1, act=act, rng=rng) if cin != channels else None
        self.units = [
            ResidualUnit(channels, spatial, groups, act, attention, reduction, zoom_in, rng=rng)
            for _ in range(units)
        ]

    def forward(self, x):
        if self.entry is not None:
            x = self.entry(x)
        for unit in self.units:
            x = unit(x)
        return x


def proposed_channel_param_count(c: int) -> int:
    return 27 * c * c + c


def se_param_count(c: int, r: int) -> int:
    return 2 * c * c // r + c // r + c
