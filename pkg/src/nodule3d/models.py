"""Candidate-proposal (RPN) and false-positive-reduction (FPR) networks."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .anchors import AnchorSpec
from .attention import ATTENTION_MODES, ResidualBlock
from .nn import Activation, BatchNorm3d, Conv3d, ConvBNAct, ConvTranspose3d, Dropout, Linear, MaxPool3d, Module, Sequential
from .tensor import Tensor, concat

ENCODER_DOWNSAMPLE = 32  # stem pool + four block pools
CLS_PRIOR = 0.01
HEAD_STD = 0.01


class ConfigError(ValueError):
    pass


@dataclass
class RpnConfig:
    stem_channels: int = 32
    widths: tuple[int, ...] = (64, 64, 64, 64)
    units: tuple[int, ...] = (2, 3, 3, 3)
    decoder_widths: tuple[int, ...] = (64, 64)
    decoder_units: tuple[int, ...] = (3, 3)
    groups: int = 32
    dropout: float = 0.3
    attention: str = "proposed_ca_sa"
    activation: str = "modified_relu"
    anchor_sizes: tuple[float, ...] = (5.0, 10.0, 20.0)
    output_stride: int = 8
    patch: int = 128
    reduction: int = 16
    skips: bool = True

    def __post_init__(self):
        for name in ("widths", "units", "decoder_widths", "decoder_units", "anchor_sizes"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if len(self.widths) != 4 or len(self.units) != 4:
            raise ConfigError("the encoder has exactly four residual blocks")
        if len(self.decoder_widths) != len(self.decoder_units):
            raise ConfigError("decoder_widths and decoder_units must align")
        stages = ENCODER_DOWNSAMPLE // self.output_stride
        if self.output_stride <= 0 or stages * self.output_stride != ENCODER_DOWNSAMPLE or stages & (stages - 1):
            raise ConfigError(f"output_stride must be a power of two dividing {ENCODER_DOWNSAMPLE}")
        if 2 ** len(self.decoder_units) != stages:
            raise ConfigError(
                f"output_stride {self.output_stride} needs {int(math.log2(stages))} decoder blocks, "
                f"got {len(self.decoder_units)}"
            )
        for w in self.widths + self.decoder_widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible by groups {self.groups}")
        if self.patch % ENCODER_DOWNSAMPLE:
            raise ConfigError(f"patch {self.patch} must be a multiple of {ENCODER_DOWNSAMPLE}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.attention!r}")
        smallest = self.patch // (ENCODER_DOWNSAMPLE // 2)  # extent seen by the last encoder block
        if self.attention.startswith("proposed_ca") and smallest < 3:
            raise ConfigError(f"patch {self.patch} leaves {smallest}^3 features, too small for proposed_ca (needs 3)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        try:
            AnchorSpec(self.anchor_sizes, self.output_stride)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def anchors(self) -> AnchorSpec:
        return AnchorSpec(self.anchor_sizes, self.output_stride)

    @property
    def grid(self) -> int:
        return self.patch // self.output_stride

    def to_dict(self) -> dict:
        return asdict(self)


class RPN(Module):
    """Encoder-decoder proposal network with per-anchor cls/reg heads.

    Decoder stages add the encoder output of matching extent to the upsampled
    features when ``config.skips`` is set.
    """

    def __init__(self, config: RpnConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c, act, p = config, config.activation, config.patch
        self.stem = [
            ConvBNAct(1, c.stem_channels, 3, padding=1, act=act, rng=rng),
            ConvBNAct(c.stem_channels, c.stem_channels, 3, padding=1, act=act, rng=rng),
        ]
        self.pool = MaxPool3d(2)
        self.encoder = []
        cin, extent = c.stem_channels, p // 2
        for w, n in zip(c.widths, c.units):
            self.encoder.append(
                ResidualBlock(cin, w, n, extent, c.groups, act, c.attention, c.reduction, rng=rng)
            )
            cin, extent = w, extent // 2
        # encoder dropout after blocks 2, 3 and 4
        self.enc_dropout = [Dropout(c.dropout, rng) for _ in range(3)]
        self.up, self.decoder = [], []
        for i, (w, n) in enumerate(zip(c.decoder_widths, c.decoder_units)):
            extent *= 2
            skip_w = c.widths[3 - i]
            up_w = skip_w if c.skips else w
            self.up.append(Sequential(ConvTranspose3d(cin, up_w, 2, 2, bias=False, rng=rng), BatchNorm3d(up_w), Activation(act)))
            self.decoder.append(
                ResidualBlock(skip_w if c.skips else w, w, n, extent, c.groups, act, c.attention, c.reduction, rng=rng)
            )
            cin = w
        self.dec_dropout = Dropout(c.dropout, rng)
        A = len(c.anchor_sizes)
        self.cls_head = Conv3d(cin, A, 1, rng=rng)
        self.reg_head = Conv3d(cin, 4 * A, 1, rng=rng)
        for head in (self.cls_head, self.reg_head):
            head.weight.data = (rng.standard_normal(head.weight.shape) * HEAD_STD).astype(np.float32)
        self.cls_head.bias.data[:] = -math.log((1 - CLS_PRIOR) / CLS_PRIOR)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        c = self.config
        if x.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (c.patch,) * 3:
            raise ConfigError(f"expected input (N, 1, {c.patch}, {c.patch}, {c.patch}), got {x.shape}")
        for conv in self.stem:
            x = conv(x)
        x = self.pool(x)
        feats = []
        for i, block in enumerate(self.encoder):
            x = block(x)
            if i >= 1:
                x = self.enc_dropout[i - 1](x)
            feats.append(x)
            x = self.pool(x)
        for i, (up, block) in enumerate(zip(self.up, self.decoder)):
            x = up(x)
            if c.skips:
                x = x + feats[3 - i]
            x = block(x)
        x = self.dec_dropout(x)
        return self.cls_head(x), self.reg_head(x)


def build_rpn(config: RpnConfig | None = None, seed: int = 0) -> RPN:
    return RPN(config or RpnConfig(), seed)


@dataclass
class FprConfig:
    crop_sizes: tuple[int, ...] = (15, 25, 40)
    target: int = 20
    stem_channels: tuple[int, ...] = (32, 32, 32)
    widths: tuple[int, ...] = (64, 64, 64, 64)
    units: tuple[int, ...] = (2, 3, 3, 3)
    groups: int = 32
    zoom_in: bool = True
    attention: str = "cbam_ca"
    activation: str = "modified_relu"
    fc: tuple[int, ...] = (256, 64)
    dropout: float = 0.3
    reduction: int = 16

    def __post_init__(self):
        for name in ("crop_sizes", "stem_channels", "widths", "units", "fc"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if len(self.crop_sizes) != 3 or len(self.stem_channels) != 3:
            raise ConfigError("exactly three context scales are required")
        if any(b <= a for a, b in zip(self.crop_sizes, self.crop_sizes[1:])):
            raise ConfigError(f"crop sizes must be strictly increasing: {self.crop_sizes}")
        if len(self.widths) != 4 or len(self.units) != 4:
            raise ConfigError("the FPR trunk has exactly four residual blocks")
        if len(self.fc) != 2:
            raise ConfigError("the FC head has three layers: two hidden widths plus the output")
        if self.target % 4:
            raise ConfigError("target extent must be divisible by 4 (two poolings)")
        for w in self.widths:
            if w % self.groups:
                raise ConfigError(f"width {w} not divisible by groups {self.groups}")
        if self.attention not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.attention!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class FPR(Module):
    """Three per-scale stems fused into a residual trunk and an FC classifier."""

    def __init__(self, config: FprConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c, act = config, config.activation
        self.stems = [ConvBNAct(1, s, 3, padding=1, act=act, rng=rng) for s in c.stem_channels]
        self.pool = MaxPool3d(2)
        extent = c.target // 2
        cin = sum(c.stem_channels)
        self.blocks = []
        for i, (w, n) in enumerate(zip(c.widths, c.units)):
            self.blocks.append(
                ResidualBlock(cin, w, n, extent, c.groups, act, c.attention, c.reduction, c.zoom_in, rng=rng)
            )
            cin = w
            if i == 0:
                extent //= 2
        self.flat = cin * extent**3
        self.fc = [Linear(self.flat, c.fc[0], rng=rng), Linear(c.fc[0], c.fc[1], rng=rng), Linear(c.fc[1], 1, rng=rng)]
        # small output weights start every candidate near p = 0.5
        self.fc[2].weight.data = (rng.standard_normal(self.fc[2].weight.shape) * HEAD_STD).astype(np.float32)
        self.dropout = Dropout(c.dropout, rng)

    def forward(self, crops) -> Tensor:
        """Logits (N, 1) for three (N, 1, t, t, t) crops ordered small to large."""
        crops = list(crops)
        if len(crops) != 3:
            raise ConfigError(f"expected 3 crops, got {len(crops)}")
        t = self.config.target
        for crop in crops:
            if crop.ndim != 5 or crop.shape[1:] != (1, t, t, t):
                raise ConfigError(f"crops must be (N, 1, {t}, {t}, {t}), got {crop.shape}")
        x = concat([self.pool(stem(crop)) for stem, crop in zip(self.stems, crops)], axis=1)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == 0:
                x = self.pool(x)
        x = x.reshape((x.shape[0], self.flat))
        act = self.config.activation
        x = self.dropout(F.activation(self.fc[0](x), act))
        x = F.activation(self.fc[1](x), act)
        return self.fc[2](x)


def build_fpr(config: FprConfig | None = None, seed: int = 0) -> FPR:
    return FPR(config or FprConfig(), seed)


def fpr_forward(model: FPR, crops) -> Tensor:
    """Probability (N, 1) that each candidate is a nodule."""
    crops = [c if isinstance(c, Tensor) else Tensor(np.asarray(c)) for c in crops]
    crops = [c.reshape((1, 1) + c.shape) if c.ndim == 3 else c for c in crops]
    return F.sigmoid(model(crops))
