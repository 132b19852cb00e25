"""Vanilla U-Net and Matryoshka-autoencoder U-Net (MatAE-U-Net).

Both share the same topology: ``depth`` encoder stages (ConvBlock then
2x2 max pool), a bottleneck ConvBlock, ``depth`` decoder stages
(transpose conv 2C->C, concat with the C-channel skip, ConvBlock 2C->C)
and a 1x1 head emitting raw logits.

The MatAE variant adds nested reconstruction heads on every pooled
encoder output: the first 1/4, 1/2 and all channels of the map are each
mapped by a 1x1 conv back to the input channels and compared with the
input average-pooled to the same resolution. Because the slices are
channel prefixes, the smaller representation lives inside the larger one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .autograd import Variable, concat_channels, slice_channels
from .errors import ConfigError, ShapeError
from .layers import Conv2D, ConvBlock, Module, TransposeConv2D, avgpool, maxpool2d

MATRYOSHKA_FRACTIONS = (0.25, 0.5, 1.0)
_FRACTION_TAGS = {0.25: "q", 0.5: "h", 1.0: "f"}


@dataclass
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 4
    base_channels: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")

    def stage_channels(self) -> List[int]:
        return [self.base_channels * 2 ** s for s in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2 ** self.depth

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    logits: Variable
    aux_reconstructions: List[Tuple[int, float, Variable]] = field(default_factory=list)


def prefix_channels(channels: int, fraction: float) -> int:
    return int(np.floor(fraction * channels))


class VanillaUNet(Module):
    kind = "vanilla"

    def __init__(self, config: UNetConfig, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        chans = config.stage_channels()
        self.enc = []
        prev = config.in_channels
        for c in chans:
            self.enc.append(ConvBlock(prev, c, rng=rng, dtype=dtype))
            prev = c
        self.bottleneck = ConvBlock(prev, config.bottleneck_channels, rng=rng, dtype=dtype)
        self.up = []
        self.dec = []
        prev = config.bottleneck_channels
        for c in reversed(chans):
            self.up.append(TransposeConv2D(prev, c, rng=rng, dtype=dtype))
            self.dec.append(ConvBlock(2 * c, c, rng=rng, dtype=dtype))
            prev = c
        self.head = Conv2D(prev, config.out_channels, 1, rng=rng, dtype=dtype)

    def check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4:
            raise ShapeError(f"expected NCHW input, got shape {x.shape}")
        n, c, h, w = x.shape
        if c != self.config.in_channels:
            raise ShapeError(f"expected {self.config.in_channels} input channels, got {c}")
        d = self.config.divisor
        if h % d or w % d:
            raise ShapeError(f"input spatial dims {h}x{w} must be divisible by {d} (2^depth)")

    def encode(self, x: Variable) -> Tuple[List[Variable], List[Variable], Variable]:
        """Return (skip maps, pooled maps, bottleneck output)."""
        skips, pooled = [], []
        h = x
        for block in self.enc:
            h = block(h)
            skips.append(h)
            h = maxpool2d(h)
            pooled.append(h)
        return skips, pooled, self.bottleneck(h)

    def decode(self, bottom: Variable, skips: List[Variable]) -> Variable:
        h = bottom
        for up, dec, skip in zip(self.up, self.dec, reversed(skips)):
            h = dec(concat_channels(up(h), skip))
        return self.head(h)

    def forward(self, x) -> ForwardOutput:
        x = x if isinstance(x, Variable) else Variable(np.asarray(x, dtype=self.dtype))
        self.check_input(x.value)
        skips, _, bottom = self.encode(x)
        return ForwardOutput(self.decode(bottom, skips))

    def parameter_count(self) -> int:
        return int(np.sum([p.value.size for p in self.parameters()]))


class MatAEUNet(VanillaUNet):
    kind = "matae"

    def __init__(self, config: UNetConfig, dtype=np.float32):
        config.validate()
        if config.base_channels < 4:
            raise ConfigError(f"MatAE-U-Net needs base_channels >= 4 (got {config.base_channels})")
        super().__init__(config, dtype=dtype)
        rng = np.random.default_rng([config.seed, 1])
        self.recon = []
        self._recon_index = []
        for s, c in enumerate(config.stage_channels()):
            for frac in MATRYOSHKA_FRACTIONS:
                k = prefix_channels(c, frac)
                self.recon.append(Conv2D(k, config.in_channels, 1, rng=rng, dtype=dtype))
                self._recon_index.append((s, frac, k))

    def recon_names(self) -> List[str]:
        return [f"recon{s}{_FRACTION_TAGS[f]}" for s, f, _ in self._recon_index]

    def reconstruct(self, pooled: List[Variable]) -> List[Tuple[int, float, Variable]]:
        out = []
        for head, (s, frac, k) in zip(self.recon, self._recon_index):
            feat = pooled[s]
            if k < feat.shape[1]:
                feat = slice_channels(feat, k)
            out.append((s, frac, head(feat)))
        return out

    def forward(self, x) -> ForwardOutput:
        x = x if isinstance(x, Variable) else Variable(np.asarray(x, dtype=self.dtype))
        self.check_input(x.value)
        skips, pooled, bottom = self.encode(x)
        return ForwardOutput(self.decode(bottom, skips), self.reconstruct(pooled))

    def reconstruction_targets(self, x: np.ndarray) -> List[np.ndarray]:
        """Input average-pooled to each head's resolution, aligned with ``aux_reconstructions``."""
        x = np.asarray(x, dtype=self.dtype)
        return [avgpool(x, 2 ** (s + 1)) for s, _, _ in self._recon_index]


def build_vanilla_unet(config: Optional[UNetConfig] = None, dtype=np.float32) -> VanillaUNet:
    return VanillaUNet(config or UNetConfig(), dtype=dtype)


def build_matae_unet(config: Optional[UNetConfig] = None, dtype=np.float32) -> MatAEUNet:
    return MatAEUNet(config or UNetConfig(), dtype=dtype)


def build_model(kind: str, config: Optional[UNetConfig] = None, dtype=np.float32) -> VanillaUNet:
    if kind == "vanilla":
        return build_vanilla_unet(config, dtype)
    if kind == "matae":
        return build_matae_unet(config, dtype)
    raise ConfigError(f"unknown model kind {kind!r} (expected 'vanilla' or 'matae')")


def parameters(model: Module) -> List[Tuple[str, Variable]]:
    return list(model.named_parameters())
