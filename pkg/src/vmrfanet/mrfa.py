"""Multi-receptive-field attention.

Four parallel branches reduce the C input channels to C/4 each with a 1x1
conv and then see receptive fields of 1, 3, 5 (two stacked 3x3) and 7
(1x7 followed by 7x1).  Their concatenation is lifted to ``out_channels``
by a 1x1 conv and squashed with ``tanh(x) + 1`` into a multiplicative mask
with values in (0, 2).
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBNReLU, FeatureExtractor, Module


@dataclass(frozen=True)
class MrfaConfig:
    in_channels: int
    out_channels: int = 0  # 0 -> 2 * in_channels
    spatial_stride: int = 1

    def __post_init__(self):
        if self.in_channels <= 0 or self.in_channels % 4:
            raise ConfigError(f"MRFA in_channels must be a positive multiple of 4, got {self.in_channels}")
        if self.out_channels == 0:
            object.__setattr__(self, "out_channels", 2 * self.in_channels)
        if self.out_channels <= 0:
            raise ConfigError(f"MRFA out_channels must be positive, got {self.out_channels}")
        if self.spatial_stride not in (1, 2):
            raise ConfigError(f"MRFA spatial_stride must be 1 or 2, got {self.spatial_stride}")


class Branch(Module):
    """1x1 reduction, optional 2x2 average pool, then the branch's filter stack."""

    def __init__(self, rng, channels, reduced, stride, kernels):
        self.reduce = ConvBNReLU(rng, channels, reduced, 1)
        self.stride = stride
        self.stack = []
        for kernel in kernels:
            kh, kw = kernel
            self.stack.append(ConvBNReLU(rng, reduced, reduced, kernel, padding=(kh // 2, kw // 2)))

    def forward(self, x):
        y = self.reduce(x)
        if self.stride == 2:
            y = ops.pool2d(y, "avg", 2, 2)
        for layer in self.stack:
            y = layer(y)
        return y


BRANCH_KERNELS = (
    (),                       # receptive field 1
    ((3, 3),),                # 3
    ((3, 3), (3, 3)),         # 5, factorised
    ((1, 7), (7, 1)),         # 7, factorised
)


class MRFA(Module):
    def __init__(self, rng, config):
        self.config = config
        C = config.in_channels
        self.branches = [Branch(rng, C, C // 4, config.spatial_stride, ks) for ks in BRANCH_KERNELS]
        self.lift = Conv2d(rng, C, config.out_channels, 1, bias=True)

    def forward(self, x):
        """Return ``(mask, pre_mask_feature)`` for NxCxHxW input."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"MRFA expects {self.config.in_channels} input channels, got shape {x.shape}", (1,))
        s = self.config.spatial_stride
        if x.shape[2] % s or x.shape[3] % s:
            raise DimensionError(f"MRFA stride {s} does not divide spatial dims {x.shape[2:]}", (2, 3))
        feature = ops.concat_along_channel([b(x) for b in self.branches])
        mask = ops.tanh_plus_one(self.lift(feature))
        return mask, feature

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0
        return self


def mrfa_forward(module, x):
    return module(x)


def apply_mask(feature, mask):
    if feature.shape != mask.shape:
        axes = [i for i, (a, b) in enumerate(zip(feature.shape, mask.shape)) if a != b]
        raise DimensionError(f"mask shape {mask.shape} does not match feature {feature.shape}", axes)
    return ops.elementwise_mul(feature, mask)


class AttentionCameraExtractor(FeatureExtractor):
    """Global average pool of the branch concat, then affine, batch norm, relu."""

    def forward(self, pre_mask_feature):
        return super().forward(ops.pool2d(pre_mask_feature, "global_avg"))


def mask_to_pgm_bytes(mask_row):
    """Channel-mean of one CxHxW mask, min-max scaled to 8-bit greyscale."""
    m = np.asarray(mask_row, dtype=np.float64).mean(axis=0)
    lo, hi = m.min(), m.max()
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    return np.round(scaled * 255).astype(np.uint8)
