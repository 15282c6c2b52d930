# encoding: utf-8
"""
Small CSP-style spatial backbone: per-frame features P3/P4/P5 at strides
8/16/32. Downsampling is always a strided convolution; the deepest stage ends
in a spatial pyramid pooling block.
"""

import math
import logging
from collections import namedtuple
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .shared import check, SPP_KERNELS, STRIDES

logger = logging.getLogger(__name__)

MAX_STRIDE = STRIDES[-1]


class PaddingRequired(ValueError):
    pass


@dataclass
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple = (32, 64, 128)
    stage_blocks: tuple = (1, 1, 1)
    spp_kernels: tuple = SPP_KERNELS
    activation: str = "silu"
    norm: str = "group"
    norm_groups: int = 8

    def __post_init__(self):
        self.stage_channels = tuple(int(x) for x in self.stage_channels)
        self.stage_blocks = tuple(int(x) for x in self.stage_blocks)
        self.spp_kernels = tuple(int(x) for x in self.spp_kernels)
        self.validate()

    def validate(self):
        check(self.stem_channels >= 1, "backbone.stem_channels must be at least 1")
        check(len(self.stage_channels) == 3 and min(self.stage_channels) >= 2,
              "backbone.stage_channels needs three widths of at least 2 (was {})", self.stage_channels)
        check(all(c % 2 == 0 for c in self.stage_channels),
              "backbone.stage_channels must be even for the cross-stage split (was {})", self.stage_channels)
        check(len(self.stage_blocks) == 3 and min(self.stage_blocks) >= 0,
              "backbone.stage_blocks needs three non-negative counts (was {})", self.stage_blocks)
        check(len(self.spp_kernels) >= 1 and all(k >= 1 and k % 2 == 1 for k in self.spp_kernels),
              "backbone.spp_kernels must be odd (was {})", self.spp_kernels)
        check(self.activation in ACTIVATIONS, "backbone.activation must be one of {} (was {})",
              sorted(ACTIVATIONS), self.activation)
        check(self.norm in ("group", "none"), "backbone.norm must be 'group' or 'none' (was {})", self.norm)
        check(self.norm_groups >= 1, "backbone.norm_groups must be at least 1")


ACTIVATIONS = {
    "silu": lambda: nn.SiLU(),
    "leaky": lambda: nn.LeakyReLU(0.1),
}


class FeaturePyramid(namedtuple('FeaturePyramid', ('p3', 'p4', 'p5'))):
    """
    Feature maps at strides 8, 16 and 32. Batched pyramids hold (N, C, h, w)
    tensors; per-frame pyramids hold (C, h, w).
    """
    __slots__ = ()

    def frames(self):
        """
        Split a batched pyramid into one pyramid per frame
        """
        return [FeaturePyramid(self.p3[i], self.p4[i], self.p5[i]) for i in range(self.p3.shape[0])]


def norm_layer(config, channels):
    if config.norm == "none":
        return nn.Identity()
    # Per-sample normalisation keeps frames independent of each other
    return nn.GroupNorm(math.gcd(config.norm_groups, channels), channels)


class ConvNormAct(nn.Module):
    def __init__(self, config, in_channels, out_channels, kernel_size=1, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                              padding=kernel_size // 2, bias=config.norm == "none")
        self.norm = norm_layer(config, out_channels)
        self.act = ACTIVATIONS[config.activation]()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, config, channels):
        super().__init__()
        self.cv1 = ConvNormAct(config, channels, channels, 1)
        self.cv2 = ConvNormAct(config, channels, channels, 3)

    def forward(self, x):
        return x + self.cv2(self.cv1(x))


class CSPStage(nn.Module):
    """
    Strided-conv downsample, then a cross-stage partial block: half the
    channels go through the bottlenecks, half bypass them, and the two are
    merged by a 1x1 convolution.
    """
    def __init__(self, config, in_channels, out_channels, blocks):
        super().__init__()
        mid = out_channels // 2
        self.down = ConvNormAct(config, in_channels, out_channels, 3, stride=2)
        self.split = ConvNormAct(config, out_channels, mid, 1)
        self.bypass = ConvNormAct(config, out_channels, mid, 1)
        self.blocks = nn.Sequential(*[Bottleneck(config, mid) for _ in range(blocks)])
        self.merge = ConvNormAct(config, 2 * mid, out_channels, 1)

    def forward(self, x):
        x = self.down(x)
        return self.merge(torch.cat([self.blocks(self.split(x)), self.bypass(x)], dim=1))


def spp(x, kernels=SPP_KERNELS):
    """
    Spatial pyramid pooling: the identity branch concatenated with stride-1,
    same-padded max pools. Channels grow by a factor of (1 + len(kernels)).
    """
    for k in kernels:
        if k < 1 or k % 2 == 0:
            raise ValueError("SPP kernel sizes must be odd (got {})".format(k))
    return torch.cat([x] + [F.max_pool2d(x, k, stride=1, padding=k // 2) for k in kernels], dim=1)


class SPPBlock(nn.Module):
    def __init__(self, config, channels):
        super().__init__()
        mid = max(1, channels // 2)
        self.kernels = config.spp_kernels
        self.reduce = ConvNormAct(config, channels, mid, 1)
        self.fuse = ConvNormAct(config, mid * (1 + len(self.kernels)), channels, 1)

    def forward(self, x):
        return self.fuse(spp(self.reduce(x), self.kernels))


def frames_to_tensor(frames):
    """
    (N, H, W, 3) float frames in [0, 1] -> (N, 3, H, W) float32 tensor
    """
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    return frames.permute(0, 3, 1, 2).contiguous()


def required_padding(height, width, multiple=MAX_STRIDE):
    return ((-height) % multiple, (-width) % multiple)


class Backbone(nn.Module):
    def __init__(self, config=None):
        super().__init__()
        self.config = config or BackboneConfig()
        c = self.config
        c3, c4, c5 = c.stage_channels
        b3, b4, b5 = c.stage_blocks
        self.stem = nn.Sequential(
            ConvNormAct(c, 3, c.stem_channels, 3, stride=2),
            ConvNormAct(c, c.stem_channels, c.stem_channels, 3, stride=2),
        )
        self.stage3 = CSPStage(c, c.stem_channels, c3, b3)
        self.stage4 = CSPStage(c, c3, c4, b4)
        self.stage5 = CSPStage(c, c4, c5, b5)
        self.spp = SPPBlock(c, c5)
        logger.debug("Backbone with %s parameters", sum(p.numel() for p in self.parameters()))

    @property
    def channels(self):
        return self.config.stage_channels

    def forward(self, x):
        """
        @param x: (N, 3, H, W) with H and W divisible by 32
        @return: batched FeaturePyramid
        """
        h, w = x.shape[-2:]
        pad_h, pad_w = required_padding(h, w)
        if pad_h or pad_w:
            raise PaddingRequired("Input {}x{} must be padded by {}x{} pixels to {}x{} (multiples of {})".format(
                w, h, pad_w, pad_h, w + pad_w, h + pad_h, MAX_STRIDE))
        p3 = self.stage3(self.stem(x))
        p4 = self.stage4(p3)
        p5 = self.spp(self.stage5(p4))
        return FeaturePyramid(p3, p4, p5)

    def extract(self, frames):
        """
        Per-frame pyramids for a stack of frames flattened over time.

        @param frames: (T, H, W, 3) array or (T, 3, H, W) tensor
        @return: list of T per-frame FeaturePyramids
        """
        if isinstance(frames, np.ndarray):
            frames = frames_to_tensor(frames)
        param = next(self.parameters())
        return self(frames.to(dtype=param.dtype, device=param.device)).frames()
