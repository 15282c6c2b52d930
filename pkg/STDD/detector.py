# encoding: utf-8
"""
The full detector: spatial backbone -> one spatio-temporal branch per scale
-> top-down neck -> per-scale, per-frame grid heads.
"""

import math
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, ConvNormAct, frames_to_tensor
from .head_loss import GridPrediction
from .st_attention import STBranch, AttentionBranchConfig
from .shared import check, STRIDES

logger = logging.getLogger(__name__)

LEVELS = ('p3', 'p4', 'p5')


@dataclass
class HeadConfig:
    neck_channels: int = 32
    num_boxes: int = 1
    num_classes: int = 1
    obj_prior: float = 0.01

    def validate(self):
        check(self.neck_channels >= 1, "head.neck_channels must be at least 1")
        check(self.num_boxes >= 1, "head.num_boxes must be at least 1")
        check(self.num_classes >= 1, "head.num_classes must be at least 1")
        check(0.0 < self.obj_prior < 1.0, "head.obj_prior must be in (0, 1)")

    def __post_init__(self):
        self.validate()

    @property
    def outputs(self):
        return 5 + self.num_classes


class Neck(nn.Module):
    """
    Lateral 1x1 projections, then upsample-and-add from P5 down to P3
    """
    def __init__(self, config, in_channels, channels):
        super().__init__()
        self.lateral = nn.ModuleList([ConvNormAct(config, c, channels, 1) for c in in_channels])
        self.smooth = nn.ModuleList([ConvNormAct(config, channels, channels, 3) for _ in in_channels])

    def forward(self, features):
        p3, p4, p5 = (lat(f) for lat, f in zip(self.lateral, features))
        p4 = p4 + F.interpolate(p5, size=p4.shape[-2:], mode="nearest")
        p3 = p3 + F.interpolate(p4, size=p3.shape[-2:], mode="nearest")
        return [s(p) for s, p in zip(self.smooth, (p3, p4, p5))]


class Detector(nn.Module):
    def __init__(self, tau, backbone_config=None, attention_config=None, head_config=None):
        super().__init__()
        self.tau = tau
        self.backbone_config = backbone_config or BackboneConfig()
        self.attention_config = attention_config or AttentionBranchConfig()
        self.head_config = head_config or HeadConfig()

        self.backbone = Backbone(self.backbone_config)
        geometry = self.attention_config.geometry(tau)
        a = self.attention_config
        self.branches = nn.ModuleList([
            STBranch(c, d, geometry, a.num_heads, a.relative_position_bias, a.mlp_ratio)
            for c, d in zip(self.backbone.channels, a.embed_dims)
        ])
        h = self.head_config
        self.neck = Neck(self.backbone_config, self.backbone.channels, h.neck_channels)
        self.heads = nn.ModuleList([nn.Conv2d(h.neck_channels, h.num_boxes * h.outputs, 1) for _ in LEVELS])
        prior = math.log(h.obj_prior / (1.0 - h.obj_prior))
        for head in self.heads:
            nn.init.zeros_(head.bias)
            with torch.no_grad():
                head.bias.view(h.num_boxes, h.outputs)[:, 4] = prior
        logger.debug("Detector for tau=%s with %s parameters", tau, self.num_parameters())

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    @property
    def strides(self):
        return STRIDES

    def forward(self, clips):
        """
        @param clips: (B, T, 3, H, W)
        @return: one GridPrediction per scale, raw (B * T, S_h, S_w, num_boxes, 5 + C),
                 frames ordered clip-major
        """
        b, t = clips.shape[:2]
        pyramid = self.backbone(clips.reshape((b * t,) + tuple(clips.shape[2:])))
        fused = []
        for level, branch in zip(LEVELS, self.branches):
            f = getattr(pyramid, level)
            v = branch(f.reshape((b, t) + tuple(f.shape[1:])))
            fused.append(v.reshape((b * t,) + tuple(f.shape[1:])))
        h = self.head_config
        ret = []
        for head, feature, stride in zip(self.heads, self.neck(fused), STRIDES):
            out = head(feature)
            n, _, sh, sw = out.shape
            raw = out.view(n, h.num_boxes, h.outputs, sh, sw).permute(0, 3, 4, 1, 2).contiguous()
            ret.append(GridPrediction(raw, stride))
        return ret

    def predict_clip(self, frames):
        """
        Raw grids for one clip given as a (T, H, W, 3) array
        """
        param = next(self.parameters())
        x = frames_to_tensor(frames).to(dtype=param.dtype, device=param.device).unsqueeze(0)
        return self(x)
