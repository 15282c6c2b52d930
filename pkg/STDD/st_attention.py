# encoding: utf-8
"""
Spatio-temporal attention over 3D windows.

Feature volumes are laid out (B, T, H, W, C). The volume is cut into patches
of patch_h x patch_w x T tokens, and attention runs inside windows of
M x M x T tokens. Shifted layers cyclically roll the volume by
shift = (shift_h, shift_w, shift_t) first, with a mask that stops tokens
wrapped around the boundary attending to tokens they weren't next to.
"""

import logging
from collections import namedtuple
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import PaddingRequired
from .shared import ConfigError, check, memoize

logger = logging.getLogger(__name__)


class GeometryError(ConfigError):
    pass


class NonFiniteInput(ValueError):
    pass


class WindowGeometry(namedtuple('WindowGeometry', ('patch', 'window', 'shift', 'depth'))):
    """
    patch: (patch_h, patch_w, tau)
    window: inner window size M (M x M x tau tokens)
    shift: (shift_h, shift_w, shift_t) for the shifted layers
    depth: number of (window, shifted-window) layer pairs
    """
    __slots__ = ()

    def __new__(cls, patch=(8, 8, 5), window=8, shift=(4, 4, 0), depth=5):
        patch = tuple(int(x) for x in patch)
        shift = tuple(int(x) for x in shift)
        window = int(window)
        depth = int(depth)
        check(len(patch) == 3 and min(patch) >= 1, "patch must be (h, w, tau) with positive sizes (was {})",
              patch, error=GeometryError)
        check(len(shift) == 3 and min(shift) >= 0, "shift must be three non-negative offsets (was {})",
              shift, error=GeometryError)
        check(window >= 1 and patch[0] % window == 0 and patch[1] % window == 0,
              "inner window {} must divide the {}x{} patch", window, patch[0], patch[1], error=GeometryError)
        check(all(s < p for s, p in zip(shift, patch)), "shift {} must be smaller than the patch {}",
              shift, patch, error=GeometryError)
        check(depth >= 1, "depth must be at least 1 (was {})", depth, error=GeometryError)
        return super().__new__(cls, patch, window, shift, depth)

    @property
    def tau(self):
        return self.patch[2]

    def window_size(self, t):
        """
        (h, w, t) extent of one attention window for a clip of t frames
        """
        return (self.window, self.window, t)

    def shift_size(self, t):
        # A temporal shift is meaningless once it spans the clip
        st = self.shift[2] if self.shift[2] < t else 0
        return (self.shift[0], self.shift[1], st)


@dataclass
class AttentionBranchConfig:
    embed_dims: tuple = (32, 32, 32)
    num_heads: int = 2
    relative_position_bias: bool = True
    patch: tuple = (8, 8)
    window: int = 8
    shift: tuple = (4, 4, 0)
    depth: int = 5
    mlp_ratio: float = 2.0

    def __post_init__(self):
        self.embed_dims = tuple(int(x) for x in self.embed_dims)
        self.patch = tuple(int(x) for x in self.patch)
        self.shift = tuple(int(x) for x in self.shift)
        self.validate()

    def validate(self):
        check(len(self.embed_dims) == 3, "attention.embed_dims needs one width per scale (was {})",
              self.embed_dims)
        check(self.num_heads >= 1, "attention.num_heads must be at least 1")
        for d in self.embed_dims:
            check(d >= 1 and d % self.num_heads == 0,
                  "attention embed dim {} must be divisible by {} heads", d, self.num_heads)
        check(len(self.patch) == 2, "attention.patch is (h, w) (was {})", self.patch)
        check(self.mlp_ratio > 0, "attention.mlp_ratio must be positive")
        # Validates the spatial geometry; the temporal extent is the clip length
        self.geometry(max(self.shift[2] + 1, 1))

    def geometry(self, tau):
        shift = self.shift
        if shift[2] >= tau:
            logger.debug("Temporal shift %s dropped for %s-frame clips", shift[2], tau)
            shift = (shift[0], shift[1], 0)
        return WindowGeometry(self.patch + (tau,), self.window, shift, self.depth)


def cyclic_shift(x, shift=(4, 4, 0)):
    """
    Roll a (B, T, H, W, C) volume by +shift = (h, w, t). A value at
    (h, w, t) = (0, 0, 0) moves to (4, 4, 0) for the default shift.
    """
    sh, sw, st = shift
    if not (sh or sw or st):
        return x
    return torch.roll(x, shifts=(st, sh, sw), dims=(1, 2, 3))


def reverse_cyclic_shift(x, shift=(4, 4, 0)):
    sh, sw, st = shift
    return cyclic_shift(x, (-sh, -sw, -st))


def window_partition(x, window):
    """
    (B, T, H, W, C) -> (B * num_windows, wt * wh * ww, C), tokens ordered
    (t, h, w) within each window and windows ordered (t, h, w) within the batch.

    @param window: (wh, ww, wt)
    """
    b, t, h, w, c = x.shape
    wh, ww, wt = window
    if t % wt or h % wh or w % ww:
        raise PaddingRequired("Volume of {}x{}x{} (h, w, t) must be padded to multiples of {}x{}x{}".format(
            h, w, t, wh, ww, wt))
    x = x.reshape(b, t // wt, wt, h // wh, wh, w // ww, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(-1, wt * wh * ww, c)


def window_merge(windows, window, shape):
    """
    Inverse of window_partition.

    @param shape: (B, T, H, W, C) of the volume
    """
    b, t, h, w, c = shape
    wh, ww, wt = window
    x = windows.reshape(b, t // wt, h // wh, w // ww, wt, wh, ww, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7)
    return x.reshape(b, t, h, w, c)


@memoize
def shifted_window_mask(shape, window, shift):
    """
    Additive attention mask for a rolled volume: 0 between tokens from the
    same pre-shift region, -inf otherwise.

    @param shape: (T, H, W)
    @param window: (wh, ww, wt)
    @param shift: (sh, sw, st)
    @return: (num_windows, tokens, tokens) float tensor
    """
    t, h, w = shape
    wh, ww, wt = window
    sh, sw, st = shift
    labels = torch.zeros((1, t, h, w, 1))
    count = 0
    for ts in ((0, st), (st, None)):
        for hs in ((0, sh), (sh, None)):
            for ws in ((0, sw), (sw, None)):
                labels[:, ts[0]:ts[1], hs[0]:hs[1], ws[0]:ws[1], :] = count
                count += 1
    labels = window_partition(labels, window).squeeze(-1)
    diff = labels.unsqueeze(1) - labels.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float('-inf'))


@memoize
def relative_position_index(window):
    """
    (tokens, tokens) index into a table of (2wt-1)(2wh-1)(2ww-1) relative offsets
    """
    wh, ww, wt = window
    coords = torch.stack(torch.meshgrid(torch.arange(wt), torch.arange(wh), torch.arange(ww), indexing="ij"))
    coords = torch.flatten(coords, 1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0).contiguous()
    rel[:, :, 0] += wt - 1
    rel[:, :, 1] += wh - 1
    rel[:, :, 2] += ww - 1
    rel[:, :, 0] *= (2 * wh - 1) * (2 * ww - 1)
    rel[:, :, 1] *= 2 * ww - 1
    return rel.sum(-1)


def window_msa(windows, qkv_weight, qkv_bias, proj_weight, proj_bias, num_heads,
               bias=None, mask=None, return_weights=False):
    """
    Multi-head self attention inside each window:
    softmax(QK^T / sqrt(d) + bias + mask) V, heads concatenated and projected.

    @param windows: (B * num_windows, tokens, C)
    @param bias: optional (heads, tokens, tokens) relative position bias
    @param mask: optional (num_windows, tokens, tokens) additive mask
    @return: windows of the same shape (and the attention weights if asked)
    """
    if not torch.isfinite(windows).all():
        raise NonFiniteInput("Non-finite values in attention input")
    n, tokens, c = windows.shape
    head_dim = c // num_heads

    qkv = F.linear(windows, qkv_weight, qkv_bias)
    qkv = qkv.reshape(n, tokens, 3, num_heads, head_dim).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    attn = (q * head_dim ** -0.5) @ k.transpose(-2, -1)
    if bias is not None:
        attn = attn + bias.unsqueeze(0)
    if mask is not None:
        num_windows = mask.shape[0]
        attn = attn.view(n // num_windows, num_windows, num_heads, tokens, tokens)
        attn = attn + mask.to(dtype=attn.dtype, device=attn.device).unsqueeze(1).unsqueeze(0)
        attn = attn.view(n, num_heads, tokens, tokens)
    weights = F.softmax(attn, dim=-1)

    out = (weights @ v).transpose(1, 2).reshape(n, tokens, c)
    out = F.linear(out, proj_weight, proj_bias)
    if return_weights:
        return out, weights
    return out


class WindowAttention3d(nn.Module):
    def __init__(self, dim, num_heads, window, relative_position_bias=True):
        """
        @param window: (wh, ww, wt) attention window
        """
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.window = tuple(window)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = None
        if relative_position_bias:
            wh, ww, wt = self.window
            self.bias_table = nn.Parameter(torch.zeros((2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1), num_heads))
            nn.init.trunc_normal_(self.bias_table, std=0.02)

    def position_bias(self):
        if self.bias_table is None:
            return None
        tokens = self.window[0] * self.window[1] * self.window[2]
        index = relative_position_index(self.window).to(self.bias_table.device)
        return self.bias_table[index.flatten()].view(tokens, tokens, -1).permute(2, 0, 1).contiguous()

    def forward(self, x, shift=(0, 0, 0), return_weights=False):
        """
        @param x: (B, T, H, W, C), H and W multiples of the window
        @param shift: (sh, sw, st); zero for plain window attention
        """
        shape = tuple(x.shape)
        shifted = any(shift)
        if shifted:
            x = cyclic_shift(x, shift)
        windows = window_partition(x, self.window)
        mask = shifted_window_mask(shape[1:4], self.window, tuple(shift)) if shifted else None
        out = window_msa(windows, self.qkv.weight, self.qkv.bias, self.proj.weight, self.proj.bias,
                         self.num_heads, bias=self.position_bias(), mask=mask, return_weights=return_weights)
        weights = None
        if return_weights:
            out, weights = out
        out = window_merge(out, self.window, shape)
        if shifted:
            out = reverse_cyclic_shift(out, shift)
        if return_weights:
            return out, weights
        return out


class STLayer(nn.Module):
    """
    Pre-norm attention and MLP, each with a residual connection
    """
    def __init__(self, dim, num_heads, window, shift, relative_position_bias=True, mlp_ratio=2.0):
        super().__init__()
        self.shift = tuple(shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention3d(dim, num_heads, window, relative_position_bias)
        self.norm2 = nn.LayerNorm(dim)
        hidden = max(1, int(dim * mlp_ratio))
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x), self.shift)
        return x + self.mlp(self.norm2(x))


def _symmetric_pad(h, w, multiple_h, multiple_w):
    ph = (-h) % multiple_h
    pw = (-w) % multiple_w
    return (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)


class STBranch(nn.Module):
    """
    One scale's spatio-temporal transformer. Takes the tau per-frame maps of a
    scale stacked over time and returns a volume of the same shape; the branch
    output is added to its input, and the output projection starts at zero so
    a fresh branch is the identity.
    """
    def __init__(self, in_channels, embed_dim, geometry, num_heads=2, relative_position_bias=True, mlp_ratio=2.0):
        super().__init__()
        self.geometry = geometry
        self.in_proj = nn.Linear(in_channels, embed_dim)
        t = geometry.tau
        window = geometry.window_size(t)
        shift = geometry.shift_size(t)
        layers = []
        for _ in range(geometry.depth):
            layers.append(STLayer(embed_dim, num_heads, window, (0, 0, 0), relative_position_bias, mlp_ratio))
            layers.append(STLayer(embed_dim, num_heads, window, shift, relative_position_bias, mlp_ratio))
        self.layers = nn.ModuleList(layers)
        self.norm = nn.LayerNorm(embed_dim)
        self.out_proj = nn.Linear(embed_dim, in_channels)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, x):
        """
        @param x: (B, T, C, H, W) per-frame feature maps stacked over time
        @return: (B, T, C, H, W)
        """
        b, t, c, h, w = x.shape
        if t != self.geometry.tau:
            raise GeometryError("Branch built for {} frames got {}".format(self.geometry.tau, t))
        if not torch.isfinite(x).all():
            raise NonFiniteInput("Non-finite values in branch input")
        pad = _symmetric_pad(h, w, self.geometry.patch[0], self.geometry.patch[1])
        v = x.reshape(b * t, c, h, w)
        if any(pad):
            v = F.pad(v, pad)
        hp, wp = v.shape[-2:]
        v = v.reshape(b, t, c, hp, wp).permute(0, 1, 3, 4, 2)

        y = self.in_proj(v)
        for layer in self.layers:
            y = layer(y)
        y = self.out_proj(self.norm(y))

        y = y.permute(0, 1, 4, 2, 3)
        y = y[:, :, :, pad[2]:pad[2] + h, pad[0]:pad[0] + w]
        return x + y


def st_branch(pyramids, level, branch):
    """
    Run a branch over the tau per-frame pyramids of one clip at one scale.

    @param pyramids: list of tau per-frame FeaturePyramids
    @param level: 'p3', 'p4' or 'p5'
    @param branch: STBranch for that scale
    @return: (tau, C, h, w) fused volume
    """
    volume = torch.stack([getattr(p, level) for p in pyramids]).unsqueeze(0)
    return branch(volume).squeeze(0)
