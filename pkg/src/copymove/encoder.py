"""Hierarchical four-stage transformer encoder.

Produces a feature pyramid at strides 4/8/16/32 from an H x W x 3 image with
H, W divisible by 32.  Each stage overlap-merges patches with a strided
convolution, then runs transformer blocks built from spatially-reduced
multi-head self-attention and a convolutional feed-forward unit.  There is no
positional encoding; location information enters only through the overlapped
patch merging and the 3x3 convolution inside the feed-forward unit.

Block layout: attention is wrapped pre-norm with an outer residual; the
feed-forward unit carries its own pre-norm and residual.  Tensors are
channel-first (B, C, H, W) at stage boundaries and (B, L, C) token sequences
inside blocks, flattened row-major.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .errors import ShapeError


class OverlapPatchMerge(nn.Module):
    """Learned linear map over overlapping K x K patches (a strided conv)."""

    def __init__(self, in_channels, out_channels, kernel, stride, padding):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel, stride=stride, padding=padding)

    def forward(self, x):
        if x.shape[-2] + 2 * self.proj.padding[0] < self.proj.kernel_size[0] or \
           x.shape[-1] + 2 * self.proj.padding[1] < self.proj.kernel_size[1]:
            raise ShapeError(
                f"input {tuple(x.shape[-2:])} smaller than effective kernel "
                f"{self.proj.kernel_size} with padding {self.proj.padding}")
        return self.proj(x)


def spatial_reduce(x, reduction, weight, norm=None):
    """Shorten a token sequence by folding groups of consecutive tokens.

    Reshapes (B, L, C) to (B, L/R, R*C) so that each output row gathers R
    consecutive input rows, projects back to C with ``weight`` ((R*C) x C),
    and applies ``norm`` when given.
    """
    b, length, channels = x.shape
    if length % reduction:
        raise ShapeError(f"sequence length {length} not divisible by reduction {reduction}")
    y = x.reshape(b, length // reduction, reduction * channels) @ weight
    return norm(y) if norm is not None else y


class EfficientSelfAttention(nn.Module):
    """Multi-head self-attention with key/value sequence reduction.

    For reduction 1 the keys and values are used directly; otherwise they
    pass through ``spatial_reduce`` with a learned projection and layer norm.
    Projection matrices are bias-free.
    """

    def __init__(self, channels, heads, reduction, debug=False):
        super().__init__()
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.head_dim = channels // heads
        self.reduction = reduction
        self.debug = debug
        self.q = nn.Linear(channels, channels, bias=False)
        self.k = nn.Linear(channels, channels, bias=False)
        self.v = nn.Linear(channels, channels, bias=False)
        self.proj = nn.Linear(channels, channels, bias=False)
        if reduction > 1:
            self.sr_weight = nn.Parameter(torch.empty(reduction * channels, channels))
            self.sr_norm = nn.LayerNorm(channels)
        else:
            self.sr_weight = None
            self.sr_norm = None

    def _split_heads(self, x):
        b, length, _ = x.shape
        return x.reshape(b, length, self.heads, self.head_dim).transpose(1, 2)

    def attention_weights(self, x):
        """Softmax weights per head, (B, heads, L, L/R); for inspection."""
        q = self._split_heads(self.q(x))
        kv_in = x if self.reduction == 1 else spatial_reduce(x, self.reduction, self.sr_weight, self.sr_norm)
        k = self._split_heads(self.k(kv_in))
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def forward(self, x):
        if self.debug and not torch.isfinite(x).all():
            raise FloatingPointError("non-finite values in attention input")
        b, length, channels = x.shape
        q = self._split_heads(self.q(x))
        kv_in = x if self.reduction == 1 else spatial_reduce(x, self.reduction, self.sr_weight, self.sr_norm)
        k = self._split_heads(self.k(kv_in))
        v = self._split_heads(self.v(kv_in))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, length, channels)
        return self.proj(out)


class MixFFN(nn.Module):
    """Feed-forward unit: MLP -> depthwise 3x3 conv -> GELU -> MLP, residual.

    Owns its pre-norm (disable with ``norm=False`` to evaluate the bare
    transform).  With all internal weights and biases zero the unit is an
    exact identity.
    """

    def __init__(self, channels, expansion, norm=True):
        super().__init__()
        hidden = channels * expansion
        self.norm = nn.LayerNorm(channels) if norm else None
        self.fc1 = nn.Linear(channels, hidden)
        self.conv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x, hw):
        h, w = hw
        if h * w != x.shape[1]:
            raise ShapeError(f"sequence length {x.shape[1]} does not match map {hw}")
        y = self.norm(x) if self.norm is not None else x
        y = self.fc1(y)
        b, length, hidden = y.shape
        y = y.transpose(1, 2).reshape(b, hidden, h, w)
        y = self.conv(y)
        y = y.reshape(b, hidden, length).transpose(1, 2)
        y = self.fc2(F.gelu(y))
        return x + y


class TransformerBlock(nn.Module):
    def __init__(self, channels, heads, reduction, ffn_expansion, debug=False):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = EfficientSelfAttention(channels, heads, reduction, debug=debug)
        self.ffn = MixFFN(channels, ffn_expansion)

    def forward(self, x, hw):
        x = x + self.attn(self.norm(x))
        return self.ffn(x, hw)


class EncoderStage(nn.Module):
    def __init__(self, in_channels, channels, depth, heads, reduction,
                 patch_kernel, patch_stride, patch_padding, ffn_expansion, debug=False):
        super().__init__()
        self.merge = OverlapPatchMerge(in_channels, channels, patch_kernel, patch_stride, patch_padding)
        self.embed_norm = nn.LayerNorm(channels)
        self.blocks = nn.ModuleList(
            TransformerBlock(channels, heads, reduction, ffn_expansion, debug=debug)
            for _ in range(depth))
        self.out_norm = nn.LayerNorm(channels)

    def forward(self, x):
        x = self.merge(x)
        b, c, h, w = x.shape
        x = x.reshape(b, c, h * w).transpose(1, 2)
        x = self.embed_norm(x)
        for block in self.blocks:
            x = block(x, (h, w))
        x = self.out_norm(x)
        return x.transpose(1, 2).reshape(b, c, h, w)


class HierarchicalEncoder(nn.Module):
    """Stack of four stages; ``forward`` returns the four feature maps."""

    def __init__(self, config: EncoderConfig, debug=False):
        super().__init__()
        self.config = config
        stages = []
        in_channels = 3
        for j in range(4):
            stages.append(EncoderStage(
                in_channels, config.channels[j], config.depths[j], config.heads[j],
                config.reductions[j], config.patch_kernels[j], config.patch_strides[j],
                config.patch_paddings[j], config.ffn_expansion, debug=debug))
            in_channels = config.channels[j]
        self.stages = nn.ModuleList(stages)

    def forward(self, images):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) input, got {tuple(images.shape)}")
        h, w = images.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"image dims must be divisible by 32, got {(h, w)}")
        features = []
        x = images
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features
