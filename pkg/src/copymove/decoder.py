"""Mask decoder: self-correlation matching plus hierarchical reconstruction.

The decoder turns the encoder pyramid into a per-pixel two-class mask:

1. each feature map is L2-normalized per location, correlated against every
   other location, filtered to its strongest top-T matches, clamped and
   re-normalized (level 1 is first downsampled by an overlap patch merge so
   the largest correlation map lives at stride 8);
2. the four filtered correlation maps are recalibrated (1x1 convs, pyramid
   pooling for the coarsest level) and fused top-down into one stride-8
   tensor;
3. a bank of nine cycle fully-connected branches at mixed orientations and
   dilations reinforces multi-scale structure;
4. three upsample+conv steps reconstruct the full-resolution softmax mask.

All tensors are channel-first.  Correlation maps carry their top-T channels
sorted in non-increasing order with values in [0, 1].
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .encoder import OverlapPatchMerge
from .errors import ConfigError, ShapeError

PPM_BINS = (1, 2, 3, 6)

# (height step, width step, dilation) of the nine cycle FC branches.
CYCLE_FC_BRANCHES = (
    (1, 3, 1), (1, 3, 6), (1, 3, 12), (1, 3, 18),
    (3, 1, 1), (3, 1, 6), (3, 1, 12), (3, 1, 18),
    (1, 1, 1),
)

ZERO_NORM_EPS = 1e-12


def upsample2x(x):
    """Bilinear x2 upsampling, half-pixel-center alignment."""
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


def resize_to(x, size):
    """Bilinear resize to ``size`` (h, w), half-pixel-center alignment."""
    if x.shape[-2:] == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def l2_normalize_locations(x, eps=ZERO_NORM_EPS):
    """Scale each location's channel vector to unit L2 norm.

    Locations with norm below ``eps`` map to the zero vector instead of
    dividing by zero.  Input is (B, C, H, W); the norm is over C.
    """
    norm = torch.linalg.vector_norm(x, dim=1, keepdim=True)
    zero = norm < eps
    return torch.where(zero, torch.zeros_like(x), x / torch.where(zero, torch.ones_like(norm), norm))


def self_correlation(f):
    """All-pairs scalar products between locations of a normalized map.

    Input (B, C, H, W) with unit-norm (or zero) location vectors; output
    (B, H*W, H*W) with entry (m, n) the dot product of locations m and n in
    row-major order.
    """
    v = f.flatten(2).transpose(1, 2)
    return v @ v.transpose(1, 2)


def topk_sort(c, t):
    """Largest ``t`` values of the last axis, in non-increasing order."""
    k = c.shape[-1]
    if not 1 <= t <= k:
        raise ConfigError(f"top-T {t} outside [1, {k}]")
    return torch.topk(c, t, dim=-1, sorted=True).values


def zero_out_normalize(c):
    """Clamp negatives to zero, then L2-normalize each location over channels.

    Input (B, T, H, W).  All-zero locations stay zero; the result has
    entries in [0, 1] and unit (or zero) per-location norm, and is idempotent.
    """
    return l2_normalize_locations(torch.clamp(c, min=0))


def filtered_correlation(f, t):
    """Full matching chain for one feature map: (B, C, H, W) -> (B, t, H, W)."""
    b, _, h, w = f.shape
    corr = self_correlation(l2_normalize_locations(f))
    top = topk_sort(corr, t)
    return zero_out_normalize(top.reshape(b, h, w, t).permute(0, 3, 1, 2).contiguous())


def cycle_fc(x, weight, bias, step_h, step_w, dilation=1):
    """Channel FC whose inputs are gathered from cyclically offset positions.

    Output(m, n, :) = sum_c x(m + d*dm(c), n + d*dn(c), c) * weight[c, :] + bias
    with dm(c) = (c mod step_h) - step_h//2 and
    dn(c) = ((c // step_h) mod step_w) - step_w//2, out-of-bounds reads as
    zero.  With step_h == step_w == 1 this is exactly a per-location channel
    FC.  ``x`` is (B, C_in, H, W); ``weight`` is (C_in, C_out).
    """
    if dilation < 1:
        raise ConfigError(f"dilation must be >= 1, got {dilation}")
    b, c_in, h, w = x.shape
    if weight.shape[0] != c_in:
        raise ShapeError(f"weight rows {weight.shape[0]} != input channels {c_in}")
    pad_h = dilation * (step_h // 2)
    pad_w = dilation * (step_w // 2)
    if pad_h or pad_w:
        padded = F.pad(x, (pad_w, pad_w, pad_h, pad_h))
        channels = torch.arange(c_in, device=x.device)
        dm = (channels % step_h - step_h // 2) * dilation
        dn = (channels // step_h % step_w - step_w // 2) * dilation
        gathered = torch.empty_like(x)
        for off_m, off_n in {(int(m), int(n)) for m, n in zip(dm, dn)}:
            sel = (dm == off_m) & (dn == off_n)
            gathered[:, sel] = padded[:, sel,
                                      pad_h + off_m:pad_h + off_m + h,
                                      pad_w + off_n:pad_w + off_n + w]
    else:
        gathered = x
    out = torch.einsum("bchw,co->bohw", gathered, weight)
    return out + bias.reshape(1, -1, 1, 1)


class CycleFC(nn.Module):
    def __init__(self, in_channels, out_channels, step_h, step_w, dilation=1):
        super().__init__()
        self.step_h = step_h
        self.step_w = step_w
        self.dilation = dilation
        self.weight = nn.Parameter(torch.empty(in_channels, out_channels))
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, x):
        return cycle_fc(x, self.weight, self.bias, self.step_h, self.step_w, self.dilation)


class PyramidPooling(nn.Module):
    """Multi-bin context head for the coarsest correlation map.

    Adaptive average pooling to 1x1/2x2/3x3/6x6 grids, a 1x1 conv per branch,
    bilinear resize back, concatenation with the input, and a 3x3 fusion conv.
    """

    def __init__(self, in_channels, out_channels, bins=PPM_BINS):
        super().__init__()
        self.bins = tuple(bins)
        self.branch_convs = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, 1) for _ in self.bins)
        # replicate padding keeps spatially-constant inputs constant at borders
        self.fuse = nn.Conv2d(in_channels + len(self.bins) * out_channels, out_channels,
                              3, padding=1, padding_mode="replicate")

    def pooled_branches(self, x):
        """Per-bin pooled maps before the branch convs; for inspection."""
        return [F.adaptive_avg_pool2d(x, bin_size) for bin_size in self.bins]

    def forward(self, x):
        size = x.shape[-2:]
        paths = [x]
        for pooled, conv in zip(self.pooled_branches(x), self.branch_convs):
            paths.append(resize_to(conv(pooled), size))
        return self.fuse(torch.cat(paths, dim=1))


class MultiScaleCycleFC(nn.Module):
    """Nine parallel cycle FC branches with learned mixing weights.

    Branch outputs are scaled by per-branch weights, summed, passed through a
    channel-wise linear map, added back to the input, then fused by a 3x3
    conv with ReLU.
    """

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.branches = nn.ModuleList(
            CycleFC(in_channels, in_channels, sh, sw, d) for sh, sw, d in CYCLE_FC_BRANCHES)
        self.branch_weights = nn.Parameter(torch.ones(len(CYCLE_FC_BRANCHES)))
        self.linear = nn.Conv2d(in_channels, in_channels, 1)
        self.fuse = nn.Conv2d(in_channels, out_channels, 3, padding=1)

    def pre_fuse(self, x):
        """Residual tensor fed to the fusion conv."""
        mixed = sum(w * branch(x) for w, branch in zip(self.branch_weights, self.branches))
        return x + self.linear(mixed)

    def forward(self, x):
        return F.relu(self.fuse(self.pre_fuse(x)))


class MaskReconstruction(nn.Module):
    """Three upsample + 1x1 conv + ReLU steps, then a 1x1 conv with softmax."""

    def __init__(self, channels):
        super().__init__()
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in range(3))
        self.classify = nn.Conv2d(channels, 2, 1)

    def forward(self, x):
        for conv in self.convs:
            x = F.relu(conv(upsample2x(x)))
        return torch.softmax(self.classify(x), dim=1)


class MaskDecoder(nn.Module):
    """Pyramid in, softmax mask plus the six distillation tensors out.

    The distillation bundle is [mask, reinforced map, recalibrated maps 1-4],
    the recalibrated maps at their native scales.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        enc = config.encoder
        d = config.decoder.fpn_channels
        self.level_top_t = config.level_top_t()
        self.downsample_f1 = OverlapPatchMerge(enc.channels[0], enc.channels[0], 3, 2, 1)
        self.lateral = nn.ModuleList(
            nn.Conv2d(t, d, 1) for t in self.level_top_t[:3])
        self.ppm = PyramidPooling(self.level_top_t[3], d)
        self.smooth = nn.ModuleList(nn.Conv2d(d, d, 3, padding=1) for _ in range(3))
        self.mscfc = MultiScaleCycleFC(4 * d, config.decoder.mscfc_channels)
        self.mask_head = MaskReconstruction(config.decoder.mscfc_channels)

    def correlation_maps(self, pyramid):
        """Filtered correlation maps for all four levels."""
        feats = [self.downsample_f1(pyramid[0]), pyramid[1], pyramid[2], pyramid[3]]
        maps = []
        for f, t in zip(feats, self.level_top_t):
            locations = f.shape[-2] * f.shape[-1]
            if locations < t:
                raise ShapeError(
                    f"correlation map has {locations} locations but top-T is {t}; "
                    "input smaller than the configured image size")
            maps.append(filtered_correlation(f, t))
        return maps

    def integrate(self, corr_maps):
        """FPN-style top-down fusion to one stride-8 tensor, plus the
        recalibrated per-level maps."""
        c1, c2, c3 = (conv(m) for conv, m in zip(self.lateral, corr_maps[:3]))
        c4 = self.ppm(corr_maps[3])
        f3 = c3 + upsample2x(c4)
        f2 = c2 + upsample2x(f3)
        f1 = c1 + f2
        size = f1.shape[-2:]
        paths = [self.smooth[0](f1), self.smooth[1](f2), self.smooth[2](f3), c4]
        fused = torch.cat([resize_to(p, size) for p in paths], dim=1)
        return fused, [c1, c2, c3, c4]

    def forward(self, pyramid):
        corr_maps = self.correlation_maps(pyramid)
        fused, recalibrated = self.integrate(corr_maps)
        reinforced = self.mscfc(fused)
        mask = self.mask_head(reinforced)
        return mask, [mask, reinforced, *recalibrated]
