"""Pooling-based distillation losses and the segmentation loss.

Knowledge is transferred between an old and a new model by comparing pooled
summaries of a bundle of intermediate tensors rather than the raw tensors:
cube pooling slides averaging windows over space and over channels, strip
pooling summarises grid blocks by their row and column means.  Both losses
are plain L2 distances between the pooled teacher and student tensors.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

from .config import DistillConfig
from .errors import DataError, ShapeError

LOG_EPS = 1e-12


def cube_pool_spatial(x: torch.Tensor, p: int) -> torch.Tensor:
    """Average over every p x p spatial window, stride 1, no padding."""
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    if p < 1 or p > min(x.shape[-2], x.shape[-1]):
        raise ShapeError(f"spatial kernel {p} does not fit {tuple(x.shape)}")
    return F.avg_pool2d(x, kernel_size=p, stride=1)


def cube_pool_channel(x: torch.Tensor, p: int) -> torch.Tensor:
    """Average over every window of p consecutive channels, stride 1."""
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    if p < 1 or p > x.shape[1]:
        raise ShapeError(f"channel kernel {p} does not fit {tuple(x.shape)}")
    return x.unfold(1, p, 1).mean(dim=-1)


def effective_cube_kernels(x: torch.Tensor, spatial: Sequence[int],
                           channel: Sequence[int]):
    """Clamp kernels to what fits this tensor, deduplicated, order kept.

    Returns (spatial_kernels, channel_kernels) actually applied to ``x``.
    """
    side = min(x.shape[-2], x.shape[-1])
    out_s, out_c = [], []
    for p in spatial:
        q = min(p, side)
        if q not in out_s:
            out_s.append(q)
    for p in channel:
        q = min(p, x.shape[1])
        if q not in out_c:
            out_c.append(q)
    return out_s, out_c


def _check_bundles(teacher, student):
    if len(teacher) != len(student):
        raise ShapeError(
            f"bundle length mismatch: teacher {len(teacher)}, student {len(student)}")
    if not teacher:
        raise ShapeError("empty tensor bundle")
    for k, (t, s) in enumerate(zip(teacher, student)):
        if t.shape != s.shape:
            raise ShapeError(
                f"bundle member {k}: teacher shape {tuple(t.shape)} "
                f"!= student shape {tuple(s.shape)}")


def cube_distill_loss(teacher, student, config: DistillConfig) -> torch.Tensor:
    """Mean over bundle members of the mean pooled L2 distance.

    Each member contributes the average, over its applicable cube kernels,
    of || pool(teacher) - pool(student) ||_2 on the flattened tensors.
    """
    _check_bundles(teacher, student)
    total = teacher[0].new_zeros(())
    for t, s in zip(teacher, student):
        ks, kc = effective_cube_kernels(t, config.cube_spatial_kernels,
                                        config.cube_channel_kernels)
        member = t.new_zeros(())
        for p in ks:
            member = member + torch.linalg.vector_norm(
                cube_pool_spatial(t, p) - cube_pool_spatial(s, p))
        for p in kc:
            member = member + torch.linalg.vector_norm(
                cube_pool_channel(t, p) - cube_pool_channel(s, p))
        total = total + member / (len(ks) + len(kc))
    return total / len(teacher)


def strip_pool_block(block: torch.Tensor) -> torch.Tensor:
    """Row means then column means of one block, concatenated.

    (B, C, h, w) -> (B, C, h + w): the h means taken across the width
    followed by the w means taken down the height.
    """
    if block.dim() != 4:
        raise ShapeError(f"expected (B, C, h, w), got {tuple(block.shape)}")
    rows = block.mean(dim=-1)
    cols = block.mean(dim=-2)
    return torch.cat([rows, cols], dim=-1)


def strip_pool_grid(x: torch.Tensor, q: int) -> torch.Tensor:
    """Split into a q x q grid and strip-pool each block, row major."""
    b, c, h, w = x.shape
    if h % q or w % q:
        raise ShapeError(f"grid {q} does not divide spatial size {(h, w)}")
    bh, bw = h // q, w // q
    pieces = []
    for i in range(q):
        for j in range(q):
            pieces.append(strip_pool_block(
                x[:, :, i * bh:(i + 1) * bh, j * bw:(j + 1) * bw]))
    return torch.cat(pieces, dim=-1)


def strip_grid_sizes(x: torch.Tensor, max_q: int):
    """Grid sizes 1..max_q that tile this tensor exactly."""
    h, w = x.shape[-2], x.shape[-1]
    return [q for q in range(1, max_q + 1) if h % q == 0 and w % q == 0]


def strip_descriptor(x: torch.Tensor, max_q: int) -> torch.Tensor:
    """Concatenated strip poolings over every applicable grid size."""
    if x.dim() != 4:
        raise ShapeError(f"expected (B, C, H, W), got {tuple(x.shape)}")
    sizes = strip_grid_sizes(x, max_q)
    if not sizes:
        raise ShapeError(f"no grid size up to {max_q} tiles {tuple(x.shape)}")
    return torch.cat([strip_pool_grid(x, q) for q in sizes], dim=-1)


def strip_distill_loss(teacher, student, config: DistillConfig) -> torch.Tensor:
    """Mean over bundle members of the strip-descriptor L2 distance.

    The first member is the predicted mask and uses the finer grid set;
    every other member uses the feature grid set.
    """
    _check_bundles(teacher, student)
    total = teacher[0].new_zeros(())
    for k, (t, s) in enumerate(zip(teacher, student)):
        max_q = config.strip_q_mask if k == 0 else config.strip_q_feature
        total = total + torch.linalg.vector_norm(
            strip_descriptor(t, max_q) - strip_descriptor(s, max_q))
    return total / len(teacher)


def mask_cross_entropy(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged negative log probability of the true class.

    ``pred`` holds per-pixel class probabilities (B, 2, H, W); ``target``
    is the one-hot ground truth of the same shape.
    """
    if pred.shape != target.shape:
        raise ShapeError(
            f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() != 4 or pred.shape[1] != 2:
        raise ShapeError(f"expected (B, 2, H, W), got {tuple(pred.shape)}")
    tv = target.detach()
    if not torch.all((tv == 0) | (tv == 1)):
        raise DataError("target mask is not one hot: values outside {0, 1}")
    if not torch.all(tv.sum(dim=1) == 1):
        raise DataError("target mask is not one hot: channel sums differ from 1")
    p_true = (pred * target).sum(dim=1).clamp_min(LOG_EPS)
    return -torch.log(p_true).mean()


def distillation_loss(teacher, student, config: DistillConfig):
    """lambda-weighted sum of the cube and strip losses, teacher detached."""
    teacher = [t.detach() for t in teacher]
    cube = cube_distill_loss(teacher, student, config)
    strip = strip_distill_loss(teacher, student, config)
    return config.distill_weight * (cube + strip), cube, strip


def total_loss(student_bundle, teacher_bundle, target, config: DistillConfig,
               ce_weight: float = 1.0):
    """Full continual-learning objective.

    ce weight * cross entropy on the student mask plus the weighted
    distillation distance to the frozen teacher.  Returns the scalar and a
    dict of the individual parts.
    """
    ce = mask_cross_entropy(student_bundle[0], target)
    if config.distill_weight == 0.0:
        parts = {"ce": ce, "cube": torch.zeros_like(ce),
                 "strip": torch.zeros_like(ce)}
        return ce_weight * ce, parts
    distill, cube, strip = distillation_loss(teacher_bundle, student_bundle, config)
    parts = {"ce": ce, "cube": cube, "strip": strip}
    return ce_weight * ce + distill, parts
