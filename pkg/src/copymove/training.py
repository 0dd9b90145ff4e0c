"""Supervised training and distillation-based continual learning.

Both entry points share one inner loop so that continual learning with the
distillation weight at zero follows the plain training trajectory exactly:
same batch order, same arithmetic, same optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .checkpoint import (Checkpoint, checkpoint_from_model, load_checkpoint,
                         model_from_checkpoint, save_checkpoint)
from .config import ModelConfig, DistillConfig, TrainConfig
from .distill import mask_cross_entropy, total_loss
from .errors import ConfigError, DivergenceError
from .metrics import image_to_tensor, mask_to_one_hot
from .model import build_model

_DTYPES = {"single": torch.float32, "double": torch.float64}


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def _precision_dtype(cfg: TrainConfig):
    try:
        return _DTYPES[cfg.precision]
    except KeyError:
        raise ConfigError(
            f"precision must be one of {sorted(_DTYPES)}, got {cfg.precision!r}")


def make_optimizer(model, cfg: TrainConfig):
    params = [p for p in model.parameters() if p.requires_grad]
    name = cfg.optimizer.lower()
    if name == "adamw":
        return torch.optim.AdamW(params, lr=cfg.learning_rate,
                                 weight_decay=cfg.weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    if name == "sgd":
        return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=0.9)
    raise ConfigError(f"unknown optimizer {cfg.optimizer!r}")


def _load_samples(cfg: TrainConfig, samples):
    if samples is None:
        if not cfg.train_manifest:
            raise ConfigError("no training samples and no train manifest")
        from .synth import load_dataset
        samples = load_dataset(cfg.train_manifest)
    if not samples:
        raise ConfigError("training dataset is empty")
    return samples


def _stack_samples(samples, dtype):
    images = torch.stack([image_to_tensor(s.image) for s in samples]).to(dtype)
    targets = torch.stack([mask_to_one_hot(s.mask) for s in samples]).to(dtype)
    return images, targets


def _fit(model, samples, cfg: TrainConfig,
         loss_fn: Callable) -> TrainResult:
    """Shared mini-batch loop.  loss_fn(mask, bundle, images, targets)."""
    optimizer = make_optimizer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    dtype = next(model.parameters()).dtype
    images, targets = _stack_samples(samples, dtype)
    model.train()
    step = 0
    epoch_losses, step_losses = [], []
    for _ in range(cfg.epochs):
        order = torch.from_numpy(rng.permutation(len(samples)))
        epoch_vals = []
        for start in range(0, len(samples), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = images[idx], targets[idx]
            mask, bundle = model(xb)
            loss = loss_fn(mask, bundle, xb, yb)
            if not bool(torch.isfinite(loss.detach())):
                raise DivergenceError(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.detach())
            step_losses.append(value)
            epoch_vals.append(value)
            step += 1
        epoch_losses.append(float(np.mean(epoch_vals)))
    result = TrainResult(checkpoint=checkpoint_from_model(model, training_step=step),
                         epoch_losses=epoch_losses, step_losses=step_losses)
    if cfg.checkpoint_path:
        save_checkpoint(result.checkpoint.params, result.checkpoint.config,
                        cfg.checkpoint_path, training_step=step)
    return result


def train(cfg: TrainConfig, model_config: Optional[ModelConfig] = None,
          model=None, samples=None) -> TrainResult:
    """Plain supervised training with the segmentation cross entropy."""
    samples = _load_samples(cfg, samples)
    if model is None:
        model = build_model(model_config or ModelConfig(),
                            dtype=_precision_dtype(cfg))

    def loss_fn(mask, bundle, xb, yb):
        return mask_cross_entropy(mask, yb)

    return _fit(model, samples, cfg, loss_fn)


def continual_learn(old_checkpoint, cfg: TrainConfig, distill_cfg: DistillConfig,
                    samples=None, ce_weight: float = 1.0) -> TrainResult:
    """Adapt a trained model to new data while staying near the teacher.

    The teacher is a frozen copy of the old checkpoint; the student starts
    from the same parameters and is the only model optimized.  Each batch
    runs through both models and minimizes the combined segmentation and
    distillation objective.
    """
    if not isinstance(old_checkpoint, Checkpoint):
        old_checkpoint = load_checkpoint(old_checkpoint)
    samples = _load_samples(cfg, samples)
    dtype = _precision_dtype(cfg)
    teacher = model_from_checkpoint(old_checkpoint, dtype=dtype)
    student = model_from_checkpoint(old_checkpoint, dtype=dtype)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)

    def loss_fn(mask, bundle, xb, yb):
        if distill_cfg.distill_weight == 0.0:
            return ce_weight * mask_cross_entropy(mask, yb)
        with torch.no_grad():
            _, teacher_bundle = teacher(xb)
        total, _ = total_loss(bundle, teacher_bundle, yb, distill_cfg,
                              ce_weight=ce_weight)
        return total

    return _fit(student, samples, cfg, loss_fn)
