"""Pixel-level F1 and image-level false-alarm evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, DataError

DEFAULT_THRESHOLD = 0.5
DEFAULT_FAR_FRACTION = 0.005


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W, 3) -> float32 (3, H, W) scaled to [0, 1]."""
    if image.ndim != 3 or image.shape[-1] != 3:
        raise DataError(f"expected (H, W, 3) image, got {image.shape}")
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)


def mask_to_one_hot(mask: np.ndarray) -> torch.Tensor:
    """uint8 {0, 255} (H, W) -> float32 one-hot (2, H, W), channel 1 forged."""
    forged = torch.from_numpy((mask > 0).astype(np.float32))
    return torch.stack([1.0 - forged, forged], dim=0)


def confusion_counts(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} vs ground truth {truth.shape}")
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return tp, fp, fn, tn


def f1_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """Pixel F1; 1.0 when both masks are empty, 0.0 when only one is."""
    tp, fp, fn, _ = confusion_counts(pred, truth)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


@dataclass
class EvalReport:
    per_image_f1: list = field(default_factory=list)
    mean_f1: Optional[float] = None
    far: Optional[float] = None
    threshold: float = DEFAULT_THRESHOLD
    far_pixel_fraction: float = DEFAULT_FAR_FRACTION
    n_forged: int = 0
    n_pristine: int = 0
    runtime_seconds: float = 0.0

    def to_dict(self):
        return {
            "per_image_f1": [float(x) for x in self.per_image_f1],
            "mean_f1": self.mean_f1,
            "far": self.far,
            "threshold": self.threshold,
            "far_pixel_fraction": self.far_pixel_fraction,
            "n_forged": self.n_forged,
            "n_pristine": self.n_pristine,
            "runtime_seconds": self.runtime_seconds,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def predict_forged_probability(model, image: np.ndarray) -> np.ndarray:
    """Forged-class probability map for one uint8 image."""
    model.eval()
    with torch.no_grad():
        batch = image_to_tensor(image).unsqueeze(0)
        mask = model.predict_mask(batch.to(next(model.parameters()).dtype))
    return mask[0, 1].detach().cpu().numpy().astype(np.float64)


def evaluate(model, samples, threshold: float = DEFAULT_THRESHOLD,
             far_fraction: float = DEFAULT_FAR_FRACTION) -> EvalReport:
    """Score a model on loaded samples.

    Images whose ground truth marks at least one forged pixel contribute a
    pixel F1; fully pristine images count toward the image-level false
    alarm rate instead (alarm when the predicted forged fraction exceeds
    far_fraction).
    """
    if not samples:
        raise ConfigError("evaluate needs at least one sample")
    start = time.perf_counter()
    f1s = []
    alarms = 0
    n_pristine = 0
    for sample in samples:
        prob = predict_forged_probability(model, sample.image)
        pred = prob > threshold
        truth = sample.mask > 0
        if truth.any():
            f1s.append(f1_score(pred, truth))
        else:
            n_pristine += 1
            if pred.mean() > far_fraction:
                alarms += 1
    report = EvalReport(
        per_image_f1=f1s,
        mean_f1=float(np.mean(f1s)) if f1s else None,
        far=(alarms / n_pristine) if n_pristine else None,
        threshold=threshold,
        far_pixel_fraction=far_fraction,
        n_forged=len(f1s),
        n_pristine=n_pristine,
        runtime_seconds=time.perf_counter() - start,
    )
    return report


def evaluate_manifest(model, manifest_path, threshold=DEFAULT_THRESHOLD,
                      far_fraction=DEFAULT_FAR_FRACTION) -> EvalReport:
    from .synth import load_dataset
    return evaluate(model, load_dataset(manifest_path),
                    threshold=threshold, far_fraction=far_fraction)


def write_report(report: EvalReport, path) -> None:
    Path(path).write_text(report.to_json() + "\n")
