"""Single-image inference with file outputs.

Images whose sides are not multiples of 32 are reflection-padded on the
bottom and right edges up to the next multiple, run through the model, and
the probability map is cropped back, so the written mask always matches the
input size.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import Checkpoint, load_checkpoint, model_from_checkpoint
from .errors import DataError
from .metrics import DEFAULT_THRESHOLD, image_to_tensor

STRIDE = 32


def _pad_amount(n: int) -> int:
    return (-n) % STRIDE


def pad_to_stride(image: np.ndarray) -> np.ndarray:
    """Reflection-pad (H, W, 3) so both sides divide by 32."""
    h, w = image.shape[:2]
    ph, pw = _pad_amount(h), _pad_amount(w)
    if ph == 0 and pw == 0:
        return image
    if ph >= h or pw >= w:
        raise DataError(
            f"image {h}x{w} too small to pad to a multiple of {STRIDE}")
    return np.pad(image, ((0, ph), (0, pw), (0, 0)), mode="reflect")


def predict_probability_map(model, image: np.ndarray) -> np.ndarray:
    """Forged-class probabilities at input resolution, padding handled."""
    h, w = image.shape[:2]
    padded = pad_to_stride(image)
    model.eval()
    with torch.no_grad():
        batch = image_to_tensor(padded).unsqueeze(0)
        mask = model.predict_mask(batch.to(next(model.parameters()).dtype))
    return mask[0, 1, :h, :w].detach().cpu().numpy().astype(np.float64)


def make_overlay(image: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Blend predicted forged pixels toward red for a quick visual check."""
    overlay = image.astype(np.float64).copy()
    red = np.array([255.0, 0.0, 0.0])
    overlay[pred] = 0.5 * overlay[pred] + 0.5 * red
    return np.round(overlay).clip(0, 255).astype(np.uint8)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    try:
        return np.asarray(Image.open(path).convert("RGB"))
    except OSError as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc


def infer(model_or_checkpoint, image_path, mask_out, overlay_out=None,
          threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Run one image through the model and write mask (+ overlay) files.

    Returns a summary dict with the forged pixel fraction and output paths.
    """
    model = model_or_checkpoint
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    image = load_image(image_path)
    prob = predict_probability_map(model, image)
    pred = prob > threshold
    mask_out = Path(mask_out)
    mask_out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(pred, 255, 0).astype(np.uint8), mode="L").save(mask_out)
    result = {
        "image": str(image_path),
        "mask": str(mask_out),
        "forged_fraction": float(pred.mean()),
        "threshold": threshold,
    }
    if overlay_out is not None:
        overlay_out = Path(overlay_out)
        overlay_out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(make_overlay(image, pred), mode="RGB").save(overlay_out)
        result["overlay"] = str(overlay_out)
    return result
