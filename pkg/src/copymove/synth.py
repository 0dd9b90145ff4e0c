"""Seeded synthetic copy-move forgeries in two visual domains.

Domain "a" images are smooth: broad gradients, soft blobs, gentle waves.
Domain "b" images are busy: fine procedural texture with strong local
contrast.  The gap in mean gradient magnitude between the two is what makes
them behave like different datasets for continual learning.

A forged sample copies one region of the background onto a disjoint
destination, optionally rotated and scaled.  The ground-truth mask marks
both the source and the pasted copy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, GenerationError

SHAPES = ("ellipse", "rectangle", "polygon")
DOMAINS = ("a", "b")
MAX_ATTEMPTS = 100


@dataclass(frozen=True)
class ForgerySpec:
    height: int
    width: int
    shape: str = "ellipse"
    size_fraction: float = 0.08
    rotation: float = 0.0
    scale: float = 1.0
    dest_offset: Optional[Tuple[int, int]] = None
    domain: str = "a"
    seed: int = 0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ConfigError(f"image size {(self.height, self.width)} too small")
        if self.shape not in SHAPES:
            raise ConfigError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if not 0.02 <= self.size_fraction <= 0.25:
            raise ConfigError(
                f"size_fraction {self.size_fraction} outside [0.02, 0.25]")
        if not -45.0 <= self.rotation <= 45.0:
            raise ConfigError(f"rotation {self.rotation} outside [-45, 45]")
        if not 0.7 <= self.scale <= 1.3:
            raise ConfigError(f"scale {self.scale} outside [0.7, 1.3]")
        if self.domain not in DOMAINS:
            raise ConfigError(f"domain must be one of {DOMAINS}, got {self.domain!r}")


@dataclass
class Sample:
    image: np.ndarray      # (H, W, 3) uint8
    mask: np.ndarray       # (H, W) uint8, values {0, 255}
    domain: str
    seed: int
    spec: Optional[ForgerySpec] = None


def _smooth_background(rng, h, w):
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    theta = rng.uniform(0, 2 * math.pi)
    base = (math.cos(theta) * ii / h + math.sin(theta) * jj / w)
    base = base + 0.35 * np.sin(2 * math.pi * (rng.uniform(0.5, 1.5) * ii / h
                                               + rng.uniform(0.5, 1.5) * jj / w)
                                + rng.uniform(0, 2 * math.pi))
    for _ in range(3):
        ci, cj = rng.uniform(0, h), rng.uniform(0, w)
        sigma = rng.uniform(0.15, 0.3) * min(h, w)
        d2 = (ii - ci) ** 2 + (jj - cj) ** 2
        base = base + rng.uniform(-0.8, 0.8) * np.exp(-d2 / (2 * sigma * sigma))
    channels = []
    for _ in range(3):
        chan = base * rng.uniform(0.7, 1.0) + rng.uniform(-0.2, 0.2)
        channels.append(chan)
    img = np.stack(channels, axis=-1)
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    return np.round(25 + 205 * img).astype(np.uint8)


def _textured_background(rng, h, w):
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    noise = rng.uniform(0.0, 1.0, size=(h, w))
    theta = rng.uniform(0, 2 * math.pi)
    period = rng.uniform(3.0, 5.0)
    wave = np.sin(2 * math.pi * (math.cos(theta) * ii + math.sin(theta) * jj)
                  / period + rng.uniform(0, 2 * math.pi))
    base = 0.65 * noise + 0.35 * (0.5 + 0.5 * wave)
    channels = []
    for _ in range(3):
        chan = base + 0.15 * rng.uniform(0.0, 1.0, size=(h, w))
        channels.append(chan)
    img = np.stack(channels, axis=-1)
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    return np.round(255 * img).astype(np.uint8)


def make_background(domain: str, rng, h: int, w: int) -> np.ndarray:
    if domain == "a":
        return _smooth_background(rng, h, w)
    return _textured_background(rng, h, w)


def mean_gradient_magnitude(image: np.ndarray) -> float:
    """Mean per-pixel gradient magnitude of the grayscale image."""
    gray = image.astype(np.float64).mean(axis=-1)
    gi, gj = np.gradient(gray)
    return float(np.sqrt(gi * gi + gj * gj).mean())


def _region_extent(spec, rng):
    """Half-extent of the source region and a closure drawing its mask."""
    area = spec.size_fraction * spec.height * spec.width
    if spec.shape == "ellipse":
        ar = rng.uniform(0.6, 1.6)
        rh = math.sqrt(area * ar / math.pi)
        rw = area / (math.pi * rh)
        extent = max(rh, rw)

        def draw(ci, cj, ii, jj):
            return ((ii - ci) / rh) ** 2 + ((jj - cj) / rw) ** 2 <= 1.0
    elif spec.shape == "rectangle":
        ar = rng.uniform(0.6, 1.6)
        a = math.sqrt(area * ar) / 2.0
        b = area / (4.0 * a)
        extent = max(a, b)

        def draw(ci, cj, ii, jj):
            return (np.abs(ii - ci) <= a) & (np.abs(jj - cj) <= b)
    else:
        k = int(rng.integers(3, 7))
        r0 = math.sqrt(2.0 * area / (k * math.sin(2 * math.pi / k)))
        angles = np.sort(rng.uniform(0, 2 * math.pi, size=k))
        radii = r0 * rng.uniform(0.75, 1.25, size=k)
        extent = float(radii.max())

        def draw(ci, cj, ii, jj):
            phi = np.arctan2(jj - cj, ii - ci) % (2 * math.pi)
            ang = np.concatenate([angles, [angles[0] + 2 * math.pi]])
            rad = np.concatenate([radii, [radii[0]]])
            boundary = np.interp(phi, ang, rad, period=2 * math.pi)
            dist = np.hypot(ii - ci, jj - cj)
            return dist <= boundary
    return extent, draw


def _warp_region(src_mask, image, spec, src_center, dst_center):
    """Rotate/scale the source about its center onto the destination."""
    theta = math.radians(spec.rotation)
    c, s = math.cos(theta), math.sin(theta)
    inv = np.array([[c, s], [-s, c]]) / spec.scale
    offset = np.asarray(src_center) - inv @ np.asarray(dst_center)
    dst_mask = ndimage.affine_transform(
        src_mask.astype(np.float32), inv, offset=offset, order=0,
        mode="constant", cval=0.0) > 0.5
    warped = np.empty_like(image)
    img_f = image.astype(np.float64)
    for ch in range(image.shape[-1]):
        warped[..., ch] = np.clip(np.round(ndimage.affine_transform(
            img_f[..., ch], inv, offset=offset, order=1,
            mode="constant", cval=0.0)), 0, 255).astype(np.uint8)
    return dst_mask, warped


def _shift_region(src_mask, di, dj):
    coords = np.argwhere(src_mask)
    shifted = coords + np.array([di, dj])
    h, w = src_mask.shape
    if shifted.min() < 0 or shifted[:, 0].max() >= h or shifted[:, 1].max() >= w:
        return None
    dst = np.zeros_like(src_mask)
    dst[shifted[:, 0], shifted[:, 1]] = True
    return dst


def generate_sample(spec: ForgerySpec) -> Sample:
    """Deterministic forged sample; raises after 100 failed placements."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.height, spec.width
    image = make_background(spec.domain, rng, h, w)
    pure_copy = spec.rotation == 0.0 and spec.scale == 1.0
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)

    for _ in range(MAX_ATTEMPTS):
        extent, draw = _region_extent(spec, rng)
        margin = int(math.ceil(extent * max(1.0, spec.scale))) + 2
        if 2 * margin >= h or 2 * margin >= w:
            raise GenerationError(
                f"region of fraction {spec.size_fraction} cannot fit in {(h, w)}")
        ci = float(rng.uniform(margin, h - margin))
        cj = float(rng.uniform(margin, w - margin))
        if spec.dest_offset is not None:
            di, dj = spec.dest_offset
        else:
            di = float(rng.uniform(margin, h - margin)) - ci
            dj = float(rng.uniform(margin, w - margin)) - cj
        src_mask = draw(ci, cj, ii, jj)
        n_src = int(src_mask.sum())
        if n_src == 0:
            continue
        if pure_copy:
            dst_mask = _shift_region(src_mask, int(round(di)), int(round(dj)))
            if dst_mask is None:
                continue
            warped = None
        else:
            dst_mask, warped = _warp_region(
                src_mask, image, spec, (ci, cj), (ci + di, cj + dj))
        n_dst = int(dst_mask.sum())
        expected = n_src * spec.scale * spec.scale
        if n_dst < 0.6 * expected or n_dst > 1.6 * expected:
            continue
        if (src_mask & dst_mask).any():
            continue
        out = image.copy()
        if pure_copy:
            coords = np.argwhere(src_mask)
            out[coords[:, 0] + int(round(di)), coords[:, 1] + int(round(dj))] = \
                image[coords[:, 0], coords[:, 1]]
        else:
            out[dst_mask] = warped[dst_mask]
        mask = np.where(src_mask | dst_mask, 255, 0).astype(np.uint8)
        return Sample(image=out, mask=mask, domain=spec.domain,
                      seed=spec.seed, spec=spec)
    raise GenerationError(
        f"no valid placement after {MAX_ATTEMPTS} attempts for seed {spec.seed}")


def generate_pristine(domain: str, seed: int, height: int, width: int) -> Sample:
    rng = np.random.default_rng(seed)
    image = make_background(domain, rng, height, width)
    mask = np.zeros((height, width), dtype=np.uint8)
    return Sample(image=image, mask=mask, domain=domain, seed=seed)


def _draw_spec(rng, domain, height, width, seed):
    shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
    size_fraction = float(rng.uniform(0.04, 0.12))
    if rng.uniform() < 0.5:
        rotation, scale = 0.0, 1.0
    else:
        rotation = float(rng.uniform(-30.0, 30.0))
        scale = float(rng.uniform(0.8, 1.25))
    return ForgerySpec(height=height, width=width, shape=shape,
                       size_fraction=size_fraction, rotation=rotation,
                       scale=scale, domain=domain, seed=seed)


def generate_dataset(n: int, domain: str, seed: int, out_dir,
                     n_pristine: int = 0, height: int = 64,
                     width: int = 64) -> Path:
    """Write n forged samples (plus optional pristine ones) and a manifest.

    Layout under out_dir: images/NNNN.png, masks/NNNN.png, specs/NNNN.json,
    manifest.txt.  Each manifest line is tab separated: image path, mask
    path, domain, seed, with paths relative to the manifest.
    """
    if domain not in DOMAINS:
        raise ConfigError(f"domain must be one of {DOMAINS}, got {domain!r}")
    if n < 0 or n_pristine < 0:
        raise ConfigError("sample counts must be non-negative")
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "specs"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    master = np.random.default_rng(seed)
    lines = []
    for i in range(n + n_pristine):
        sample_seed = int(master.integers(0, 2 ** 31 - 1))
        if i < n:
            # a drawn spec can be unplaceable (large region, small canvas);
            # redraw from the same master stream so output stays deterministic
            for retry in range(20):
                try:
                    spec = _draw_spec(master, domain, height, width, sample_seed)
                    sample = generate_sample(spec)
                    break
                except GenerationError:
                    if retry == 19:
                        raise
                    sample_seed = int(master.integers(0, 2 ** 31 - 1))
        else:
            sample = generate_pristine(domain, sample_seed, height, width)
        img_rel = f"images/{i:04d}.png"
        msk_rel = f"masks/{i:04d}.png"
        Image.fromarray(sample.image, mode="RGB").save(out_dir / img_rel)
        Image.fromarray(sample.mask, mode="L").save(out_dir / msk_rel)
        record = {"domain": sample.domain, "seed": sample.seed,
                  "forged": sample.spec is not None}
        if sample.spec is not None:
            record["spec"] = asdict(sample.spec)
        with open(out_dir / "specs" / f"{i:04d}.json", "w") as fh:
            json.dump(record, fh, indent=1, sort_keys=True)
        lines.append(f"{img_rel}\t{msk_rel}\t{sample.domain}\t{sample.seed}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


def load_dataset(manifest_path) -> list:
    """Read samples listed in a manifest; masks must be strictly {0, 255}."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    samples = []
    for lineno, line in enumerate(manifest_path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(
                f"{manifest_path}:{lineno}: expected 4 tab-separated fields, "
                f"got {len(parts)}")
        img_rel, msk_rel, domain, seed_text = parts
        img_path, msk_path = root / img_rel, root / msk_rel
        if not img_path.exists():
            raise DataError(f"{manifest_path}:{lineno}: missing image {img_path}")
        if not msk_path.exists():
            raise DataError(f"{manifest_path}:{lineno}: missing mask {msk_path}")
        try:
            image = np.asarray(Image.open(img_path).convert("RGB"))
            mask = np.asarray(Image.open(msk_path).convert("L"))
        except OSError as exc:
            raise DataError(
                f"{manifest_path}:{lineno}: unreadable file: {exc}") from exc
        bad = set(np.unique(mask)) - {0, 255}
        if bad:
            raise DataError(
                f"{manifest_path}:{lineno}: mask {msk_path} has values "
                f"{sorted(bad)[:4]} outside {{0, 255}}")
        if image.shape[:2] != mask.shape:
            raise DataError(
                f"{manifest_path}:{lineno}: image {image.shape[:2]} and mask "
                f"{mask.shape} sizes differ")
        try:
            seed = int(seed_text)
        except ValueError as exc:
            raise DataError(
                f"{manifest_path}:{lineno}: bad seed {seed_text!r}") from exc
        samples.append(Sample(image=image.copy(), mask=mask.copy(),
                              domain=domain, seed=seed))
    return samples
