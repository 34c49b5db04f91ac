"""Seeded image augmentation: the seven training-time transforms
(brightness, contrast, motion blur, horizontal flip, shift, scale, rotate)
and the per-class count-expansion protocol."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

# Images are numpy uint8 arrays of shape (height, width, 3), RGB, row-major.


def load_image(path: Path | str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(img: np.ndarray, path: Path | str) -> None:
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"expected uint8 RGB image of shape (h, w, 3), got {img.shape} {img.dtype}")


def _quantize(arr: np.ndarray) -> np.ndarray:
    # round half-up, then clamp to the 8-bit range
    return np.clip(np.floor(arr + 0.5), 0, 255).astype(np.uint8)


@dataclass
class AugmentConfig:
    """Limits, per-transform probability, and expansion target for one
    augmentation run. Every random draw derives from ``seed``."""

    brightness_limit: float = 0.2
    contrast_limit: float = 0.2
    blur_kernel_max: int = 7
    shift_limit: float = 0.0625
    scale_limit: float = 0.1
    rotate_limit: float = 15.0
    per_transform_probability: float = 0.5
    target_per_class: int = 2100
    seed: int = 0

    def validate(self) -> None:
        for name in ("brightness_limit", "contrast_limit", "shift_limit",
                     "scale_limit", "rotate_limit"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.blur_kernel_max < 3 or self.blur_kernel_max % 2 == 0:
            raise ValueError("blur_kernel_max must be an odd integer >= 3")
        if not 0.0 <= self.per_transform_probability <= 1.0:
            raise ValueError("per_transform_probability must be in [0, 1]")


@dataclass
class VariantProvenance:
    """Where one output image came from and which transforms produced it."""

    variant_id: str
    source_id: str
    transforms: list[dict] = field(default_factory=list)


@dataclass
class AugmentedImage:
    id: str
    source_id: str
    pixels: np.ndarray


def apply_brightness(img: np.ndarray, delta: float) -> np.ndarray:
    """Scale every sample by (1 + delta), saturating at the 8-bit bounds."""
    _check_image(img)
    return _quantize(img.astype(np.float64) * (1.0 + delta))


def apply_contrast(img: np.ndarray, delta: float) -> np.ndarray:
    """Stretch samples about the image's gray mean by (1 + delta)."""
    _check_image(img)
    f = img.astype(np.float64)
    mean = f.mean()
    return _quantize(mean + (f - mean) * (1.0 + delta))


def _line_kernel(size: int, angle_deg: float) -> np.ndarray:
    """One-pixel-wide line through the kernel center; weights sum to 1."""
    center = (size - 1) / 2.0
    rad = math.radians(angle_deg)
    dx, dy = math.cos(rad), -math.sin(rad)  # image y axis points down
    kernel = np.zeros((size, size), dtype=np.float64)
    for t in np.linspace(-center, center, size):
        col = int(round(center + t * dx))
        row = int(round(center + t * dy))
        kernel[row, col] = 1.0
    return kernel / kernel.sum()


def apply_motion_blur(img: np.ndarray, kernel_size: int, angle: float) -> np.ndarray:
    """Convolve with a normalized line kernel; borders are replicated."""
    _check_image(img)
    if kernel_size < 3 or kernel_size % 2 == 0:
        raise ValueError("kernel_size must be an odd integer >= 3")
    if kernel_size > min(img.shape[0], img.shape[1]):
        raise ValueError("kernel_size exceeds image dimensions")
    kernel = _line_kernel(kernel_size, angle)
    f = img.astype(np.float64)
    out = np.stack(
        [ndimage.correlate(f[..., c], kernel, mode="nearest") for c in range(3)],
        axis=-1,
    )
    return _quantize(out)


def apply_hflip(img: np.ndarray) -> np.ndarray:
    """Reverse column order; an involution."""
    _check_image(img)
    return img[:, ::-1].copy()


def apply_shift_scale_rotate(img: np.ndarray, shift_x: float, shift_y: float,
                             scale: float, angle: float) -> np.ndarray:
    """Single affine warp about the image center: rotate by ``angle`` degrees,
    scale, then translate by (shift_x*width, shift_y*height). Bilinear
    sampling, border replication, output size unchanged."""
    _check_image(img)
    if scale <= 0:
        raise ValueError("scale must be > 0")
    height, width = img.shape[:2]
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    tx, ty = shift_x * width, shift_y * height

    rad = math.radians(angle)
    cos_a, sin_a = math.cos(rad), math.sin(rad)
    # forward map (xy): dest = scale * R(angle) @ (src - c) + c + t
    # inverse map:      src  = (1/scale) * R(-angle) @ (dest - c - t) + c
    inv = np.array([[cos_a, sin_a], [-sin_a, cos_a]], dtype=np.float64) / scale
    offset_xy = np.array([cx, cy]) - inv @ np.array([cx + tx, cy + ty])

    # scipy.ndimage indexes as (row, col) = (y, x)
    swap = np.array([[0.0, 1.0], [1.0, 0.0]])
    matrix_rc = swap @ inv @ swap
    offset_rc = offset_xy[::-1]

    f = img.astype(np.float64)
    out = np.stack(
        [ndimage.affine_transform(f[..., c], matrix_rc, offset=offset_rc,
                                  order=1, mode="nearest")
         for c in range(3)],
        axis=-1,
    )
    return _quantize(out)


def _valid_blur_sizes(cfg: AugmentConfig, img: np.ndarray) -> list[int]:
    limit = min(cfg.blur_kernel_max, min(img.shape[0], img.shape[1]))
    return [s for s in range(3, limit + 1, 2)]


def random_variant(img: np.ndarray, cfg: AugmentConfig,
                   rng: np.random.Generator) -> tuple[np.ndarray, list[dict]]:
    """Apply an independently drawn subset of the seven transforms.

    Each transform is included with ``cfg.per_transform_probability``;
    parameters are uniform within the configured limits. Shift, scale, and
    rotate are realized as one composite warp (excluded ones stay at their
    identity parameters). Returns the image and the applied-transform list.
    """
    include = rng.random(7) < cfg.per_transform_probability
    applied: list[dict] = []
    out = img

    if include[0]:
        delta = float(rng.uniform(-cfg.brightness_limit, cfg.brightness_limit))
        out = apply_brightness(out, delta)
        applied.append({"name": "brightness", "delta": delta})
    if include[1]:
        delta = float(rng.uniform(-cfg.contrast_limit, cfg.contrast_limit))
        out = apply_contrast(out, delta)
        applied.append({"name": "contrast", "delta": delta})
    if include[2]:
        sizes = _valid_blur_sizes(cfg, out)
        if sizes:
            ksize = int(rng.choice(sizes))
            angle = float(rng.uniform(0.0, 180.0))
            out = apply_motion_blur(out, ksize, angle)
            applied.append({"name": "motion_blur", "kernel_size": ksize, "angle": angle})
    if include[3]:
        out = apply_hflip(out)
        applied.append({"name": "hflip"})

    shift_x = shift_y = 0.0
    scale = 1.0
    angle = 0.0
    if include[4]:
        shift_x = float(rng.uniform(-cfg.shift_limit, cfg.shift_limit))
        shift_y = float(rng.uniform(-cfg.shift_limit, cfg.shift_limit))
        applied.append({"name": "shift", "shift_x": shift_x, "shift_y": shift_y})
    if include[5]:
        scale = 1.0 + float(rng.uniform(-cfg.scale_limit, cfg.scale_limit))
        applied.append({"name": "scale", "scale": scale})
    if include[6]:
        angle = float(rng.uniform(-cfg.rotate_limit, cfg.rotate_limit))
        applied.append({"name": "rotate", "angle": angle})
    if include[4] or include[5] or include[6]:
        out = apply_shift_scale_rotate(out, shift_x, shift_y, scale, angle)

    return out, applied


def augment_class_to_count(records, cfg: AugmentConfig, root: Path | str = ".",
                           ) -> tuple[list[AugmentedImage], list[VariantProvenance]]:
    """Expand one class to ``cfg.target_per_class`` images.

    Originals are kept as-is; the remaining (target - n) variants cycle
    round-robin over the source records, each drawing its own RNG stream
    from (cfg.seed, variant_index) so the output set is reproducible
    byte-for-byte and variants can be generated independently.
    """
    if not records:
        raise ValueError("augment_class_to_count: empty class")
    cfg.validate()
    if cfg.target_per_class < len(records):
        raise ValueError(
            f"target_per_class={cfg.target_per_class} below original count {len(records)}"
        )
    root = Path(root)

    originals: list[AugmentedImage] = []
    for rec in records:
        path = Path(rec.path)
        pixels = load_image(path if path.is_absolute() else root / path)
        originals.append(AugmentedImage(id=rec.id, source_id=rec.id, pixels=pixels))

    images = list(originals)
    provenance = [VariantProvenance(o.id, o.id, []) for o in originals]
    n = len(originals)
    for j in range(cfg.target_per_class - n):
        src = originals[j % n]
        rng = np.random.default_rng([cfg.seed, j])
        pixels, applied = random_variant(src.pixels, cfg, rng)
        vid = f"{src.id}-aug{j:05d}"
        images.append(AugmentedImage(id=vid, source_id=src.id, pixels=pixels))
        provenance.append(VariantProvenance(vid, src.id, applied))
    return images, provenance


def write_augmented(images: list[AugmentedImage], provenance: list[VariantProvenance],
                    out_dir: Path | str) -> None:
    """Materialize an augmented set: PNG per image plus provenance.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for im in images:
        save_image(im.pixels, out_dir / f"{im.id}.png")
    rows = [
        {"variant_id": p.variant_id, "source_id": p.source_id, "transforms": p.transforms}
        for p in provenance
    ]
    (out_dir / "provenance.json").write_text(
        json.dumps(rows, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
