"""Victim-side training defenses: cutout, mixup, cutmix, and JPEG round-trips.

Defenses transform batches during victim training only; mixing defenses return
convex label weights that the training loss consumes.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .datasets import ImageBatch

DEFENSE_KINDS = ("none", "cutout", "cutmix", "mixup", "jpeg")


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    mask_size: int = 8          # cutout / cutmix box side
    beta_param: float = 1.0     # mixup lambda ~ Beta(beta_param, beta_param)
    quality: int = 75           # jpeg quality
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if self.kind == "jpeg" and not 1 <= self.quality <= 100:
            raise ValueError(f"jpeg quality must be in [1, 100], got {self.quality}")
        if self.kind in ("cutout", "cutmix") and self.mask_size < 1:
            raise ValueError("mask_size must be >= 1")
        if self.kind in ("mixup", "cutmix") and self.beta_param <= 0:
            raise ValueError("beta_param must be positive")

    def label(self) -> str:
        if self.kind == "jpeg":
            return f"jpeg:{self.quality}"
        if self.kind == "cutout":
            return f"cutout:{self.mask_size}"
        if self.kind == "cutmix":
            return f"cutmix:{self.mask_size}"
        if self.kind == "mixup":
            return f"mixup:{self.beta_param:g}"
        return "none"


@dataclass
class DefendedBatch:
    """Transformed pixels plus the convex label combination (lam, 1 - lam)."""

    pixels: torch.Tensor
    labels_a: torch.Tensor
    labels_b: torch.Tensor
    lam: float


def mixed_cross_entropy(logits: torch.Tensor, defended: DefendedBatch) -> torch.Tensor:
    loss_a = F.cross_entropy(logits, defended.labels_a)
    if defended.lam == 1.0:
        return loss_a
    return defended.lam * loss_a + (1.0 - defended.lam) * F.cross_entropy(logits, defended.labels_b)


def mixup_images(x1: torch.Tensor, x2: torch.Tensor, lam: float) -> torch.Tensor:
    return lam * x1 + (1.0 - lam) * x2


def cutout_images(pixels: torch.Tensor, mask_size: int, rng: np.random.Generator) -> torch.Tensor:
    """Zero a seeded mask_size x mask_size square in every image."""
    _, _, H, W = pixels.shape
    if mask_size > H or mask_size > W:
        raise ValueError(f"cutout mask {mask_size} does not fit inside {H}x{W} images")
    out = pixels.clone()
    for b in range(len(out)):
        r = int(rng.integers(0, H - mask_size + 1))
        c = int(rng.integers(0, W - mask_size + 1))
        out[b, :, r : r + mask_size, c : c + mask_size] = 0.0
    return out


def cutmix_images(
    x1: torch.Tensor, x2: torch.Tensor, box_size: int, rng: np.random.Generator
) -> tuple[torch.Tensor, float]:
    """Paste one seeded box from x2 into x1; lam is the exact uncovered fraction."""
    _, _, H, W = x1.shape
    if box_size > H or box_size > W:
        raise ValueError(f"cutmix box {box_size} does not fit inside {H}x{W} images")
    r = int(rng.integers(0, H - box_size + 1))
    c = int(rng.integers(0, W - box_size + 1))
    out = x1.clone()
    out[:, :, r : r + box_size, c : c + box_size] = x2[:, :, r : r + box_size, c : c + box_size]
    lam = 1.0 - (box_size * box_size) / (H * W)
    return out, lam


def jpeg_roundtrip(pixels: torch.Tensor, quality: int) -> torch.Tensor:
    """Encode and decode every image through baseline JPEG at the given quality."""
    out = torch.empty_like(pixels)
    for i, img in enumerate(pixels):
        arr = (img.permute(1, 2, 0).numpy() * 255.0).round().clip(0, 255).astype(np.uint8)
        pil = Image.fromarray(arr.squeeze(-1), mode="L") if arr.shape[-1] == 1 else Image.fromarray(arr)
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=quality)
        back = np.asarray(Image.open(buf), dtype=np.float32) / 255.0
        if back.ndim == 2:
            back = back[:, :, None]
        out[i] = torch.from_numpy(back).permute(2, 0, 1)
    return out


def apply_defense(
    batch: ImageBatch,
    spec: DefenseSpec,
    paired: ImageBatch | None = None,
    rng: np.random.Generator | None = None,
) -> DefendedBatch:
    """Apply a defense to a training batch.

    Mixing defenses (mixup, cutmix) combine the batch with `paired` when given,
    or with a seeded permutation of itself otherwise, and return the convex
    label weights (lam, 1 - lam).
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    x, y = batch.pixels, batch.labels
    if spec.kind == "none":
        return DefendedBatch(x, y, y, 1.0)
    if spec.kind == "cutout":
        return DefendedBatch(cutout_images(x, spec.mask_size, rng), y, y, 1.0)
    if spec.kind == "jpeg":
        return DefendedBatch(jpeg_roundtrip(x, spec.quality), y, y, 1.0)

    if paired is None:
        perm = torch.from_numpy(rng.permutation(len(x)))
        x2, y2 = x[perm], y[perm]
    else:
        if paired.pixels.shape != x.shape:
            raise ValueError("paired batch shape does not match")
        x2, y2 = paired.pixels, paired.labels
    if spec.kind == "mixup":
        lam = float(rng.beta(spec.beta_param, spec.beta_param))
        return DefendedBatch(mixup_images(x, x2, lam), y, y2, lam)
    # cutmix
    mixed, lam = cutmix_images(x, x2, spec.mask_size, rng)
    return DefendedBatch(mixed, y, y2, lam)
