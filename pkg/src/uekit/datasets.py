"""Datasets, class-disjoint prior splits, perturbation application, and poison mixing.

Images are float32 tensors of shape [N, C, H, W] with values in [0, 1]; labels are
0-based int64 class ids.
"""

from __future__ import annotations

import csv
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch


class UnknownDatasetError(ValueError):
    """Raised for dataset ids that are not registered."""


class DatasetFilesMissingError(FileNotFoundError):
    """Raised when a disk-backed dataset's files are absent."""


class CorruptDatasetError(RuntimeError):
    """Raised when a disk-backed dataset's records cannot be decoded."""


@dataclass
class ImageBatch:
    """A batch of images with labels. Pixels in [0, 1], labels in {0..K-1}."""

    pixels: torch.Tensor
    labels: torch.Tensor

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be [B, C, H, W], got {tuple(self.pixels.shape)}")
        if self.labels.dim() != 1 or len(self.labels) != len(self.pixels):
            raise ValueError("labels must be a 1-D tensor aligned with pixels")

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class SplitDataset:
    """Clean train/test splits with a per-class index over the training set."""

    name: str
    train_images: torch.Tensor
    train_labels: torch.Tensor
    test_images: torch.Tensor
    test_labels: torch.Tensor
    class_count: int
    per_class_index: tuple[np.ndarray, ...] = field(default=())
    source_classes: tuple[int, ...] = ()  # original class ids, set by disjoint splits

    def __post_init__(self) -> None:
        if not self.per_class_index:
            labels = self.train_labels.numpy()
            self.per_class_index = tuple(
                np.nonzero(labels == k)[0] for k in range(self.class_count)
            )
        covered = np.concatenate([idx for idx in self.per_class_index]) if self.class_count else np.array([])
        if len(covered) != len(self.train_labels) or len(np.unique(covered)) != len(self.train_labels):
            raise ValueError("per_class_index must partition the training indices exactly")

    @property
    def train_size(self) -> int:
        return len(self.train_labels)

    @property
    def test_size(self) -> int:
        return len(self.test_labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.train_images.shape[1:])  # type: ignore[return-value]

    def iter_batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[ImageBatch]:
        """Yield training batches; shuffled when an rng is given, in order otherwise."""
        order = rng.permutation(self.train_size) if rng is not None else np.arange(self.train_size)
        for i in range(0, self.train_size, batch_size):
            idx = order[i : i + batch_size]
            yield ImageBatch(self.train_images[idx], self.train_labels[idx])


@dataclass
class PoisonMix:
    """A training set in which a seeded subset of samples carries its own-class perturbation."""

    base: SplitDataset
    train_images: torch.Tensor
    train_labels: torch.Tensor
    perturbed_mask: np.ndarray
    ratio: float

    @property
    def class_count(self) -> int:
        return self.base.class_count

    @property
    def train_size(self) -> int:
        return len(self.train_labels)

    @property
    def test_images(self) -> torch.Tensor:
        return self.base.test_images

    @property
    def test_labels(self) -> torch.Tensor:
        return self.base.test_labels

    def iter_batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[ImageBatch]:
        order = rng.permutation(self.train_size) if rng is not None else np.arange(self.train_size)
        for i in range(0, self.train_size, batch_size):
            idx = order[i : i + batch_size]
            yield ImageBatch(self.train_images[idx], self.train_labels[idx])

    def write_manifest_csv(self, path: str | Path) -> None:
        """Write (index, class, perturbed_flag) rows for the mixed training set."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "class", "perturbed_flag"])
            for i in range(self.train_size):
                writer.writerow([i, int(self.train_labels[i]), int(self.perturbed_mask[i])])


# ---------------------------------------------------------------------------
# Synthetic glyph dataset
# ---------------------------------------------------------------------------

_GLYPH_KINDS = 10


def _glyph_mask(kind: int, ur: np.ndarray, vr: np.ndarray) -> np.ndarray:
    r = np.sqrt(ur * ur + vr * vr)
    if kind == 0:  # disk
        return r <= 0.62
    if kind == 1:  # square
        return np.maximum(np.abs(ur), np.abs(vr)) <= 0.55
    if kind == 2:  # diamond
        return np.abs(ur) + np.abs(vr) <= 0.80
    if kind == 3:  # ring
        return (r >= 0.34) & (r <= 0.64)
    if kind == 4:  # plus
        return ((np.abs(ur) <= 0.20) & (np.abs(vr) <= 0.72)) | (
            (np.abs(vr) <= 0.20) & (np.abs(ur) <= 0.72)
        )
    if kind == 5:  # saltire
        return ((np.abs(ur - vr) <= 0.26) | (np.abs(ur + vr) <= 0.26)) & (r <= 0.85)
    if kind == 6:  # triangle
        return (vr >= -0.55) & (vr <= 0.55) & (np.abs(ur) <= 0.72 * (0.55 - vr) / 1.1)
    if kind == 7:  # double bar
        return ((np.abs(vr - 0.32) <= 0.15) | (np.abs(vr + 0.32) <= 0.15)) & (np.abs(ur) <= 0.66)
    if kind == 8:  # checker
        inside = np.maximum(np.abs(ur), np.abs(vr)) <= 0.64
        cell = (np.floor(ur / 0.32).astype(int) + np.floor(vr / 0.32).astype(int)) % 2 == 0
        return inside & cell
    if kind == 9:  # hollow frame
        m = np.maximum(np.abs(ur), np.abs(vr))
        return (m >= 0.38) & (m <= 0.66)
    raise ValueError(f"no glyph kind {kind}")


def make_glyphs(
    class_count: int = 10,
    train_per_class: int = 100,
    test_per_class: int = 40,
    image_size: tuple[int, int] = (32, 32),
    seed: int = 0,
) -> SplitDataset:
    """Procedurally render the built-in glyph dataset.

    Class identity is carried by shape (and texture orientation); color, position,
    scale, rotation, background level, and noise vary per sample so the classes are
    not separable by trivial pixel statistics. Deterministic per seed.
    """
    if class_count < 2:
        raise ValueError("glyphs need at least 2 classes")
    rng = np.random.default_rng(seed)
    H, W = image_size
    ys, xs = np.meshgrid(np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij")

    def render_class(cls: int, n: int) -> np.ndarray:
        out = np.empty((n, 3, H, W), dtype=np.float32)
        freq = 2.0 * math.pi * (2.2 + 0.55 * cls)
        theta = 0.3 + cls * (math.pi / class_count)
        for i in range(n):
            dx, dy = rng.uniform(-0.30, 0.30, size=2)
            scale = rng.uniform(0.70, 1.30)
            rho = rng.uniform(-0.50, 0.50)
            u = (xs - dx) / scale
            v = (ys - dy) / scale
            ur = u * math.cos(rho) + v * math.sin(rho)
            vr = -u * math.sin(rho) + v * math.cos(rho)
            mask = _glyph_mask(cls % _GLYPH_KINDS, ur, vr).astype(np.float32)
            phase = rng.uniform(0, 2 * math.pi)
            contrast = rng.uniform(0.40, 0.80)
            grating = 0.5 + 0.5 * np.cos(freq * (xs * math.cos(theta) + ys * math.sin(theta)) + phase)
            bg = rng.uniform(0.10, 0.45)
            color = rng.uniform(0.35, 0.95, size=3)
            img = np.empty((3, H, W), dtype=np.float32)
            for c in range(3):
                fg = color[c] * (1.0 - contrast + contrast * grating)
                img[c] = bg * (1.0 - mask) + fg * mask
            img += rng.normal(0.0, 0.03, size=img.shape).astype(np.float32)
            out[i] = np.clip(img, 0.0, 1.0)
        return out

    train_x, train_y, test_x, test_y = [], [], [], []
    for cls in range(class_count):
        train_x.append(render_class(cls, train_per_class))
        train_y.append(np.full(train_per_class, cls, dtype=np.int64))
        test_x.append(render_class(cls, test_per_class))
        test_y.append(np.full(test_per_class, cls, dtype=np.int64))

    return SplitDataset(
        name=f"synthetic-glyphs[k={class_count},train={train_per_class},test={test_per_class},seed={seed}]",
        train_images=torch.from_numpy(np.concatenate(train_x)),
        train_labels=torch.from_numpy(np.concatenate(train_y)),
        test_images=torch.from_numpy(np.concatenate(test_x)),
        test_labels=torch.from_numpy(np.concatenate(test_y)),
        class_count=class_count,
    )


# ---------------------------------------------------------------------------
# CIFAR-10 (read from disk, never downloaded)
# ---------------------------------------------------------------------------

def _load_cifar10(root: str | Path, image_size: tuple[int, int]) -> SplitDataset:
    if image_size != (32, 32):
        raise ValueError("cifar10 is only available at 32x32")
    if root is None:
        raise DatasetFilesMissingError("cifar10 requires a root directory")
    base = Path(root) / "cifar-10-batches-py"
    batch_files = [base / f"data_batch_{i}" for i in range(1, 6)]
    test_file = base / "test_batch"
    missing = [str(p) for p in batch_files + [test_file] if not p.exists()]
    if missing:
        raise DatasetFilesMissingError(f"cifar10 files missing under {base}: {missing[:3]}")

    def read_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
        try:
            with open(path, "rb") as fh:
                record = pickle.load(fh, encoding="bytes")
            data = record[b"data"].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
            labels = np.asarray(record[b"labels"], dtype=np.int64)
        except Exception as exc:
            raise CorruptDatasetError(f"could not decode {path}: {exc}") from exc
        if len(data) != len(labels):
            raise CorruptDatasetError(f"{path}: data/label count mismatch")
        return data, labels

    xs, ys = zip(*(read_batch(p) for p in batch_files))
    tx, ty = read_batch(test_file)
    return SplitDataset(
        name="cifar10",
        train_images=torch.from_numpy(np.concatenate(xs)),
        train_labels=torch.from_numpy(np.concatenate(ys)),
        test_images=torch.from_numpy(tx),
        test_labels=torch.from_numpy(ty),
        class_count=10,
    )


_REGISTRY = {
    "synthetic-glyphs": lambda root, image_size: make_glyphs(image_size=image_size),
    "glyphs": lambda root, image_size: make_glyphs(image_size=image_size),
    "cifar10": _load_cifar10,
}


def load_dataset(name: str, root: str | Path | None = None, image_size: tuple[int, int] = (32, 32)) -> SplitDataset:
    """Load a registered dataset by id ('synthetic-glyphs' or 'cifar10')."""
    if name not in _REGISTRY:
        raise UnknownDatasetError(f"unknown dataset id {name!r}; registered: {sorted(_REGISTRY)}")
    return _REGISTRY[name](root, image_size)


# ---------------------------------------------------------------------------
# Class-disjoint prior splits
# ---------------------------------------------------------------------------

def make_disjoint_prior_split(
    dataset: SplitDataset,
    prior_classes: int,
    downstream_classes: int,
    seed: int,
) -> tuple[SplitDataset, SplitDataset]:
    """Carve two datasets over disjoint class subsets of `dataset`.

    Class subsets are drawn by a seeded permutation; within each side labels are
    re-indexed contiguously in ascending original class id order.
    """
    if prior_classes < 1 or downstream_classes < 1:
        raise ValueError("both splits need at least one class")
    if prior_classes + downstream_classes > dataset.class_count:
        raise ValueError(
            f"class budget {prior_classes}+{downstream_classes} exceeds K={dataset.class_count}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.class_count)
    prior_ids = np.sort(perm[:prior_classes])
    down_ids = np.sort(perm[prior_classes : prior_classes + downstream_classes])

    def take(ids: np.ndarray, tag: str) -> SplitDataset:
        remap = {int(c): i for i, c in enumerate(ids)}
        tr_mask = np.isin(dataset.train_labels.numpy(), ids)
        te_mask = np.isin(dataset.test_labels.numpy(), ids)
        tr_labels = torch.tensor(
            [remap[int(v)] for v in dataset.train_labels.numpy()[tr_mask]], dtype=torch.int64
        )
        te_labels = torch.tensor(
            [remap[int(v)] for v in dataset.test_labels.numpy()[te_mask]], dtype=torch.int64
        )
        return SplitDataset(
            name=f"{dataset.name}/{tag}{list(map(int, ids))}",
            train_images=dataset.train_images[torch.from_numpy(tr_mask)],
            train_labels=tr_labels,
            test_images=dataset.test_images[torch.from_numpy(te_mask)],
            test_labels=te_labels,
            class_count=len(ids),
            source_classes=tuple(int(c) for c in ids),
        )

    return take(prior_ids, "prior"), take(down_ids, "downstream")


# ---------------------------------------------------------------------------
# Perturbation application and poison mixing
# ---------------------------------------------------------------------------

def apply_bank(batch: ImageBatch, bank, assignment: torch.Tensor) -> ImageBatch:
    """Add the assigned class perturbation to every image, then clip to [0, 1].

    `assignment[b]` selects the bank entry added to image b; labels pass through
    unchanged. The bank itself is never mutated.
    """
    deltas = bank.deltas if hasattr(bank, "deltas") else bank
    if deltas.shape[1:] != batch.pixels.shape[1:]:
        raise ValueError(
            f"bank entries {tuple(deltas.shape[1:])} do not match images {tuple(batch.pixels.shape[1:])}"
        )
    if assignment.min() < 0 or assignment.max() >= len(deltas):
        raise ValueError("assignment indexes outside the bank")
    pixels = torch.clamp(batch.pixels + deltas[assignment], 0.0, 1.0)
    return ImageBatch(pixels, batch.labels.clone())


def mix_poison(clean: SplitDataset, bank, ratio: float, seed: int) -> PoisonMix:
    """Perturb a seeded floor(ratio * |train|) subset with own-class perturbations.

    Accepts a class-wise bank (entries indexed by label) or a per-sample delta set
    (entries index-aligned with the training set). Labels are never changed; the
    perturbed subset is drawn uniformly at random without class balancing.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    count = int(math.floor(ratio * clean.train_size))
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(clean.train_size)[:count]
    mask = np.zeros(clean.train_size, dtype=bool)
    mask[chosen] = True

    deltas = bank.deltas if hasattr(bank, "deltas") else bank
    declared = getattr(bank, "per_sample", None)
    if declared is not None:
        per_sample = bool(declared)
        expected = clean.train_size if per_sample else clean.class_count
        if len(deltas) != expected:
            raise ValueError(f"perturbation set has {len(deltas)} entries; expected {expected}")
    elif len(deltas) == clean.class_count:
        per_sample = False
    elif len(deltas) == clean.train_size:
        per_sample = True
    else:
        raise ValueError(
            f"bank has {len(deltas)} entries; expected K={clean.class_count} "
            f"or |train|={clean.train_size}"
        )

    images = clean.train_images.clone()
    if count:
        idx = torch.from_numpy(chosen)
        add = deltas[idx] if per_sample else deltas[clean.train_labels[idx]]
        images[idx] = torch.clamp(images[idx] + add, 0.0, 1.0)
    return PoisonMix(
        base=clean,
        train_images=images,
        train_labels=clean.train_labels.clone(),
        perturbed_mask=mask,
        ratio=ratio,
    )
