"""Victim/surrogate model zoo: construction, prior fabrication, finetuning, and
parameter-update diagnostics.

Models are carried around as `ModelState` values (named parameter tensors plus
metadata); nn.Modules are materialized on demand. Parameters are organized into
named groups (for rn-mini: stem, block1..block4, head) that ablations, freeze
masks, and update traces all refer to.
"""

from __future__ import annotations

import csv
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class UnknownArchitectureError(ValueError):
    """Raised for unregistered architecture ids."""


class HeadMismatchError(ValueError):
    """Raised when a model head does not match the dataset class count."""


class NonFiniteLossError(RuntimeError):
    """Raised when training encounters a NaN/Inf loss; carries the epoch index."""

    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

class RnMini(nn.Module):
    """Small 4-block CNN with GroupNorm (no running stats, fully functional)."""

    GROUPS = ("stem", "block1", "block2", "block3", "block4", "head")

    def __init__(self, head_classes: int, widths=(16, 32, 64, 64, 64)):
        super().__init__()
        c0, c1, c2, c3, c4 = widths

        def gn(c):
            return nn.GroupNorm(4, c)

        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, padding=1), gn(c0), nn.ReLU(inplace=True))
        self.block1 = nn.Sequential(
            nn.Conv2d(c0, c1, 3, stride=2, padding=1), gn(c1), nn.ReLU(inplace=True),
            nn.Conv2d(c1, c1, 3, padding=1), gn(c1), nn.ReLU(inplace=True),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), gn(c2), nn.ReLU(inplace=True),
            nn.Conv2d(c2, c2, 3, padding=1), gn(c2), nn.ReLU(inplace=True),
        )
        self.block3 = nn.Sequential(
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), gn(c3), nn.ReLU(inplace=True),
            nn.Conv2d(c3, c3, 3, padding=1), gn(c3), nn.ReLU(inplace=True),
        )
        self.block4 = nn.Sequential(
            nn.Conv2d(c3, c4, 3, stride=2, padding=1), gn(c4), nn.ReLU(inplace=True)
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(c4, head_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        x = self.stem(x)
        x = self.block1(x)
        x = self.block2(x)
        x = self.block3(x)
        x = self.block4(x)
        return self.pool(x).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


class LinearToy(nn.Module):
    """Flatten-and-classify linear model; used by oracle tests and closed-form checks."""

    GROUPS = ("head",)

    def __init__(self, head_classes: int, image_shape: tuple[int, int, int] = (3, 32, 32)):
        super().__init__()
        c, h, w = image_shape
        self.head = nn.Linear(c * h * w, head_classes)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return x.flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass(frozen=True)
class _ArchSpec:
    factory: Callable[..., nn.Module]
    groups: tuple[str, ...]


ARCHITECTURES: dict[str, _ArchSpec] = {
    "rn-mini": _ArchSpec(lambda k, image_shape=None: RnMini(k), RnMini.GROUPS),
    "linear": _ArchSpec(
        lambda k, image_shape=(3, 32, 32): LinearToy(k, image_shape), LinearToy.GROUPS
    ),
}


# ---------------------------------------------------------------------------
# Model state
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    """Named-parameter snapshot of a model plus provenance metadata."""

    arch_id: str
    head_classes: int
    params: "OrderedDict[str, torch.Tensor]"
    provenance: str = "random"
    image_shape: tuple[int, int, int] = (3, 32, 32)

    @property
    def group_names(self) -> tuple[str, ...]:
        return ARCHITECTURES[self.arch_id].groups

    def group_of(self, param_name: str) -> str:
        return param_name.split(".", 1)[0]

    def validate(self) -> None:
        for name, tensor in self.params.items():
            if not torch.isfinite(tensor).all():
                raise ValueError(f"parameter {name} contains non-finite values")

    def module(self) -> nn.Module:
        """Materialize an nn.Module carrying these parameters."""
        spec = ARCHITECTURES[self.arch_id]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(0)
            module = spec.factory(self.head_classes, image_shape=self.image_shape)
        module.load_state_dict(self.params)
        return module

    def clone(self) -> "ModelState":
        return replace(self, params=OrderedDict((k, v.clone()) for k, v in self.params.items()))

    @classmethod
    def from_module(
        cls,
        arch_id: str,
        module: nn.Module,
        head_classes: int,
        provenance: str,
        image_shape: tuple[int, int, int],
    ) -> "ModelState":
        params = OrderedDict((k, v.detach().clone()) for k, v in module.state_dict().items())
        return cls(arch_id, head_classes, params, provenance, image_shape)


def build_model(
    arch_id: str,
    head_classes: int,
    seed: int = 0,
    from_state: ModelState | None = None,
    image_shape: tuple[int, int, int] = (3, 32, 32),
) -> ModelState:
    """Build a model with a K-way head.

    With `from_state`, body weights are retained and only the head is rebuilt
    (seeded) to the new width; otherwise the whole model is randomly initialized
    from `seed`.
    """
    if arch_id not in ARCHITECTURES:
        raise UnknownArchitectureError(f"unknown architecture {arch_id!r}; registered: {sorted(ARCHITECTURES)}")
    spec = ARCHITECTURES[arch_id]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = spec.factory(head_classes, image_shape=image_shape)
    state = ModelState.from_module(arch_id, module, head_classes, f"random(seed={seed})", image_shape)
    if from_state is not None:
        if from_state.arch_id != arch_id:
            raise UnknownArchitectureError(
                f"from_state architecture {from_state.arch_id!r} differs from {arch_id!r}"
            )
        for name, tensor in from_state.params.items():
            if state.group_of(name) != "head":
                state.params[name] = tensor.clone()
        state.provenance = from_state.provenance
    return state


def replace_layers_random(model: ModelState, group_names: Sequence[str], seed: int) -> ModelState:
    """Re-initialize the named groups from the architecture's init distribution.

    Every other group is bit-identical to the input; the input state is untouched.
    """
    unknown = set(group_names) - set(model.group_names)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    fresh = build_model(model.arch_id, model.head_classes, seed=seed, image_shape=model.image_shape)
    out = model.clone()
    targeted = set(group_names)
    for name in out.params:
        if out.group_of(name) in targeted:
            out.params[name] = fresh.params[name].clone()
    if targeted:
        out.provenance = f"{model.provenance}+replaced({','.join(sorted(targeted))},seed={seed})"
    return out


@dataclass(frozen=True)
class TrainingMask:
    """Per-group trainable flags covering every parameter group exactly once."""

    trainable: dict[str, bool]

    def frozen_groups(self) -> tuple[str, ...]:
        return tuple(g for g, t in self.trainable.items() if not t)


def freeze_layers(model: ModelState, group_names: Sequence[str]) -> TrainingMask:
    """Mark the named groups non-trainable; everything else stays trainable."""
    unknown = set(group_names) - set(model.group_names)
    if unknown:
        raise ValueError(f"unknown parameter groups: {sorted(unknown)}")
    frozen = set(group_names)
    return TrainingMask({g: g not in frozen for g in model.group_names})


# ---------------------------------------------------------------------------
# Update traces
# ---------------------------------------------------------------------------

@dataclass
class UpdateTrace:
    """Per-epoch, per-group L2 parameter update magnitudes.

    `normalize_trace` fills in the cumulative sums v, the global normalizer M
    (max over groups of the final cumulative value), and v_norm = v / M.
    """

    group_names: tuple[str, ...]
    per_epoch_delta: np.ndarray  # [T, G]
    cumulative: np.ndarray | None = None
    normalizer: float | None = None
    normalized: np.ndarray | None = None

    @property
    def epochs(self) -> int:
        return int(self.per_epoch_delta.shape[0])

    def total_update(self) -> float:
        """Sum of final cumulative updates over all groups (normalizer-free)."""
        return float(self.per_epoch_delta.sum())

    def to_csv(self, path: str | Path) -> None:
        trace = self if self.normalized is not None else normalize_trace(self)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "group", "delta_l2", "v", "v_norm"])
            for t in range(trace.epochs):
                for g, name in enumerate(trace.group_names):
                    writer.writerow([
                        t + 1,
                        name,
                        f"{trace.per_epoch_delta[t, g]:.10g}",
                        f"{trace.cumulative[t, g]:.10g}",
                        f"{trace.normalized[t, g]:.10g}",
                    ])

    @classmethod
    def from_csv(cls, path: str | Path) -> "UpdateTrace":
        rows: dict[str, list[float]] = {}
        with open(path, newline="") as fh:
            for record in csv.DictReader(fh):
                rows.setdefault(record["group"], []).append(float(record["delta_l2"]))
        if not rows:
            raise ValueError(f"no trace rows in {path}")
        names = tuple(rows)
        lengths = {len(v) for v in rows.values()}
        if len(lengths) != 1:
            raise ValueError("trace groups have differing epoch counts")
        deltas = np.stack([np.asarray(rows[n]) for n in names], axis=1)
        return cls(names, deltas)


def normalize_trace(trace: UpdateTrace) -> UpdateTrace:
    """Cumulate per-epoch deltas and scale by the global maximum.

    v[t, k] = sum_{i<=t} delta[i, k]; M = max_k v[T, k]; v_norm = v / M. A
    degenerate all-zero trace (M = 0) maps to all-zero v_norm.
    """
    if trace.epochs < 1:
        raise ValueError("trace must cover at least one epoch")
    cumulative = np.cumsum(trace.per_epoch_delta, axis=0)
    normalizer = float(cumulative[-1].max())
    normalized = cumulative / normalizer if normalizer > 0 else np.zeros_like(cumulative)
    return UpdateTrace(trace.group_names, trace.per_epoch_delta.copy(), cumulative, normalizer, normalized)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    state: ModelState
    trace: UpdateTrace
    train_accuracy: list[float] = field(default_factory=list)
    test_accuracy: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)


def evaluate_accuracy(
    state_or_module, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 256
) -> float:
    module = state_or_module.module() if isinstance(state_or_module, ModelState) else state_or_module
    module.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = module(images[i : i + batch_size]).argmax(dim=1)
            correct += int((pred == labels[i : i + batch_size]).sum())
    return correct / max(len(images), 1)


def penultimate_features(state: ModelState, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    """Penultimate-layer feature vectors, one row per image."""
    module = state.module()
    module.eval()
    chunks = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            chunks.append(module.features(images[i : i + batch_size]).numpy())
    return np.concatenate(chunks, axis=0)


def _make_optimizer(name: str, params, lr: float):
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")


def finetune(
    model: ModelState,
    data,
    mask: TrainingMask | None = None,
    epochs: int = 20,
    lr: float = 1e-3,
    seed: int = 0,
    optimizer: str = "adam",
    batch_size: int = 64,
    defense=None,
) -> FinetuneResult:
    """Train a model on `data` (a SplitDataset or PoisonMix).

    Returns the final state, per-epoch train/clean-test accuracy curves, and an
    UpdateTrace of per-epoch group-wise L2 parameter deltas. Groups marked frozen
    in `mask` are excluded from optimization and stay bit-identical. A defense
    spec, when given, transforms batches during training only.
    """
    from .defenses import apply_defense, mixed_cross_entropy  # local import to avoid a cycle

    if model.head_classes != data.class_count:
        raise HeadMismatchError(
            f"model head has {model.head_classes} outputs, data has {data.class_count} classes"
        )
    group_names = model.group_names
    frozen = set(mask.frozen_groups()) if mask is not None else set()
    if frozen - set(group_names):
        raise ValueError(f"mask names unknown groups: {sorted(frozen - set(group_names))}")

    result_state = model.clone()
    if epochs == 0:
        return FinetuneResult(result_state, UpdateTrace(group_names, np.zeros((0, len(group_names)))))

    module = result_state.module()
    trainable = [
        p for name, p in module.named_parameters() if name.split(".", 1)[0] not in frozen
    ]
    for name, p in module.named_parameters():
        p.requires_grad_(name.split(".", 1)[0] not in frozen)
    optim = _make_optimizer(optimizer, trainable, lr)

    order_rng = np.random.default_rng(seed)
    defense_rng = np.random.default_rng([seed, 104729])
    deltas = np.zeros((epochs, len(group_names)))
    train_acc, test_acc, losses = [], [], []

    for epoch in range(epochs):
        start = {k: v.detach().clone() for k, v in module.named_parameters()}
        module.train()
        epoch_loss = 0.0
        batches = 0
        for batch in data.iter_batches(batch_size, order_rng):
            if defense is not None:
                defended = apply_defense(batch, defense, rng=defense_rng)
                logits = module(defended.pixels)
                loss = mixed_cross_entropy(logits, defended)
            else:
                logits = module(batch.pixels)
                loss = F.cross_entropy(logits, batch.labels)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(epoch, float(loss.detach()))
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            epoch_loss += float(loss.detach())
            batches += 1
        for g, gname in enumerate(group_names):
            sq = 0.0
            for name, p in module.named_parameters():
                if name.split(".", 1)[0] == gname:
                    sq += float((p.detach() - start[name]).square().sum())
            deltas[epoch, g] = math.sqrt(sq)
        losses.append(epoch_loss / max(batches, 1))
        train_acc.append(evaluate_accuracy(module, data.train_images, data.train_labels))
        test_acc.append(evaluate_accuracy(module, data.test_images, data.test_labels))

    result_state = ModelState.from_module(
        model.arch_id, module, model.head_classes, model.provenance, model.image_shape
    )
    trace = UpdateTrace(group_names, deltas)
    return FinetuneResult(result_state, trace, train_acc, test_acc, losses)


def pretrain(
    model: ModelState,
    prior,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    optimizer: str = "adam",
    batch_size: int = 64,
) -> tuple[ModelState, float]:
    """Fabricate a pretraining prior by training on the prior split.

    Returns the trained state (provenance set to the prior's name) and its
    clean-test accuracy on the prior split.
    """
    result = finetune(
        model, prior, epochs=epochs, lr=lr, seed=seed, optimizer=optimizer, batch_size=batch_size
    )
    state = result.state
    state.provenance = f"pretrained({prior.name})"
    accuracy = evaluate_accuracy(state, prior.test_images, prior.test_labels)
    return state, accuracy
