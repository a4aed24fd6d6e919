"""Perturbation generator network, L-infinity budget machinery, and the class-wise bank."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .datasets import ImageBatch


def project_linf(delta: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Clamp every entry to [-epsilon, epsilon]. Idempotent."""
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    return torch.clamp(delta, -epsilon, epsilon)


@dataclass
class PerturbationBank:
    """Class-wise perturbations delta_1..delta_K under an L-infinity budget.

    `epsilon_str` keeps the budget as an exact rational (e.g. "8/255") for
    manifests; `meta` carries a digest of the crafting configuration.
    """

    deltas: torch.Tensor
    epsilon: float
    epsilon_str: str = ""
    meta: dict = field(default_factory=dict)
    per_sample = False

    def __post_init__(self) -> None:
        if self.deltas.dim() != 4:
            raise ValueError("bank deltas must be [K, C, H, W]")
        if not self.epsilon_str:
            self.epsilon_str = repr(float(self.epsilon))
        self.validate()

    @property
    def class_count(self) -> int:
        return len(self.deltas)

    def validate(self) -> None:
        if not torch.isfinite(self.deltas).all():
            raise ValueError("bank contains non-finite entries")
        worst = self.deltas.abs().amax().item() if self.deltas.numel() else 0.0
        if worst > self.epsilon + 1e-7:
            raise ValueError(f"bank violates budget: max |delta| = {worst} > {self.epsilon}")

    @classmethod
    def zeros(
        cls,
        class_count: int,
        image_shape: tuple[int, int, int],
        epsilon: float,
        epsilon_str: str = "",
        meta: dict | None = None,
    ) -> "PerturbationBank":
        deltas = torch.zeros(class_count, *image_shape, dtype=torch.float32)
        return cls(deltas, epsilon, epsilon_str, dict(meta or {}))

    def clone(self) -> "PerturbationBank":
        return PerturbationBank(self.deltas.clone(), self.epsilon, self.epsilon_str, copy.deepcopy(self.meta))


def aggregate_classwise(
    per_sample_deltas: torch.Tensor,
    labels: torch.Tensor,
    bank: PerturbationBank,
    momentum: float,
) -> PerturbationBank:
    """Fold per-sample deltas into the bank as a projected exponential moving average.

    For each class present in the batch the bank entry becomes
    project(momentum * old + (1 - momentum) * class_mean); absent classes are
    untouched. Momentum 0 recovers plain per-batch averaging. Returns a new bank.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    if labels.min() < 0 or labels.max() >= bank.class_count:
        raise ValueError("label out of range for this bank")
    new = bank.clone()
    with torch.no_grad():
        for k in labels.unique().tolist():
            mask = labels == k
            mean_k = per_sample_deltas[mask].mean(dim=0)
            new.deltas[k] = project_linf(momentum * new.deltas[k] + (1.0 - momentum) * mean_k, bank.epsilon)
    new.validate()
    return new


# ---------------------------------------------------------------------------
# Encoder-decoder generator
# ---------------------------------------------------------------------------

class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            nn.BatchNorm2d(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class PerturbationGenerator(nn.Module):
    """Image-to-perturbation encoder-decoder.

    Six down-sampling conv stages (two of them stride 2), eight residual blocks at
    the bottleneck, five transposed-conv stages plus a final 6x6 transposed conv,
    ending in tanh so raw outputs live in (-1, 1). Channel widths scale with
    `base_width` (64 reproduces the reference sizing; the default is sized for
    CPU-scale experiments). Input height/width must be divisible by 4.
    """

    def __init__(self, base_width: int = 16, in_channels: int = 3):
        super().__init__()
        b = base_width

        def down(ci, co, stride):
            return nn.Sequential(
                nn.Conv2d(ci, co, 3, stride=stride, padding=1),
                nn.InstanceNorm2d(co),
                nn.ReLU(inplace=True),
            )

        def up(ci, co, stride):
            return nn.Sequential(
                nn.ConvTranspose2d(ci, co, 3, stride=stride, padding=1, output_padding=stride - 1),
                nn.InstanceNorm2d(co),
                nn.ReLU(inplace=True),
            )

        self.down = nn.Sequential(
            down(in_channels, b, 1),
            down(b, 2 * b, 2),
            down(2 * b, 4 * b, 2),
            down(4 * b, 4 * b, 1),
            down(4 * b, 4 * b, 1),
            down(4 * b, 4 * b, 1),
        )
        self.res = nn.Sequential(*[_ResidualBlock(4 * b) for _ in range(8)])
        self.up = nn.Sequential(
            up(4 * b, 4 * b, 1),
            up(4 * b, 2 * b, 1),
            up(2 * b, 2 * b, 1),
            up(2 * b, b, 2),
            up(b, b, 1),
        )
        self.final = nn.ConvTranspose2d(b, in_channels, 6, stride=2, padding=2)
        self.base_width = b
        self.in_channels = in_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.down(x)
        h = self.res(h)
        h = self.up(h)
        return torch.tanh(self.final(h))


def build_generator(base_width: int = 16, in_channels: int = 3, seed: int = 0) -> PerturbationGenerator:
    """Construct a generator with seeded initialization."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        gen = PerturbationGenerator(base_width=base_width, in_channels=in_channels)
    return gen


def generate(gen: PerturbationGenerator, batch: ImageBatch, epsilon: float) -> torch.Tensor:
    """Produce per-sample deltas for a batch, bounded by epsilon.

    Runs the network in eval mode with gradients disabled; the tanh output is
    scaled by epsilon and passed through a safety projection so the bound holds
    unconditionally.
    """
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if batch.pixels.shape[1] != gen.in_channels:
        raise ValueError(
            f"generator expects {gen.in_channels} channels, batch has {batch.pixels.shape[1]}"
        )
    if batch.pixels.shape[2] % 4 or batch.pixels.shape[3] % 4:
        raise ValueError("generator input height/width must be divisible by 4")
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            raw = gen(batch.pixels)
    finally:
        gen.train(was_training)
    return project_linf(epsilon * raw, epsilon)
