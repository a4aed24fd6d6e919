"""Bi-level crafting loop: curriculum target selection, N-step inner unroll,
outer mislabel-binding update, and surrogate refresh.

Per batch the loop runs: select_targets (on clean logits) -> inner_unroll ->
outer step -> surrogate step. The perturbation variable is either the class-wise
bank itself ("direct" mode, used by the meta-gradient oracles) or an
encoder-decoder generator whose per-sample outputs are averaged class-wise
("generator" mode).

RNG streams: batch order uses numpy default_rng([seed, 1]); stage-2 random
targets use default_rng([seed, 2]); torch-side initialization is forked from
`seed`.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch.func import functional_call

from .datasets import ImageBatch, SplitDataset
from .generator import PerturbationBank, aggregate_classwise, build_generator, project_linf
from .models import ModelState, NonFiniteLossError

STAGE_MODES = ("hard_negative", "random", "most_dissimilar")


def parse_epsilon(value: str | float) -> tuple[float, str]:
    """Parse an epsilon given as an exact rational string ('8/255') or a float."""
    if isinstance(value, str):
        frac = Fraction(value)
        if frac <= 0:
            raise ValueError(f"epsilon must be positive, got {value!r}")
        return float(frac), str(frac)
    if value <= 0:
        raise ValueError(f"epsilon must be positive, got {value}")
    return float(value), str(Fraction(value).limit_denominator(10**6))


@dataclass(frozen=True)
class CurriculumSchedule:
    """Stage lengths and target-selection modes for the three-stage curriculum."""

    stage_epochs: tuple[int, int, int] = (30, 30, 30)
    modes: tuple[str, str, str] = STAGE_MODES

    def __post_init__(self) -> None:
        if len(self.stage_epochs) != 3 or any(e < 1 for e in self.stage_epochs):
            raise ValueError(f"all three stage lengths must be >= 1, got {self.stage_epochs}")
        unknown = set(self.modes) - set(STAGE_MODES)
        if unknown:
            raise ValueError(f"unknown stage modes: {sorted(unknown)}")

    @property
    def total_epochs(self) -> int:
        return sum(self.stage_epochs)

    def stage_of(self, epoch: int) -> int:
        """1-based stage for a 0-based epoch index."""
        e1, e2, _ = self.stage_epochs
        if epoch < e1:
            return 1
        if epoch < e1 + e2:
            return 2
        return 3

    def mode_of(self, epoch: int) -> str:
        return self.modes[self.stage_of(epoch) - 1]


@dataclass
class CraftConfig:
    """Hyperparameters of the crafting loop.

    `alpha` is the surrogate/inner step size (plain gradient descent), `beta`
    the generator/bank optimizer learning rate (Adam). `bank_mode` picks the
    perturbation variable: 'generator' (encoder-decoder, per-sample outputs
    averaged class-wise) or 'direct' (optimize the class-wise bank itself).
    """

    alpha: float = 0.1
    beta: float = 1e-3
    unroll_steps: int = 1
    epsilon: float = 8.0 / 255.0
    epsilon_str: str = "8/255"
    batch_size: int = 64
    seed: int = 0
    second_order: bool = True
    bank_mode: str = "generator"
    bank_momentum: float = 0.9
    generator_width: int = 16
    clip_inputs: bool = True

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.unroll_steps < 0:
            raise ValueError("unroll_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bank_mode not in ("generator", "direct"):
            raise ValueError(f"bank_mode must be 'generator' or 'direct', got {self.bank_mode!r}")
        if not 0.0 <= self.bank_momentum < 1.0:
            raise ValueError("bank_momentum must be in [0, 1)")

    def digest(self) -> str:
        payload = {k: v for k, v in self.__dict__.items()}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Curriculum target selection
# ---------------------------------------------------------------------------

def select_targets(
    logits: torch.Tensor | np.ndarray,
    gt: torch.Tensor | np.ndarray,
    mode: str,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """Pick an incorrect target class per sample.

    hard_negative: highest-logit non-ground-truth class; most_dissimilar:
    lowest-logit non-ground-truth class; random: uniform over non-ground-truth
    classes under `rng`. Ties break toward the lowest class index.
    """
    scores = logits.detach().numpy() if isinstance(logits, torch.Tensor) else np.asarray(logits)
    labels = gt.numpy() if isinstance(gt, torch.Tensor) else np.asarray(gt)
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValueError("need logits of shape [B, K] with K >= 2")
    rows = np.arange(len(labels))
    if mode == "random":
        if rng is None:
            raise ValueError("random mode requires an rng")
        raw = rng.integers(0, scores.shape[1] - 1, size=len(labels))
        targets = raw + (raw >= labels)
    elif mode == "hard_negative":
        masked = scores.astype(np.float64).copy()
        masked[rows, labels] = -np.inf
        targets = np.argmax(masked, axis=1)
    elif mode == "most_dissimilar":
        masked = scores.astype(np.float64).copy()
        masked[rows, labels] = np.inf
        targets = np.argmin(masked, axis=1)
    else:
        raise ValueError(f"unknown target-selection mode {mode!r}")
    return torch.from_numpy(targets.astype(np.int64))


# ---------------------------------------------------------------------------
# Unrolled inner optimization
# ---------------------------------------------------------------------------

def unroll_gradient_steps(
    params: dict[str, torch.Tensor],
    loss_fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
    alpha: float,
    steps: int,
    create_graph: bool = True,
) -> dict[str, torch.Tensor]:
    """Advance a parameter dict through `steps` gradient-descent steps on loss_fn.

    With create_graph the returned tensors stay differentiable with respect to
    everything the loss depends on (parameters and any external variables).
    """
    current = dict(params)
    for _ in range(steps):
        loss = loss_fn(current)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(-1, float(loss.detach()))
        grads = torch.autograd.grad(loss, list(current.values()), create_graph=create_graph)
        current = {k: v - alpha * g for (k, v), g in zip(current.items(), grads)}
    return current


def perturbed_pixels(pixels: torch.Tensor, deltas: torch.Tensor, clip_inputs: bool) -> torch.Tensor:
    out = pixels + deltas
    return torch.clamp(out, 0.0, 1.0) if clip_inputs else out


def inner_unroll(
    module: torch.nn.Module,
    params: dict[str, torch.Tensor],
    batch: ImageBatch,
    deltas_own: torch.Tensor,
    alpha: float,
    steps: int,
    second_order: bool = True,
    clip_inputs: bool = True,
) -> dict[str, torch.Tensor]:
    """Simulate `steps` training steps on own-class-perturbed data.

    The input params are untouched; the returned copy retains differentiability
    with respect to `deltas_own` when second_order is set.
    """

    def loss_fn(p: dict[str, torch.Tensor]) -> torch.Tensor:
        pixels = perturbed_pixels(batch.pixels, deltas_own, clip_inputs)
        return F.cross_entropy(functional_call(module, p, (pixels,)), batch.labels)

    return unroll_gradient_steps(params, loss_fn, alpha, steps, create_graph=second_order)


def surrogate_step(
    module: torch.nn.Module,
    params: dict[str, torch.Tensor],
    batch: ImageBatch,
    deltas_own: torch.Tensor,
    alpha: float,
    clip_inputs: bool = True,
) -> dict[str, torch.Tensor]:
    """One detached gradient-descent step on own-class-perturbed data."""
    pixels = perturbed_pixels(batch.pixels, deltas_own.detach(), clip_inputs)
    loss = F.cross_entropy(functional_call(module, params, (pixels,)), batch.labels)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(-1, float(loss.detach()))
    grads = torch.autograd.grad(loss, list(params.values()))
    return {
        k: (v - alpha * g).detach().requires_grad_(True)
        for (k, v), g in zip(params.items(), grads)
    }


def outer_loss(
    module: torch.nn.Module,
    unrolled_params: dict[str, torch.Tensor],
    batch: ImageBatch,
    deltas_target: torch.Tensor,
    targets: torch.Tensor,
    clip_inputs: bool = True,
) -> torch.Tensor:
    """Cross-entropy of target-class-perturbed inputs toward the incorrect targets,
    evaluated through the unrolled surrogate."""
    if bool((targets == batch.labels).any()):
        raise ValueError("targets must differ from ground-truth labels")
    pixels = perturbed_pixels(batch.pixels, deltas_target, clip_inputs)
    return F.cross_entropy(functional_call(module, unrolled_params, (pixels,)), targets)


def meta_gradient_direct(
    module: torch.nn.Module,
    params: dict[str, torch.Tensor],
    bank_deltas: torch.Tensor,
    batch: ImageBatch,
    targets: torch.Tensor,
    alpha: float,
    steps: int,
    second_order: bool = True,
    clip_inputs: bool = False,
) -> tuple[float, torch.Tensor]:
    """Outer loss and its gradient with respect to the class-wise bank.

    The oracle surface for finite-difference checks: the loss couples to the bank
    both directly (target deltas in the outer term) and through the unrolled
    parameters (own deltas in the inner term).
    """
    deltas = bank_deltas.detach().clone().requires_grad_(True)
    unrolled = inner_unroll(
        module, params, batch, deltas[batch.labels], alpha, steps, second_order, clip_inputs
    )
    loss = outer_loss(module, unrolled, batch, deltas[targets], targets, clip_inputs)
    (grad,) = torch.autograd.grad(loss, deltas)
    return float(loss.detach()), grad


# ---------------------------------------------------------------------------
# Craft loop
# ---------------------------------------------------------------------------

@dataclass
class CraftLogRow:
    epoch: int
    stage: int
    outer_loss: float
    inner_loss: float
    acc_perturbed_train: float
    acc_clean_train: float


@dataclass
class CraftLog:
    rows: list[CraftLogRow] = field(default_factory=list)

    def stage_rows(self, stage: int) -> list[CraftLogRow]:
        return [r for r in self.rows if r.stage == stage]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["epoch", "stage", "outer_loss", "inner_loss", "acc_perturbed_train", "acc_clean_train"]
            )
            for r in self.rows:
                writer.writerow(
                    [r.epoch, r.stage, f"{r.outer_loss:.8g}", f"{r.inner_loss:.8g}",
                     f"{r.acc_perturbed_train:.6g}", f"{r.acc_clean_train:.6g}"]
                )

    @classmethod
    def from_csv(cls, path: str | Path) -> "CraftLog":
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.append(
                    CraftLogRow(
                        int(rec["epoch"]), int(rec["stage"]), float(rec["outer_loss"]),
                        float(rec["inner_loss"]), float(rec["acc_perturbed_train"]),
                        float(rec["acc_clean_train"]),
                    )
                )
        if not rows:
            raise ValueError(f"no craft-log rows in {path}")
        return cls(rows)


@dataclass
class CraftResult:
    bank: PerturbationBank
    log: CraftLog
    surrogate_state: ModelState


def _class_means(
    deltas: torch.Tensor, labels: torch.Tensor, bank: PerturbationBank
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable within-batch class means; absent classes fall back to the
    (detached) bank entry."""
    present = torch.zeros(bank.class_count, dtype=torch.bool)
    means = []
    for k in range(bank.class_count):
        mask = labels == k
        if bool(mask.any()):
            present[k] = True
            means.append(deltas[mask].mean(dim=0))
        else:
            means.append(bank.deltas[k])
    return torch.stack(means), present


def craft(
    config: CraftConfig,
    surrogate: ModelState,
    schedule: CurriculumSchedule,
    data: SplitDataset,
) -> CraftResult:
    """Run the full bi-level crafting loop over the curriculum schedule.

    Logs per-epoch surrogate accuracy on perturbed-train and clean-train inputs
    along with mean inner/outer losses. Deterministic under config.seed.
    """
    if surrogate.head_classes != data.class_count:
        raise ValueError(
            f"surrogate head ({surrogate.head_classes}) does not match data classes ({data.class_count})"
        )
    K = data.class_count
    image_shape = data.image_shape
    module = surrogate.module()
    theta = {k: v.detach().clone().requires_grad_(True) for k, v in surrogate.params.items()}

    bank = PerturbationBank.zeros(
        K, image_shape, config.epsilon, config.epsilon_str, meta={"config": config.digest()}
    )

    direct = config.bank_mode == "direct"
    if direct:
        delta_var = torch.zeros(K, *image_shape, requires_grad=True)
        optimizer = torch.optim.Adam([delta_var], lr=config.beta)
        gen = None
    else:
        gen = build_generator(config.generator_width, image_shape[0], seed=config.seed)
        optimizer = torch.optim.Adam(gen.parameters(), lr=config.beta)

    order_rng = np.random.default_rng([config.seed, 1])
    target_rng = np.random.default_rng([config.seed, 2])
    log = CraftLog()

    for epoch in range(schedule.total_epochs):
        stage = schedule.stage_of(epoch)
        mode = schedule.mode_of(epoch)
        sum_outer = sum_inner = 0.0
        batches = 0
        for batch in data.iter_batches(config.batch_size, order_rng):
            with torch.no_grad():
                clean_logits = functional_call(module, theta, (batch.pixels,))
            targets = select_targets(clean_logits, batch.labels, mode, target_rng)

            if direct:
                own = delta_var[batch.labels]
                tgt_deltas = delta_var[targets]
                outer_ok = torch.ones(len(batch), dtype=torch.bool)
            else:
                gen.train()
                raw = config.epsilon * gen(batch.pixels)
                means, present = _class_means(raw, batch.labels, bank)
                own = means[batch.labels]
                tgt_deltas = means[targets]
                outer_ok = present[targets]

            unrolled = inner_unroll(
                module, theta, batch, own, config.alpha, config.unroll_steps,
                config.second_order, config.clip_inputs,
            )
            with torch.no_grad():
                pixels_in = perturbed_pixels(batch.pixels, own.detach(), config.clip_inputs)
                inner_now = F.cross_entropy(
                    functional_call(module, theta, (pixels_in,)), batch.labels
                )

            if bool(outer_ok.any()):
                sub = ImageBatch(batch.pixels[outer_ok], batch.labels[outer_ok])
                loss_out = outer_loss(
                    module, unrolled, sub, tgt_deltas[outer_ok], targets[outer_ok], config.clip_inputs
                )
                if not torch.isfinite(loss_out):
                    raise NonFiniteLossError(epoch, float(loss_out.detach()))
                optimizer.zero_grad(set_to_none=True)
                loss_out.backward()
                if config.beta > 0:
                    optimizer.step()
                sum_outer += float(loss_out.detach())
            if direct:
                with torch.no_grad():
                    delta_var.clamp_(-config.epsilon, config.epsilon)
                bank.deltas = delta_var.detach().clone()
            else:
                gen.eval()
                with torch.no_grad():
                    fresh = project_linf(config.epsilon * gen(batch.pixels), config.epsilon)
                bank = aggregate_classwise(fresh, batch.labels, bank, config.bank_momentum)

            theta = surrogate_step(module, theta, batch, bank.deltas[batch.labels], config.alpha,
                                   config.clip_inputs)
            sum_inner += float(inner_now)
            batches += 1

        with torch.no_grad():
            pert = perturbed_pixels(data.train_images, bank.deltas[data.train_labels], True)
            acc_pert = float(
                (functional_call(module, theta, (pert,)).argmax(1) == data.train_labels)
                .float().mean()
            )
            acc_clean = float(
                (functional_call(module, theta, (data.train_images,)).argmax(1) == data.train_labels)
                .float().mean()
            )
        log.rows.append(
            CraftLogRow(epoch + 1, stage, sum_outer / max(batches, 1), sum_inner / max(batches, 1),
                        acc_pert, acc_clean)
        )

    bank.validate()
    final_params = type(surrogate.params)((k, v.detach().clone()) for k, v in theta.items())
    final_state = ModelState(
        surrogate.arch_id, surrogate.head_classes, final_params,
        f"{surrogate.provenance}+crafted", surrogate.image_shape,
    )
    return CraftResult(bank, log, final_state)
