"""Victim-side evaluation: unlearnability measurement, prior ablations, and
feature export."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

import torch

from .datasets import SplitDataset, mix_poison
from .defenses import DefenseSpec
from .models import (
    FinetuneResult,
    ModelState,
    TrainingMask,
    build_model,
    evaluate_accuracy,
    finetune,
    freeze_layers,
    penultimate_features,
    replace_layers_random,
)


@dataclass(frozen=True)
class VictimSpec:
    """How to build and train one victim model."""

    arch_id: str = "rn-mini"
    pretrained: ModelState | None = None  # body source; None trains from scratch
    replace_groups: tuple[str, ...] = ()
    freeze_groups: tuple[str, ...] = ()
    epochs: int = 20
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64

    def describe(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "init": "pretrained" if self.pretrained is not None else "random",
            "provenance": self.pretrained.provenance if self.pretrained is not None else "random",
            "replace_groups": list(self.replace_groups),
            "freeze_groups": list(self.freeze_groups),
            "epochs": self.epochs,
            "lr": self.lr,
            "optimizer": self.optimizer,
            "batch_size": self.batch_size,
        }


def build_victim(
    spec: VictimSpec, head_classes: int, image_shape: tuple[int, int, int], seed: int
) -> tuple[ModelState, TrainingMask | None]:
    """Materialize a victim per spec: pretrained body or random init, an optional
    random re-initialization of named groups, and an optional freeze mask."""
    state = build_model(
        spec.arch_id, head_classes, seed=seed, from_state=spec.pretrained, image_shape=image_shape
    )
    if spec.replace_groups:
        state = replace_layers_random(state, spec.replace_groups, seed=seed + 1)
    mask = freeze_layers(state, spec.freeze_groups) if spec.freeze_groups else None
    return state, mask


@dataclass
class EvalReport:
    """Outcome of evaluating one victim configuration, aggregated over repeats."""

    clean_test_accuracy: float
    clean_test_sd: float
    perturbed_train_accuracy: float
    perturbed_train_sd: float
    per_repeat_clean_test: list[float]
    per_repeat_perturbed_train: list[float]
    test_curves: list[list[float]]
    train_curves: list[list[float]]
    victim: dict
    defense: str
    ratio: float
    seeds: list[int]
    wall_clock_s: float

    def validate(self) -> None:
        for value in (
            [self.clean_test_accuracy, self.perturbed_train_accuracy]
            + self.per_repeat_clean_test
            + self.per_repeat_perturbed_train
        ):
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"accuracy {value} outside [0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def write_curves_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["repeat", "epoch", "train_accuracy", "test_accuracy"])
            for r, (tr, te) in enumerate(zip(self.train_curves, self.test_curves)):
                for e, (a, b) in enumerate(zip(tr, te)):
                    writer.writerow([r, e + 1, f"{a:.6g}", f"{b:.6g}"])


def _aggregate(values: list[float]) -> tuple[float, float]:
    mean = statistics.fmean(values)
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, sd


def evaluate_unlearnability(
    perturbation,
    victim: VictimSpec,
    data: SplitDataset,
    defense: DefenseSpec | None = None,
    ratio: float = 1.0,
    repeats: int = 5,
    seed: int = 0,
) -> EvalReport:
    """Train `repeats` victims on poison-mixed data and report accuracy statistics.

    `perturbation` is a class-wise bank, a per-sample delta set, or None (clean
    training). The defense, when given, acts during victim training only; the
    reported perturbed-train accuracy is measured on the undefended mixed set.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    t0 = time.time()
    clean_acc, pert_acc, test_curves, train_curves, seeds = [], [], [], [], []
    for r in range(repeats):
        s = seed + r
        state, mask = build_victim(victim, data.class_count, data.image_shape, seed=s)
        train_data = data if perturbation is None else mix_poison(data, perturbation, ratio, seed=s)
        result = finetune(
            state,
            train_data,
            mask=mask,
            epochs=victim.epochs,
            lr=victim.lr,
            seed=s,
            optimizer=victim.optimizer,
            batch_size=victim.batch_size,
            defense=defense,
        )
        final_clean = result.test_accuracy[-1] if result.test_accuracy else evaluate_accuracy(
            state, data.test_images, data.test_labels
        )
        final_train = result.train_accuracy[-1] if result.train_accuracy else evaluate_accuracy(
            state, train_data.train_images, train_data.train_labels
        )
        clean_acc.append(final_clean)
        pert_acc.append(final_train)
        test_curves.append(result.test_accuracy)
        train_curves.append(result.train_accuracy)
        seeds.append(s)
    mean_c, sd_c = _aggregate(clean_acc)
    mean_p, sd_p = _aggregate(pert_acc)
    report = EvalReport(
        clean_test_accuracy=mean_c,
        clean_test_sd=sd_c,
        perturbed_train_accuracy=mean_p,
        perturbed_train_sd=sd_p,
        per_repeat_clean_test=clean_acc,
        per_repeat_perturbed_train=pert_acc,
        test_curves=test_curves,
        train_curves=train_curves,
        victim=victim.describe(),
        defense=defense.label() if defense is not None else "none",
        ratio=ratio,
        seeds=seeds,
        wall_clock_s=time.time() - t0,
    )
    report.validate()
    return report


ABLATION_MODES = ("progressive_replace", "freeze_each")


def run_prior_ablation(
    perturbation,
    data: SplitDataset,
    base_victim: VictimSpec,
    mode: str,
    repeats: int = 1,
    seed: int = 0,
    defense: DefenseSpec | None = None,
    ratio: float = 1.0,
) -> list[tuple[str, EvalReport]]:
    """Sweep victim configurations that remove or pin pretraining priors.

    progressive_replace walks from the fully pretrained victim to a fully random
    one by re-initializing deeper-to-shallower suffixes of the body groups;
    freeze_each produces one report per singly-frozen body group.
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")
    if base_victim.pretrained is None:
        raise ValueError("prior ablation needs a pretrained base victim")
    body_groups = [g for g in base_victim.pretrained.group_names if g != "head"]

    cells: list[tuple[str, VictimSpec]] = []
    if mode == "progressive_replace":
        for j in range(len(body_groups) + 1):
            replaced = tuple(body_groups[len(body_groups) - j :])
            label = "replaced:none" if j == 0 else (
                "replaced:all" if j == len(body_groups) else f"replaced:{'+'.join(replaced)}"
            )
            cells.append((label, replace(base_victim, replace_groups=replaced)))
    else:
        for g in body_groups:
            cells.append((f"frozen:{g}", replace(base_victim, freeze_groups=(g,))))

    results = []
    for label, spec in cells:
        report = evaluate_unlearnability(
            perturbation, spec, data, defense=defense, ratio=ratio, repeats=repeats, seed=seed
        )
        results.append((label, report))
    return results


def export_features(
    state: ModelState,
    images: torch.Tensor,
    labels: torch.Tensor,
    path: str | Path,
) -> None:
    """Write penultimate-layer feature vectors plus labels as CSV (N rows, D+1 columns)."""
    feats = penultimate_features(state, images)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{i}" for i in range(feats.shape[1])] + ["label"])
        for row, label in zip(feats, labels.numpy()):
            writer.writerow([f"{v:.8g}" for v in row] + [int(label)])
