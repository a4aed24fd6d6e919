"""Deterministic execution mode: single-threaded math kernels plus torch's
deterministic-algorithms switch. Slower, but reruns with identical seeds
reproduce artifact bytes exactly."""

from __future__ import annotations

import torch


def enable_deterministic_mode() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
