"""Experiment manifests and output-directory locking.

Every CLI command records a manifest: the resolved configuration, digests of
every consumed artifact, the produced output paths with digests, seeds, toolkit
version, and wall-clock time. Output artifacts are byte-stable in deterministic
mode; the manifest itself carries timing and is not.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

from filelock import FileLock

from . import __version__
from .artifacts import sha256_file


@dataclass
class Manifest:
    command: str
    config: dict
    seeds: list[int] = field(default_factory=list)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    toolkit_version: str = __version__
    started_at: float = field(default_factory=time.time)
    wall_clock_s: float = 0.0

    def add_input(self, path: str | Path) -> None:
        self.inputs[str(path)] = sha256_file(path)

    def add_output(self, path: str | Path) -> None:
        self.outputs[str(path)] = sha256_file(path)

    def finish(self) -> None:
        self.wall_clock_s = time.time() - self.started_at

    def write(self, path: str | Path) -> None:
        self.finish()
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
            fh.write("\n")


def output_lock(directory: str | Path) -> FileLock:
    """File lock guarding a shared output directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    return FileLock(str(directory / ".uekit.lock"))
