"""Self-describing binary archives for model checkpoints, perturbation banks, and
per-sample delta sets.

Layout: 8-byte magic, little-endian uint32 header length, canonical-JSON header,
raw little-endian float32 payload. Writers are byte-stable for identical inputs,
so artifact digests are reproducible.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .emn import SampleDeltas
from .generator import PerturbationBank
from .models import ModelState

MODEL_MAGIC = b"UEMODEL1"
BANK_MAGIC = b"UEBANK01"
DELTA_MAGIC = b"UEDELTA1"


class ArchiveError(RuntimeError):
    """Raised for malformed or mismatched archive files."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write(path: str | Path, magic: bytes, header: dict, payload: bytes) -> None:
    blob = canonical_json(header).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read(path: str | Path, expected_magic: bytes) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != expected_magic:
            raise ArchiveError(f"{path}: expected magic {expected_magic!r}, found {magic!r}")
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode())
        payload = fh.read()
    return header, payload


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    return np.ascontiguousarray(tensor.detach().numpy(), dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------

def save_model(state: ModelState, path: str | Path) -> None:
    manifest = [
        {"name": name, "group": state.group_of(name), "shape": list(tensor.shape)}
        for name, tensor in state.params.items()
    ]
    header = {
        "format": "uekit-model",
        "version": 1,
        "arch_id": state.arch_id,
        "head_classes": state.head_classes,
        "provenance": state.provenance,
        "image_shape": list(state.image_shape),
        "params": manifest,
    }
    payload = b"".join(_tensor_bytes(t) for t in state.params.values())
    _write(path, MODEL_MAGIC, header, payload)


def load_model(path: str | Path) -> ModelState:
    header, payload = _read(path, MODEL_MAGIC)
    total = sum(int(np.prod(e["shape"])) if e["shape"] else 1 for e in header["params"])
    if total * 4 != len(payload):
        raise ArchiveError(f"{path}: payload size mismatch ({total * 4} != {len(payload)})")
    params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        params[entry["name"]] = torch.from_numpy(raw.reshape(shape).copy())
    return ModelState(
        arch_id=header["arch_id"],
        head_classes=int(header["head_classes"]),
        params=params,
        provenance=header["provenance"],
        image_shape=tuple(header["image_shape"]),
    )


# ---------------------------------------------------------------------------
# Perturbation banks and per-sample delta sets
# ---------------------------------------------------------------------------

def save_bank(bank: PerturbationBank, path: str | Path) -> None:
    bank.validate()
    k, c, h, w = bank.deltas.shape
    header = {
        "format": "uekit-bank",
        "version": 1,
        "class_count": k,
        "epsilon": bank.epsilon_str,
        "channels": c,
        "height": h,
        "width": w,
        "meta": bank.meta,
    }
    _write(path, BANK_MAGIC, header, _tensor_bytes(bank.deltas))


def load_bank(path: str | Path) -> PerturbationBank:
    header, payload = _read(path, BANK_MAGIC)
    from fractions import Fraction

    shape = (header["class_count"], header["channels"], header["height"], header["width"])
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise ArchiveError(f"{path}: payload size mismatch ({len(payload)} != {expected})")
    deltas = torch.from_numpy(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())
    epsilon = float(Fraction(header["epsilon"]))
    return PerturbationBank(deltas, epsilon, header["epsilon"], dict(header.get("meta", {})))


def save_deltas(deltas: SampleDeltas, path: str | Path) -> None:
    n, c, h, w = deltas.deltas.shape
    header = {
        "format": "uekit-deltas",
        "version": 1,
        "count": n,
        "epsilon": deltas.epsilon_str,
        "channels": c,
        "height": h,
        "width": w,
        "meta": deltas.meta,
    }
    _write(path, DELTA_MAGIC, header, _tensor_bytes(deltas.deltas))


def load_deltas(path: str | Path) -> SampleDeltas:
    header, payload = _read(path, DELTA_MAGIC)
    from fractions import Fraction

    shape = (header["count"], header["channels"], header["height"], header["width"])
    expected = int(np.prod(shape)) * 4
    if len(payload) != expected:
        raise ArchiveError(f"{path}: payload size mismatch ({len(payload)} != {expected})")
    arrays = torch.from_numpy(np.frombuffer(payload, dtype="<f4").reshape(shape).copy())
    epsilon = float(Fraction(header["epsilon"]))
    return SampleDeltas(arrays, epsilon, header["epsilon"], dict(header.get("meta", {})))


def load_perturbation(path: str | Path):
    """Open either artifact kind (bank or delta set) by sniffing the magic."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == BANK_MAGIC:
        return load_bank(path)
    if magic == DELTA_MAGIC:
        return load_deltas(path)
    raise ArchiveError(f"{path}: not a perturbation artifact (magic {magic!r})")
