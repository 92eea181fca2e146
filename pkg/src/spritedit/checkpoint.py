"""Checkpoint persistence.

A checkpoint is a directory holding one plain-text manifest plus one binary
blob per parameter group. Blob layout, all little-endian:

    magic b"SPBL" | uint32 version | uint32 ndim | uint32 dims[ndim] | float32 data

Data is row-major. The manifest is ``key=value`` lines and records the
architecture descriptor, schedule parameters, training step count, and the
sha256 of every blob; loads verify the hashes and fail with IntegrityError
naming the offending blob.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError

_MAGIC = b"SPBL"
_VERSION = 1


def write_blob(path: Path, tensor: torch.Tensor) -> str:
    """Serialize one parameter group; returns the sha256 of the file bytes."""
    arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
    header = _MAGIC + struct.pack("<II", _VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    data = header + arr.tobytes(order="C")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def read_blob(path: Path, expected_sha: str | None = None) -> torch.Tensor:
    path = Path(path)
    data = path.read_bytes()
    if expected_sha is not None:
        actual = hashlib.sha256(data).hexdigest()
        if actual != expected_sha:
            raise IntegrityError(f"blob {path.name} hash mismatch: {actual} != {expected_sha}")
    if data[:4] != _MAGIC:
        raise IntegrityError(f"blob {path.name} has bad magic")
    version, ndim = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise IntegrityError(f"blob {path.name} has unsupported version {version}")
    dims = struct.unpack_from(f"<{ndim}I", data, 12) if ndim else ()
    arr = np.frombuffer(data, dtype="<f4", offset=12 + 4 * ndim).reshape(dims)
    return torch.from_numpy(arr.copy())


def _blob_filename(group_name: str) -> str:
    return group_name.replace(".", "__") + ".bin"


def write_manifest(path: Path, entries: dict) -> None:
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def read_manifest(path: Path) -> dict:
    entries = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        entries[key] = value
    return entries


def save_state(ckpt_dir: Path, state: dict[str, torch.Tensor], meta: dict) -> dict:
    """Write a state_dict plus metadata; returns the manifest entries."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    entries = {str(k): str(v) for k, v in meta.items()}
    for name, tensor in state.items():
        sha = write_blob(ckpt_dir / _blob_filename(name), tensor)
        entries[f"blob.{name}"] = sha
    write_manifest(ckpt_dir / "manifest.txt", entries)
    return entries


def load_state(ckpt_dir: Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read a checkpoint directory back; verifies every blob hash."""
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir / "manifest.txt")
    state = {}
    for key, sha in manifest.items():
        if not key.startswith("blob."):
            continue
        name = key[len("blob."):]
        state[name] = read_blob(ckpt_dir / _blob_filename(name), expected_sha=sha)
    return manifest, state


def state_hash(state: dict[str, torch.Tensor]) -> str:
    """Order-independent content hash of a parameter collection."""
    h = hashlib.sha256()
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4", copy=False)
        h.update(name.encode())
        h.update(str(tuple(arr.shape)).encode())
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()


def module_hash(module: torch.nn.Module) -> str:
    return state_hash(dict(module.state_dict()))
