"""Checkpoint files.

Layout: one JSON manifest line (UTF-8, sorted keys, terminated by ``\\n``)
followed by the raw parameter arrays, concatenated in manifest order, each as
little-endian IEEE-754 float64 in row-major order. The manifest records the
format version, model dimensions, vocab sizes, communication rounds, and the
name and shape of every array.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .model import Dims, ModelParameters, parameter_shapes

FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def to_bytes(params: ModelParameters, steps: int, extra: dict | None = None) -> bytes:
    manifest = {
        "format": "cmat-checkpoint",
        "version": FORMAT_VERSION,
        "byte_order": "little",
        "dtype": "float64",
        "dims": asdict(params.dims),
        "steps": int(steps),
        "arrays": [{"name": k, "shape": list(t.shape)} for k, t in params.tensors.items()],
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    body = b"".join(np.ascontiguousarray(t.value, dtype=_DTYPE).tobytes() for t in params.tensors.values())
    return head + body


def save(params: ModelParameters, path, steps: int, extra: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(params, steps, extra))


def from_bytes(raw: bytes) -> tuple[ModelParameters, dict]:
    newline = raw.find(b"\n")
    if newline < 0:
        raise CheckpointError("missing manifest line")
    try:
        manifest = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format") != "cmat-checkpoint" or manifest.get("version") != FORMAT_VERSION:
        raise CheckpointError("not a version-1 checkpoint")
    dims = Dims(**manifest["dims"])
    expected = parameter_shapes(dims)
    names = [a["name"] for a in manifest["arrays"]]
    if sorted(names) != sorted(expected):
        raise CheckpointError(f"parameter set mismatch: {sorted(set(names) ^ set(expected))}")
    body = memoryview(raw)[newline + 1 :]
    offset = 0
    tensors = {}
    for entry in manifest["arrays"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shape != expected[name]:
            raise CheckpointError(f"{name}: shape {shape} does not match dims ({expected[name]})")
        size = int(np.prod(shape)) * _DTYPE.itemsize
        if offset + size > len(body):
            raise CheckpointError(f"{name}: file truncated")
        value = np.frombuffer(body[offset : offset + size], dtype=_DTYPE).reshape(shape).astype(np.float64)
        tensors[name] = Tensor(value, requires_grad=True, name=name)
        offset += size
    if offset != len(body):
        raise CheckpointError("trailing bytes after last array")
    return ModelParameters(dims, tensors), manifest


def load(path) -> tuple[ModelParameters, dict]:
    return from_bytes(Path(path).read_bytes())
