"""Versioned JSON checkpoints of named tensors.

Layout (format_version 1):
    {"format_version": 1, "kind": "<panet|crl>", "meta": {...},
     "tensors": {name: {"shape": [...], "values": [flat floats]}},
     "buffers": {name: {"shape": [...], "values": [...]}}}

Tensors are trainable parameters; buffers are non-trainable state such as
batch-norm running statistics. Save -> load -> save is byte-stable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .engine import Tensor

__all__ = ["save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "values": np.asarray(arr, dtype=np.float64).reshape(-1).tolist()}


def _decode(obj: dict) -> np.ndarray:
    return np.asarray(obj["values"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(
    path: str | Path,
    kind: str,
    tensors: dict[str, Tensor],
    buffers: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": {name: _encode(t.data) for name, t in sorted(tensors.items())},
        "buffers": {name: _encode(b) for name, b in sorted((buffers or {}).items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(
    path: str | Path, expected_kind: str | None = None
) -> tuple[dict[str, Tensor], dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version!r}")
    if expected_kind is not None and doc.get("kind") != expected_kind:
        raise ValueError(
            f"{path}: checkpoint kind {doc.get('kind')!r}, expected {expected_kind!r}"
        )
    tensors = {
        name: Tensor(_decode(obj), requires_grad=True)
        for name, obj in doc["tensors"].items()
    }
    buffers = {name: _decode(obj) for name, obj in doc.get("buffers", {}).items()}
    return tensors, buffers, doc.get("meta", {})
