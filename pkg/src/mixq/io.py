"""Tensor container: JSON manifest plus one little-endian binary blob.

A container ``<stem>`` is the pair ``<stem>.json`` / ``<stem>.bin``. The
manifest lists every tensor's name, shape, element type, byte offset and
length in blob order, plus free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT = "mixq-tensors"
VERSION = 1

_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "int32": "<i4", "uint8": "u1"}


def save_tensors(stem, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise TypeError(f"{name}: unsupported element type {key}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": key,
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": stem.name + ".bin",
        "sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
        "tensors": entries,
    }
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".json")


def load_tensors(stem) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{stem}: not a {FORMAT} manifest")
    blob = (stem.parent / manifest["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError(f"{stem}: blob checksum mismatch")
    out = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(e["dtype"])
    return out, manifest["meta"]


def save_model(stem, model) -> Path:
    return save_tensors(stem, model.weights, {"config": model.config.to_dict()})


def load_model(stem):
    from .vit import ModelConfig, ToyViT

    tensors, meta = load_tensors(stem)
    return ToyViT(ModelConfig(**meta["config"]), tensors)
