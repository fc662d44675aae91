"""Flat binary tensor archive with a JSON manifest.

``save_weights(params, "model")`` writes ``model.bin`` (concatenated
little-endian float64 arrays) and ``model.json`` (names, shapes, dtype, byte
offsets, plus free-form metadata).
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".bin", ".json") else p


def save_weights(params: dict, path, meta: dict | None = None) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries, offset, chunks = [], 0, []
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float64",
                        "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    blob = b"".join(chunks)
    stem.with_suffix(".bin").write_bytes(blob)
    manifest = {"tensors": entries, "sha256": hashlib.sha256(blob).hexdigest(), "meta": meta or {}}
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return stem.with_suffix(".json")


def load_weights(path) -> tuple[dict, dict]:
    stem = _stem(path)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    blob = stem.with_suffix(".bin").read_bytes()
    params = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return params, manifest.get("meta", {})


def weights_hash(path) -> str:
    return hashlib.sha256(_stem(path).with_suffix(".bin").read_bytes()).hexdigest()
