"""Manifest + blob checkpoint container.

``<stem>.json`` lists ``{name, shape, dtype, byte_offset, byte_len}`` per tensor
in storage order; ``<stem>.bin`` holds the little-endian float64 payloads
back to back.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save_checkpoint(stem, tensors: Mapping[str, np.ndarray], role: str = "model",
                    meta: Mapping | None = None) -> Path:
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(blob_path, "wb") as fh:
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f64",
                            "byte_offset": offset, "byte_len": len(raw)})
            offset += len(raw)
    manifest = {"version": FORMAT_VERSION, "role": role, "meta": dict(meta or {}),
                "total_bytes": offset, "tensors": entries}
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest_path


def load_checkpoint(stem) -> tuple[dict[str, np.ndarray], dict]:
    """Returns ``(tensors, manifest)``; raises CheckpointError on any inconsistency."""
    manifest_path, blob_path = _paths(stem)
    manifest = json.loads(manifest_path.read_text())
    blob = blob_path.read_bytes()
    expected = sum(e["byte_len"] for e in manifest["tensors"])
    if len(blob) != expected or manifest.get("total_bytes", expected) != expected:
        raise CheckpointError(f"blob holds {len(blob)} bytes but manifest declares {expected}")
    tensors = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f64":
            raise CheckpointError(f"unsupported dtype {e['dtype']} for {e['name']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        if n * 8 != e["byte_len"]:
            raise CheckpointError(f"{e['name']}: shape {e['shape']} does not match {e['byte_len']} bytes")
        chunk = blob[e["byte_offset"]: e["byte_offset"] + e["byte_len"]]
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return tensors, manifest


def save_model(stem, params) -> Path:
    meta = {"config": params.config.to_dict(), "adapter_rank": params.adapter_rank}
    return save_checkpoint(stem, params.weights, role="model", meta=meta)


def load_model(stem):
    from .model import ModelConfig, ModelParams

    tensors, manifest = load_checkpoint(stem)
    if manifest["role"] != "model":
        raise CheckpointError(f"expected a model checkpoint, found role '{manifest['role']}'")
    meta = manifest["meta"]
    return ModelParams(ModelConfig(**meta["config"]), tensors, adapter_rank=meta.get("adapter_rank"))
