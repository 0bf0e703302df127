"""What the curious server sees, and the evaluation-only metadata kept beside it.

:class:`Transcript` holds only server-observable tensors: smashed data, the
trunk output, the gradient returned for it and the attention pad mask the
trunk needs. Token ids live in :class:`BatchMeta`, which attacks never get.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

TENSOR_FIELDS = ("smashed_btm", "trunk_out", "grad_trunk_out", "deeper_hidden")


def _frozen(a):
    if a is None:
        return None
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Transcript:
    step: int
    batch_index: int
    smashed_btm: np.ndarray
    trunk_out: np.ndarray
    grad_trunk_out: np.ndarray | None
    pad_mask: np.ndarray
    deeper_hidden: np.ndarray | None = None

    def __post_init__(self):
        for name in TENSOR_FIELDS:
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        mask = np.array(self.pad_mask, dtype=bool)
        mask.flags.writeable = False
        object.__setattr__(self, "pad_mask", mask)
        shape = self.smashed_btm.shape
        if len(shape) != 3 or mask.shape != shape[:2]:
            raise ValueError(f"transcript tensors must be B×S×H with a B×S mask, got {shape} and {mask.shape}")
        for name in TENSOR_FIELDS:
            t = getattr(self, name)
            if t is None:
                continue
            if t.shape != shape:
                raise ValueError(f"{name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.smashed_btm.shape

    @property
    def lengths(self) -> np.ndarray:
        return self.pad_mask.sum(axis=1)


@dataclass(frozen=True)
class BatchMeta:
    """Evaluation-only ground truth for one recorded batch."""

    example_ids: np.ndarray
    token_ids: np.ndarray
    pad_mask: np.ndarray


@dataclass(frozen=True)
class TranscriptRecord:
    transcript: Transcript
    meta: BatchMeta
    extras: dict = field(default_factory=dict)


def _enc(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _dec(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").astype(np.float64).reshape(shape)


def record_to_json(rec: TranscriptRecord) -> str:
    t = rec.transcript
    tensors, shapes = {}, {}
    for name in TENSOR_FIELDS:
        a = getattr(t, name)
        if a is not None:
            tensors[name] = _enc(a)
            shapes[name] = list(a.shape)
    obj = {
        "step": t.step,
        "batch_index": t.batch_index,
        "shapes": shapes,
        "pad_mask": t.pad_mask.astype(int).tolist(),
        "tensors": tensors,
        "metadata": {
            "example_ids": rec.meta.example_ids.tolist(),
            "token_ids": rec.meta.token_ids.tolist(),
            "pad_mask": rec.meta.pad_mask.astype(int).tolist(),
            **rec.extras,
        },
    }
    return json.dumps(obj, sort_keys=True)


def record_from_json(line: str) -> TranscriptRecord:
    obj = json.loads(line)
    arrays = {n: _dec(obj["tensors"][n], obj["shapes"][n]) for n in obj["tensors"]}
    t = Transcript(step=obj["step"], batch_index=obj["batch_index"],
                   smashed_btm=arrays["smashed_btm"], trunk_out=arrays["trunk_out"],
                   grad_trunk_out=arrays.get("grad_trunk_out"),
                   pad_mask=np.array(obj["pad_mask"], dtype=bool),
                   deeper_hidden=arrays.get("deeper_hidden"))
    md = dict(obj["metadata"])
    meta = BatchMeta(np.array(md.pop("example_ids"), dtype=np.int64),
                     np.array(md.pop("token_ids"), dtype=np.int64),
                     np.array(md.pop("pad_mask"), dtype=bool))
    return TranscriptRecord(t, meta, md)


def quantize(rec: TranscriptRecord) -> TranscriptRecord:
    """The record as it reads back from a log (tensors rounded to float32)."""
    return record_from_json(record_to_json(rec))


def write_transcript_log(path, records: Iterable[TranscriptRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")
    return path


def read_transcript_log(path) -> Iterator[TranscriptRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield record_from_json(line)
