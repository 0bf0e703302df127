"""Byte-level tokenizer: 256 byte ids plus BOS and PAD."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

BOS = 256
PAD = 257
N_SPECIAL = 2
BYTE_VOCAB = 256 + N_SPECIAL


def tokenize(text: str | bytes, max_len: int) -> list[int]:
    """BOS followed by the UTF-8 bytes of ``text``, truncated then padded to ``max_len``."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = [BOS, *raw][:max_len]
    return ids + [PAD] * (max_len - len(ids))


def detokenize_bytes(ids: Iterable[int]) -> bytes:
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)


def detokenize(ids: Iterable[int]) -> str:
    """Drop special ids and decode the remaining bytes (invalid UTF-8 is replaced)."""
    return detokenize_bytes(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class TokenBatch:
    """Token ids (B×S) with a pad mask that is True on real tokens."""

    ids: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        mask = np.asarray(self.pad_mask, dtype=bool)
        if ids.ndim != 2 or ids.shape != mask.shape:
            raise ValueError(f"TokenBatch needs matching 2-D ids/mask, got {ids.shape} and {mask.shape}")
        ids.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "pad_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def lengths(self) -> np.ndarray:
        return self.pad_mask.sum(axis=1)

    def trimmed(self) -> "TokenBatch":
        """Drop trailing columns that are padding in every row."""
        keep = int(self.lengths.max()) if len(self) else 0
        return TokenBatch(self.ids[:, :keep], self.pad_mask[:, :keep])

    def rows(self, index) -> "TokenBatch":
        return TokenBatch(self.ids[index], self.pad_mask[index])

    def texts(self) -> list[str]:
        return [detokenize(row[m]) for row, m in zip(self.ids, self.pad_mask)]

    @classmethod
    def from_ids(cls, ids) -> "TokenBatch":
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, ids != PAD)


def encode_batch(texts: Sequence[str], max_len: int) -> TokenBatch:
    ids = np.array([tokenize(t, max_len) for t in texts], dtype=np.int64).reshape(len(texts), max_len)
    return TokenBatch(ids, ids != PAD)
