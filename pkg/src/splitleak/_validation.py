"""Input checks shared by the estimators and attack entry points."""

from __future__ import annotations

import numpy as np

from .minilm.tokenizer import TokenBatch


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


def check_token_batch(batch, vocab_size: int | None = None, min_tokens: int = 2) -> TokenBatch:
    """Coerce to TokenBatch and verify ids, pad layout and minimum row length."""
    if not isinstance(batch, TokenBatch):
        batch = TokenBatch.from_ids(batch)
    ids, mask = batch.ids, batch.pad_mask
    if ids.size == 0:
        raise ContractError("token batch is empty")
    if vocab_size is not None and (ids.min() < 0 or ids.max() >= vocab_size):
        raise ContractError(f"token ids must lie in [0, {vocab_size})")
    # pad positions must be a contiguous suffix of each row
    if np.any(mask[:, 1:] & ~mask[:, :-1]):
        raise ContractError("pad positions must be contiguous at the end of each row")
    if min_tokens and np.any(mask.sum(axis=1) < min_tokens):
        raise ContractError(f"every row needs at least {min_tokens} non-pad tokens")
    return batch


def check_hidden(x, hidden: int | None = None, name: str = "hidden states") -> np.ndarray:
    """Validate a finite B×S×H float array."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 3:
        raise ContractError(f"{name} must be B×S×H, got shape {x.shape}")
    if hidden is not None and x.shape[-1] != hidden:
        raise ContractError(f"{name} last axis must be {hidden}, got {x.shape[-1]}")
    if not np.all(np.isfinite(x)):
        raise ContractError(f"{name} contain non-finite values")
    return x


def check_probability_rows(y, atol: float = 1e-8) -> np.ndarray:
    y = np.asarray(getattr(y, "data", y), dtype=np.float64)
    if np.any(y < -atol) or not np.allclose(y.sum(axis=-1), 1.0, atol=atol):
        raise ContractError("rows must be probability vectors (non-negative, summing to 1)")
    return y


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
