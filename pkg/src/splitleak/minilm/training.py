"""Seeded batch streams and the centralized language-model training loop."""

from __future__ import annotations

import logging
from typing import Iterable, Iterator, Mapping

import numpy as np

from ..autodiff import Graph, backward
from ..optim import AdamW
from .model import ModelConfig, ModelParams, build_model, full_forward, lm_loss
from .tokenizer import TokenBatch

log = logging.getLogger(__name__)


class BatchStream:
    """Endless seeded mini-batches over a corpus, reshuffling at each pass.

    Rows with fewer than ``min_tokens`` real tokens are dropped up front.
    Batches are trimmed to their longest row.
    """

    def __init__(self, corpus: TokenBatch, batch_size: int, seed=0, min_tokens: int = 2,
                 shuffle: bool = True):
        keep = corpus.lengths >= min_tokens
        if not keep.any():
            raise ValueError("corpus has no usable rows")
        self.index = np.flatnonzero(keep)
        self.corpus = corpus.rows(self.index)
        self.last_rows = np.empty(0, dtype=np.int64)
        self.batch_size = batch_size
        self.shuffle = shuffle
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self._order = self._new_order()
        self._pos = 0

    def _new_order(self):
        n = len(self.corpus)
        return self.rng.permutation(n) if self.shuffle else np.arange(n)

    def __iter__(self) -> Iterator[TokenBatch]:
        return self

    def __next__(self) -> TokenBatch:
        if self._pos + self.batch_size > len(self._order):
            tail = self._order[self._pos:]
            self._order = np.concatenate([tail, self._new_order()])
            self._pos = 0
            self.epoch += 1
        idx = self._order[self._pos: self._pos + self.batch_size]
        self._pos += self.batch_size
        self.last_rows = self.index[idx]
        return self.corpus.rows(idx).trimmed()


def epoch_batches(corpus: TokenBatch, batch_size: int, rng: np.random.Generator | None = None,
                  min_tokens: int = 2) -> Iterator[TokenBatch]:
    """One pass over ``corpus`` (shuffled when ``rng`` is given), trimmed batches."""
    idx = np.flatnonzero(corpus.lengths >= min_tokens)
    if rng is not None:
        idx = rng.permutation(idx)
    for s in range(0, len(idx), batch_size):
        yield corpus.rows(idx[s: s + batch_size]).trimmed()


def clip_by_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm is None or total <= max_norm:
        return dict(grads)
    f = max_norm / (total + 1e-12)
    return {k: g * f for k, g in grads.items()}


def lm_value_and_grad(params: ModelParams, batch: TokenBatch, names: Iterable[str]):
    """Loss and gradients for the listed parameters (others held constant)."""
    names = list(names)
    graph = Graph()
    weights = dict(params.weights)
    leaves = {n: graph.leaf(weights[n]) for n in names}
    weights.update(leaves)
    loss = lm_loss(full_forward(params, batch, weights), batch)
    return loss.item(), backward(loss, leaves)


def train_lm(params: ModelParams, corpus: TokenBatch, steps: int, batch_size: int = 16,
             lr: float = 3e-3, seed=0, weight_decay: float = 0.01, clip: float = 1.0,
             warmup: int = 50, log_every: int = 0, names: Iterable[str] | None = None,
             ) -> tuple[ModelParams, list[float]]:
    """Centralized AdamW training; returns losses per step.

    ``names`` restricts the update to a subset (default: adapters if attached, else all).
    """
    stream = BatchStream(corpus, batch_size, seed=seed)
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    names = list(params.trainable_names() if names is None else names)
    losses = []
    for step in range(steps):
        batch = next(stream)
        loss, grads = lm_value_and_grad(params, batch, names)
        opt.lr = lr * min(1.0, (step + 1) / max(1, warmup))
        grads = clip_by_global_norm(grads, clip)
        params = params.with_weights(opt.step(params.subset(names), grads))
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    return params, losses


def pretrain(config: ModelConfig, corpus: TokenBatch, steps: int, seed=0, batch_size: int = 16,
             lr: float = 3e-3, log_every: int = 0) -> tuple[ModelParams, list[float]]:
    params = build_model(config, seed)
    return train_lm(params, corpus, steps, batch_size=batch_size, lr=lr, seed=seed + 1,
                    log_every=log_every)
