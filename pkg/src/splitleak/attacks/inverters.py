"""Learning-based inversion: a GRU decoder trained on a frozen (replica) encoder.

``SIPInverter`` follows the scikit-learn estimator conventions: hyperparameters
are constructor arguments, ``fit`` learns from an auxiliary corpus and
``predict`` maps smashed data to token ids.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator

from .._validation import ContractError, check_hidden, check_token_batch
from ..autodiff import Graph, backward, ops
from ..defenses import NoiseSpec
from ..minilm.gru import GRU_DROPOUT, GRU_HIDDEN, gru_invert, init_gru_inverter
from ..minilm.model import ModelConfig
from ..minilm.tokenizer import PAD, TokenBatch
from ..minilm.training import clip_by_global_norm
from ..optim import AdamW
from ..splitsim.protocol import SplitSpec
from ..splitsim.transcript import Transcript
from .replica import BottomEncoder, random_encoder

log = logging.getLogger(__name__)

SIP_EPOCHS = 15
SIP_LR = 2e-3
SIP_BATCH = 16


def smashed_of(source, layer: str = "smashed_btm"):
    """(smashed B×S×H, pad mask) from a Transcript or a bare array."""
    if isinstance(source, Transcript):
        x = getattr(source, layer)
        if x is None:
            raise ContractError(f"transcript has no '{layer}' tensor")
        return x, source.pad_mask
    x = np.asarray(source, dtype=np.float64)
    return x, np.ones(x.shape[:2], dtype=bool)


def mask_tokens(tokens: np.ndarray, pad_mask: np.ndarray) -> np.ndarray:
    return np.where(pad_mask, tokens, PAD)


class EncodedCorpus:
    """Shuffled epochs of (batch, smashed) pairs over an auxiliary corpus.

    Noise-free smashed data is computed once per encoder and cached.
    """

    def __init__(self, corpus: TokenBatch, encoder: BottomEncoder, batch_size: int, chunk: int = 64):
        keep = np.flatnonzero(corpus.lengths >= 2)
        if keep.size == 0:
            raise ContractError("auxiliary corpus is empty")
        self.corpus = corpus.rows(keep).trimmed()
        self.encoder = encoder
        self.batch_size = batch_size
        self._clean: dict[int, np.ndarray] = {}
        self._chunk = chunk

    def clean(self, encoder: BottomEncoder | None = None) -> np.ndarray:
        encoder = encoder or self.encoder
        key = id(encoder)
        if key not in self._clean:
            parts = [encoder.encode(self.corpus.rows(slice(s, s + self._chunk)))
                     for s in range(0, len(self.corpus), self._chunk)]
            self._clean[key] = np.concatenate(parts)
        return self._clean[key]

    def epoch(self, rng: np.random.Generator, source_fn=None):
        """Yield (trimmed batch, smashed).

        ``source_fn(rng)`` picks ``(encoder, noise)`` for each batch; the default
        is this corpus's encoder without noise.
        """
        order = rng.permutation(len(self.corpus))
        for s in range(0, len(order), self.batch_size):
            idx = np.sort(order[s: s + self.batch_size])
            batch = self.corpus.rows(idx)
            width = int(batch.lengths.max())
            batch = TokenBatch(batch.ids[:, :width], batch.pad_mask[:, :width])
            encoder, noise = source_fn(rng) if source_fn is not None else (self.encoder, None)
            if noise is None or noise.mechanism in ("none", "nopeek"):
                x = self.clean(encoder)[idx, :width]
            else:
                x = encoder.encode(batch, noise, rng)
            yield batch, x


def token_loss(logits, batch: TokenBatch):
    return ops.cross_entropy_hard(logits, batch.ids, batch.pad_mask.astype(np.float64))


def train_gru_weights(weights: dict, names: list[str], data: EncodedCorpus, epochs: int, lr: float,
                      seed, forward, source_fn=None, clip: float = 5.0) -> tuple[dict, list[float]]:
    """Generic AdamW loop: ``forward(w, x, rng, pad_mask)`` returns logits; only ``names`` are updated."""
    rng = np.random.default_rng(seed)
    opt = AdamW(lr=lr, weight_decay=0.0)
    epoch_losses = []
    for ep in range(epochs):
        total, count = 0.0, 0
        for batch, x in data.epoch(rng, source_fn):
            g = Graph()
            leaves = {n: g.leaf(weights[n]) for n in names}
            w = {**weights, **leaves}
            loss = token_loss(forward(w, x, rng, batch.pad_mask), batch)
            grads = clip_by_global_norm(backward(loss, leaves), clip)
            weights.update(opt.step({n: weights[n] for n in names}, grads))
            n_tok = int(batch.pad_mask.sum())
            total += loss.item() * n_tok
            count += n_tok
        epoch_losses.append(total / count)
        log.info("epoch %d loss %.4f", ep, epoch_losses[-1])
    return weights, epoch_losses


class SIPInverter(BaseEstimator):
    """GRU inverter trained with a frozen encoder: minimises CE(d(e(b)), b).

    ``noise`` other than "none" gives noise-aware training, where the encoder
    output is perturbed exactly as the defense would perturb it.
    """

    def __init__(self, encoder: BottomEncoder | None = None, noise: NoiseSpec | None = None,
                 hidden: int = GRU_HIDDEN, dropout: float = GRU_DROPOUT, epochs: int = SIP_EPOCHS,
                 lr: float = SIP_LR, batch_size: int = SIP_BATCH, seed: int = 0,
                 layer: str = "smashed_btm"):
        self.encoder = encoder
        self.noise = noise
        self.hidden = hidden
        self.dropout = dropout
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.layer = layer

    @property
    def provenance(self) -> str:
        return self.encoder.provenance

    def fit(self, X: TokenBatch, y=None, data: EncodedCorpus | None = None):
        if self.encoder is None:
            raise ContractError("SIPInverter needs an encoder")
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        X = check_token_batch(X, vocab_size=self.encoder.config.vocab_size, min_tokens=0)
        data = data or EncodedCorpus(X, self.encoder, self.batch_size)
        rng = np.random.default_rng(self.seed)
        init_seed, train_seed = rng.integers(0, 2**63, size=2)
        w = init_gru_inverter(self.encoder.hidden, self.encoder.config.vocab_size, self.hidden, init_seed)
        noise = self.noise or NoiseSpec()
        enc = self.encoder

        def source_fn(r):
            return enc, noise

        def forward(weights, x, r, mask):
            return gru_invert(weights, x, train_mode=True, dropout=self.dropout, rng=r)

        self.weights_, self.loss_curve_ = train_gru_weights(w, list(w), data, self.epochs, self.lr,
                                                            train_seed, forward, source_fn)
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise ContractError("inverter is not fitted")

    def predict_logits(self, X) -> np.ndarray:
        self._check_fitted()
        x, _ = smashed_of(X, self.layer)
        x = check_hidden(x, self.encoder.hidden, "smashed data")
        return gru_invert(self.weights_, x).data

    def predict(self, X) -> np.ndarray:
        logits = self.predict_logits(X)
        _, mask = smashed_of(X, self.layer)
        return mask_tokens(logits.argmax(-1), mask)

    def transform(self, X) -> np.ndarray:
        return self.predict_logits(X)


def train_sip(aux_corpus: TokenBatch, bottom: BottomEncoder, noise: NoiseSpec | None = None,
              epochs: int = SIP_EPOCHS, seed: int = 0, **kw) -> SIPInverter:
    return SIPInverter(bottom, noise, epochs=epochs, seed=seed, **kw).fit(aux_corpus)


def sip_attack(inv, transcript: Transcript) -> tuple[np.ndarray, np.ndarray]:
    """Pure inference: (logits B×S×V, argmax tokens with pads masked)."""
    logits = inv.predict_logits(transcript)
    return logits, mask_tokens(logits.argmax(-1), transcript.pad_mask)


def train_ae_baseline(aux_corpus: TokenBatch, config: ModelConfig, spec: SplitSpec,
                      epochs: int = SIP_EPOCHS, seed: int = 0, **kw) -> SIPInverter:
    """SIP with a freshly random, never-pretrained Bottom-shaped encoder."""
    enc_seed = int(np.random.default_rng([seed, 7]).integers(2**31))
    inv = SIPInverter(random_encoder(config, spec, seed=enc_seed), None, epochs=epochs, seed=seed, **kw)
    inv.fit(aux_corpus)
    inv.encoder_seed_ = enc_seed
    return inv
