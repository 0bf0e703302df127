"""Optimisation-based enhancement: gradient matching (backward) and smashed-data matching (forward)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .._validation import ContractError, check_probability_rows
from ..autodiff import Graph, Tensor, backward, jvp, ops
from ..defenses import nearest_rows
from ..minilm.tokenizer import BOS, PAD
from ..optim import AdamW
from ..splitsim.transcript import Transcript
from .replica import ReplicaSegments

STOP_TOL = 1e-12
# random starts are near-uniform label distributions
RANDOM_INIT_STD = 0.01


@dataclass(frozen=True)
class AttackHyperparams:
    gm_epochs: int = 18
    gm_lr: float = 0.09
    gm_beta: float = 0.85
    gm_tau: float = 1.2
    sm_epochs: int = 800
    sm_lr: float = 0.005
    sm_weight_decay: float = 0.02
    sm_objective: str = "cosine"

    def __post_init__(self):
        if not 0.0 <= self.gm_beta <= 1.0:
            raise ContractError(f"gm_beta must lie in [0, 1], got {self.gm_beta}")
        if not self.gm_tau > 0:
            raise ContractError(f"gm_tau must be positive, got {self.gm_tau}")
        if min(self.gm_epochs, self.sm_epochs) < 1:
            raise ContractError("epoch counts must be >= 1")
        if self.sm_objective not in ("cosine", "l2"):
            raise ContractError(f"sm_objective must be 'cosine' or 'l2', got '{self.sm_objective}'")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class MatchResult:
    """Best iterate of a matching run plus its loss trace."""

    tokens: np.ndarray
    iterate: np.ndarray
    losses: list[float] = field(default_factory=list)

    @property
    def best_losses(self) -> list[float]:
        return list(np.minimum.accumulate(self.losses)) if self.losses else []


def nearest_embedding_decode(e, embedding_table) -> np.ndarray:
    """Per position, id of the L2-nearest table row (lowest id on ties)."""
    e = np.asarray(e, dtype=np.float64)
    return nearest_rows(e, np.asarray(embedding_table, dtype=np.float64))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


# ------------------------------------------------------------ gradient matching

def _target_weights(pad_mask: np.ndarray) -> np.ndarray:
    w = pad_mask[:, 1:].astype(np.float64)
    if w.sum() == 0:
        raise ContractError("every label position is padding")
    return w / w.sum()


def _label_graph(top: ReplicaSegments, trunk_out, pad_mask):
    g = Graph()
    x = g.leaf(trunk_out)
    logits = top.top_logits(x, pad_mask)
    S = logits.shape[1]
    lp = ops.log_softmax(ops.narrow(logits, 1, 0, S - 1))
    return x, lp


def dummy_gradient(top: ReplicaSegments, trunk_out, y_prime, pad_mask) -> np.ndarray:
    """g(y′): gradient at the trunk output of the soft-label teacher-forcing loss."""
    x, lp = _label_graph(top, trunk_out, pad_mask)
    wn = _target_weights(pad_mask)[..., None]
    loss = ops.sum(ops.mul(lp, -wn * np.asarray(y_prime)))
    return backward(loss, x)


def label_gradient(top: ReplicaSegments, trunk_out, y_prime, real_grad, beta: float,
                   pad_mask=None) -> tuple[float, np.ndarray]:
    """(L(y′), ∇_{y′} L) for L = β‖g(y′) − g*‖₂ + (1 − β)‖g(y′) − g*‖₁.

    The soft-label loss is linear in y′, so g(y′) = G·y′ and ∇ = Gᵀv with
    v = ∂L/∂g. Gᵀv is one forward-mode pass of the per-position
    log-probabilities along v, scaled by the position weights.
    """
    trunk_out = np.asarray(trunk_out, dtype=np.float64)
    y_prime = check_probability_rows(y_prime)
    real_grad = np.asarray(real_grad, dtype=np.float64)
    B, S, _ = trunk_out.shape
    if pad_mask is None:
        pad_mask = np.ones((B, S), dtype=bool)
    if y_prime.shape[:2] != (B, S - 1):
        raise ContractError(f"y_prime must be {B}×{S - 1}×V, got {y_prime.shape}")
    if real_grad.shape != trunk_out.shape:
        raise ContractError(f"real gradient {real_grad.shape} does not match trunk output {trunk_out.shape}")
    x, lp = _label_graph(top, trunk_out, pad_mask)
    wn = _target_weights(pad_mask)[..., None]
    g = backward(ops.sum(ops.mul(lp, -wn * y_prime)), x)
    diff = g - real_grad
    l2 = float(np.sqrt((diff * diff).sum()))
    loss = beta * l2 + (1.0 - beta) * float(np.abs(diff).sum())
    v = (1.0 - beta) * np.sign(diff)
    if l2 > 0:
        v = v + beta * diff / l2
    tangent = jvp(lp, [(x, v)])
    return loss, -wn * tangent


def _recover_first(init_tokens, B: int) -> np.ndarray:
    if init_tokens is None:
        return np.full(B, BOS, dtype=np.int64)
    return np.asarray(init_tokens, dtype=np.int64)[:, 0]


def gradient_matching(transcript: Transcript, top: ReplicaSegments, init_logits="random",
                      hp: AttackHyperparams | None = None, init_tokens=None, seed: int = 0,
                      tol: float = STOP_TOL) -> MatchResult:
    """Optimise dummy labels y′ = softmax(z′) so their gradient matches the observed one.

    ``init_logits`` is B×(S−1)×V (z′ starts at init_logits/τ) or "random" for a
    seeded Gaussian start. The returned tokens are aligned with the input:
    position u+1 is argmax y′[u] and position 0 comes from ``init_tokens``
    (BOS when absent).
    """
    hp = hp or AttackHyperparams()
    if transcript.grad_trunk_out is None or transcript.trunk_out is None:
        raise ContractError("gradient matching needs trunk_out and grad_trunk_out in the transcript")
    x, g_star, mask = transcript.trunk_out, transcript.grad_trunk_out, transcript.pad_mask
    B, S, _ = x.shape
    V = top.config.vocab_size
    if isinstance(init_logits, str):
        if init_logits != "random":
            raise ContractError(f"init_logits must be an array or 'random', got '{init_logits}'")
        z = RANDOM_INIT_STD * np.random.default_rng(seed).standard_normal((B, S - 1, V))
    else:
        z = np.asarray(init_logits, dtype=np.float64)
        if z.shape != (B, S - 1, V):
            raise ContractError(f"init_logits must be {B}×{S - 1}×{V}, got {z.shape}")
        z = z / hp.gm_tau

    opt = AdamW(lr=hp.gm_lr, weight_decay=0.0)
    losses: list[float] = []
    best_z, best = z, math.inf
    for _ in range(hp.gm_epochs):
        y = _softmax(z)
        loss, gy = label_gradient(top, x, y, g_star, hp.gm_beta, mask)
        if not math.isfinite(loss):
            break
        losses.append(loss)
        if loss < best:
            best, best_z = loss, z
        if loss <= tol:
            break
        gz = y * (gy - (y * gy).sum(axis=-1, keepdims=True))
        z = opt.step({"z": z}, {"z": gz})["z"]
    else:
        # score the final iterate too
        loss, _ = label_gradient(top, x, _softmax(z), g_star, hp.gm_beta, mask)
        if math.isfinite(loss):
            losses.append(loss)
            if loss < best:
                best, best_z = loss, z

    tokens = np.empty((B, S), dtype=np.int64)
    tokens[:, 0] = _recover_first(init_tokens, B)
    tokens[:, 1:] = best_z.argmax(-1)
    return MatchResult(np.where(mask, tokens, PAD), _softmax(best_z), losses)


# ------------------------------------------------------- smashed-data matching

def _sm_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, objective: str) -> Tensor:
    B = target.shape[0]
    m = np.broadcast_to(mask[..., None], target.shape).astype(np.float64)
    p = ops.reshape(ops.mul(pred, m), (B, int(np.prod(target.shape[1:]))))
    t = (target * m).reshape(B, -1)
    if objective == "cosine":
        return ops.sub(1.0, ops.mean(ops.cosine_similarity(p, t)))
    d = ops.sub(p, t)
    return ops.scale(ops.sum(ops.mul(d, d)), 1.0 / B)


def smashed_data_matching(target, bottom: ReplicaSegments, init_tokens, hp: AttackHyperparams | None = None,
                          embedding_table=None, pad_mask=None, weights: Mapping | None = None,
                          tol: float = STOP_TOL) -> MatchResult:
    """Optimise input embeddings e′ so the Bottom replica reproduces ``target``.

    e′ starts at emb(init_tokens); the best iterate is decoded by nearest
    embedding, with pad positions set to PAD.
    """
    hp = hp or AttackHyperparams()
    if isinstance(target, Transcript):
        pad_mask = target.pad_mask if pad_mask is None else pad_mask
        target = target.smashed_btm
    target = np.asarray(target, dtype=np.float64)
    init_tokens = np.asarray(init_tokens, dtype=np.int64)
    if init_tokens.shape != target.shape[:2]:
        raise ContractError(f"init_tokens {init_tokens.shape} do not match target {target.shape[:2]}")
    if pad_mask is None:
        pad_mask = np.ones(target.shape[:2], dtype=bool)
    table = bottom.embedding_table if embedding_table is None else np.asarray(embedding_table)
    safe = np.where(pad_mask, init_tokens, 0)
    e = table[np.clip(safe, 0, table.shape[0] - 1)]

    opt = AdamW(lr=hp.sm_lr, weight_decay=hp.sm_weight_decay)
    losses: list[float] = []
    best_e, best = e, math.inf
    for it in range(hp.sm_epochs + 1):
        g = Graph()
        leaf = g.leaf(e)
        pred = bottom.bottom_from_embeddings(weights or {}, leaf, pad_mask)
        loss = _sm_loss(pred, target, pad_mask, hp.sm_objective)
        val = loss.item()
        if not math.isfinite(val):
            break
        losses.append(val)
        if val < best:
            best, best_e = val, e
        if val <= tol or it == hp.sm_epochs:
            break
        e = opt.step({"e": e}, {"e": backward(loss, leaf)})["e"]

    tokens = nearest_embedding_decode(best_e, table)
    return MatchResult(np.where(pad_mask, tokens, PAD), best_e, losses)
