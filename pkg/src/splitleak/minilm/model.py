"""MiniLM: a pre-norm decoder-only transformer with RMS-norm and SiLU-gated MLPs.

Parameters live in :class:`ModelParams`, an immutable name → array mapping.
Every forward function also accepts any mapping of name → Tensor so the same
code runs recorded (training, attacks) or unrecorded (inference).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, Mapping

import numpy as np

from ..autodiff import Tensor, as_tensor, ops
from .tokenizer import BYTE_VOCAB, TokenBatch

ATTN_MATRICES = ("wq", "wk", "wv", "wo")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = BYTE_VOCAB
    hidden: int = 64
    blocks: int = 8
    heads: int = 4
    ffn_dim: int = 128
    max_seq: int = 64
    norm_eps: float = 1e-6
    # False only for toy models whose ids are not bytes (attack oracles)
    byte_vocab: bool = True

    def __post_init__(self):
        if self.vocab_size < (BYTE_VOCAB if self.byte_vocab else 2):
            raise ConfigError(f"vocab_size must be at least {BYTE_VOCAB}, got {self.vocab_size}")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.blocks < 3:
            raise ConfigError(f"need at least 3 blocks for a three-way split, got {self.blocks}")
        if min(self.hidden, self.ffn_dim, self.max_seq) < 1 or self.norm_eps <= 0:
            raise ConfigError("hidden, ffn_dim, max_seq and norm_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def block_prefix(i: int) -> str:
    return f"blocks.{i}."


def lora_names(name: str) -> tuple[str, str]:
    return name + ".lora_a", name + ".lora_b"


@dataclass(frozen=True)
class ModelParams(Mapping):
    """Immutable snapshot of named float64 weights plus the config they follow."""

    config: ModelConfig
    weights: Mapping[str, np.ndarray] = field(repr=False)
    adapter_rank: int | None = None

    def __post_init__(self):
        frozen = {}
        for k, v in self.weights.items():
            arr = np.array(v, dtype=np.float64)
            arr.flags.writeable = False
            frozen[k] = arr
        object.__setattr__(self, "weights", frozen)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.weights)

    def __len__(self) -> int:
        return len(self.weights)

    def __hash__(self):
        return hash(self.checksum())

    def __eq__(self, other):
        return isinstance(other, ModelParams) and self.checksum() == other.checksum()

    @property
    def adapter_names(self) -> list[str]:
        return [k for k in self.weights if ".lora_" in k]

    def trainable_names(self) -> list[str]:
        """Adapters when attached, else every weight."""
        return self.adapter_names or list(self.weights)

    def with_weights(self, updates: Mapping[str, np.ndarray]) -> "ModelParams":
        unknown = set(updates) - set(self.weights)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        merged = dict(self.weights)
        merged.update(updates)
        return replace(self, weights=merged)

    def subset(self, names: Iterable[str]) -> dict[str, np.ndarray]:
        return {n: self.weights[n] for n in names}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.weights):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.weights[k]).tobytes())
        return h.hexdigest()


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, H, F, S = config.vocab_size, config.hidden, config.ffn_dim, config.max_seq
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, H), "pos": (S, H)}
    for i in range(config.blocks):
        p = block_prefix(i)
        shapes[p + "attn_norm"] = (H,)
        for m in ATTN_MATRICES:
            shapes[p + m] = (H, H)
        shapes[p + "mlp_norm"] = (H,)
        shapes[p + "w_gate"] = (H, F)
        shapes[p + "w_up"] = (H, F)
        shapes[p + "w_down"] = (F, H)
    shapes["final_norm"] = (H,)
    shapes["head"] = (H, V)
    return shapes


def build_model(config: ModelConfig, seed: int) -> ModelParams:
    """Normal(0, 0.02) weights and unit norm gains, fully determined by ``seed``."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model needs a ModelConfig")
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            weights[name] = np.ones(shape)
        else:
            weights[name] = rng.normal(0.0, 0.02, size=shape)
    return ModelParams(config, weights)


def attach_adapters(params: ModelParams, rank: int = 4, which: Iterable[str] = ATTN_MATRICES,
                    seed: int = 0, blocks: Iterable[int] | None = None) -> ModelParams:
    """Add low-rank pairs so each selected matrix acts as ``W + A·B``.

    ``A`` is drawn from N(0, 1/d) and ``B`` starts at zero, so attaching does
    not change the model's outputs.
    """
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    cfg = params.config
    which = tuple(which)
    for m in which:
        if m not in ATTN_MATRICES and m not in ("w_gate", "w_up", "w_down"):
            raise KeyError(f"unknown adapter target '{m}'")
    rng = np.random.default_rng(seed)
    new = dict(params.weights)
    for i in (range(cfg.blocks) if blocks is None else blocks):
        for m in which:
            name = block_prefix(i) + m
            if name not in new:
                raise KeyError(f"unknown parameter '{name}'")
            d_in, d_out = new[name].shape
            a, b = lora_names(name)
            new[a] = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, rank))
            new[b] = np.zeros((rank, d_out))
    return ModelParams(cfg, new, adapter_rank=rank)


def adapter_l2_norm(params: Mapping[str, np.ndarray]) -> float:
    """L2 norm over the concatenation of every adapter tensor."""
    names = [k for k in params if ".lora_" in k]
    return float(math.sqrt(sum(float((np.asarray(params[k]) ** 2).sum()) for k in names)))


# --------------------------------------------------------------------- forward

def _w(weights: Mapping, name: str) -> Tensor:
    return as_tensor(weights[name])


def _linear(weights: Mapping, name: str, x: Tensor) -> Tensor:
    y = ops.matmul(x, _w(weights, name))
    a, b = lora_names(name)
    if a in weights:
        y = ops.add(y, ops.matmul(ops.matmul(x, _w(weights, a)), _w(weights, b)))
    return y


def embed_tokens(weights: Mapping, ids) -> Tensor:
    """Token-embedding lookup only (B×S×H), before positions are added."""
    return ops.embedding(_w(weights, "embed"), np.asarray(ids))


def add_positions(weights: Mapping, e) -> Tensor:
    e = as_tensor(e)
    S = e.shape[1]
    pos = ops.narrow(_w(weights, "pos"), 0, 0, S)
    return ops.add(e, pos)


def block_forward(weights: Mapping, i: int, h: Tensor, config: ModelConfig, pad_mask=None) -> Tensor:
    p = block_prefix(i)
    B, S, H = h.shape
    nh, dh = config.heads, config.head_dim
    x = ops.rms_norm(h, _w(weights, p + "attn_norm"), config.norm_eps)

    def heads(t):
        return ops.transpose(ops.reshape(t, (B, S, nh, dh)), (0, 2, 1, 3))

    q = heads(_linear(weights, p + "wq", x))
    k = heads(_linear(weights, p + "wk", x))
    v = heads(_linear(weights, p + "wv", x))
    attn = ops.softmax(ops.causal_scores(q, k, 1.0 / math.sqrt(dh), pad_mask))
    ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, S, H))
    h = ops.add(h, _linear(weights, p + "wo", ctx))

    x = ops.rms_norm(h, _w(weights, p + "mlp_norm"), config.norm_eps)
    gate = ops.silu(_linear(weights, p + "w_gate", x))
    up = _linear(weights, p + "w_up", x)
    return ops.add(h, _linear(weights, p + "w_down", ops.mul(gate, up)))


def run_blocks(weights: Mapping, h, start: int, stop: int, config: ModelConfig, pad_mask=None) -> Tensor:
    h = as_tensor(h)
    for i in range(start, stop):
        h = block_forward(weights, i, h, config, pad_mask)
    return h


def apply_head(weights: Mapping, h, config: ModelConfig) -> Tensor:
    x = ops.rms_norm(as_tensor(h), _w(weights, "final_norm"), config.norm_eps)
    return ops.matmul(x, _w(weights, "head"))


@dataclass(frozen=True)
class SegmentRange:
    """Blocks ``[start, stop)``, optionally preceded by the embedding and followed by the head."""

    start: int
    stop: int
    embed: bool = False
    head: bool = False

    def validate(self, config: ModelConfig):
        if not 0 <= self.start <= self.stop <= config.blocks:
            raise ValueError(f"block range [{self.start}, {self.stop}) invalid for {config.blocks} blocks")
        if self.embed and self.start != 0:
            raise ValueError("a range including the embedding must start at block 0")
        if self.head and self.stop != config.blocks:
            raise ValueError("a range including the head must end at the last block")


def forward_segment(weights: Mapping, config: ModelConfig, rng: SegmentRange, x, pad_mask=None) -> Tensor:
    """Run part of the model.

    ``x`` is a TokenBatch / id array when ``rng.embed`` is set and B×S×H hidden
    states otherwise. Returns hidden states, or logits (B×S×V) when the head is
    included.
    """
    rng.validate(config)
    if rng.embed:
        if isinstance(x, TokenBatch):
            pad_mask = x.pad_mask if pad_mask is None else pad_mask
            ids = x.ids
        else:
            ids = np.asarray(x)
        if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
            raise ValueError(f"segment starting at the embedding needs B×S integer ids, got {ids.shape} {ids.dtype}")
        if ids.shape[1] > config.max_seq:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq {config.max_seq}")
        h = add_positions(weights, embed_tokens(weights, ids))
    else:
        h = as_tensor(x)
        if h.ndim != 3 or h.shape[-1] != config.hidden:
            raise ValueError(f"segment input must be B×S×{config.hidden} hidden states, got {h.shape}")
    h = run_blocks(weights, h, rng.start, rng.stop, config, pad_mask)
    return apply_head(weights, h, config) if rng.head else h


def full_forward(params: ModelParams, batch: TokenBatch, weights: Mapping | None = None) -> Tensor:
    cfg = params.config
    return forward_segment(weights if weights is not None else params, cfg,
                           SegmentRange(0, cfg.blocks, True, True), batch)


def lm_loss(logits, batch: TokenBatch) -> Tensor:
    """Teacher-forcing loss: position t predicts token t+1, non-pad targets only."""
    logits = as_tensor(logits)
    B, S = batch.shape
    if logits.shape[:2] != (B, S):
        raise ValueError(f"logits {logits.shape} do not match batch {batch.shape}")
    weights = batch.pad_mask[:, 1:].astype(np.float64)
    if weights.sum() == 0:
        raise ValueError("lm_loss: every target position is padding")
    pred = ops.narrow(logits, 1, 0, S - 1)
    return ops.cross_entropy_hard(pred, batch.ids[:, 1:], weights)


def perplexity(params: ModelParams, batches: Iterable[TokenBatch]) -> float:
    """exp of the token-weighted mean teacher-forcing loss over all batches."""
    total, count = 0.0, 0
    for batch in batches:
        n = int(batch.pad_mask[:, 1:].sum())
        if n == 0:
            continue
        total += lm_loss(full_forward(params, batch), batch).item() * n
        count += n
    if count == 0:
        raise ValueError("perplexity needs a non-empty corpus")
    return math.exp(total / count)
