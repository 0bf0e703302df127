"""Single-layer unidirectional GRU decoder mapping hidden states to vocabulary logits."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..autodiff import Tensor, as_tensor, ops

GRU_HIDDEN = 256
GRU_DROPOUT = 0.1

_CORE = ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn", "b_r", "b_z", "b_in", "b_hn")


def init_gru_core(input_dim: int, hidden: int = GRU_HIDDEN, seed=0, prefix: str = "") -> dict[str, np.ndarray]:
    """Uniform(±1/√hidden) weights, the usual recurrent-layer initialisation."""
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden)
    shapes = {
        "w_ir": (input_dim, hidden), "w_iz": (input_dim, hidden), "w_in": (input_dim, hidden),
        "w_hr": (hidden, hidden), "w_hz": (hidden, hidden), "w_hn": (hidden, hidden),
        "b_r": (hidden,), "b_z": (hidden,), "b_in": (hidden,), "b_hn": (hidden,),
    }
    return {prefix + n: rng.uniform(-k, k, size=s) for n, s in shapes.items()}


def init_projection(hidden: int, vocab: int, seed=0, prefix: str = "") -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden)
    return {prefix + "w_out": rng.uniform(-k, k, size=(hidden, vocab)),
            prefix + "b_out": rng.uniform(-k, k, size=(vocab,))}


def init_gru_inverter(input_dim: int, vocab: int, hidden: int = GRU_HIDDEN, seed=0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    core_seed, proj_seed = rng.integers(0, 2**63, size=2)
    return {**init_gru_core(input_dim, hidden, core_seed), **init_projection(hidden, vocab, proj_seed)}


def gru_hidden_sequence(weights: Mapping, x, prefix: str = "") -> Tensor:
    """Run the recurrence left to right from a zero state; returns B×S×hidden."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ValueError(f"GRU input must be B×S×H, got {x.shape}")
    w = {n: as_tensor(weights[prefix + n]) for n in _CORE}
    if x.shape[-1] != w["w_ir"].shape[0]:
        raise ValueError(f"GRU expects input width {w['w_ir'].shape[0]}, got {x.shape[-1]}")
    B, S, _ = x.shape
    hid = w["w_hr"].shape[0]
    # input projections for every position at once
    xr = ops.add(ops.matmul(x, w["w_ir"]), w["b_r"])
    xz = ops.add(ops.matmul(x, w["w_iz"]), w["b_z"])
    xn = ops.add(ops.matmul(x, w["w_in"]), w["b_in"])
    h = Tensor(np.zeros((B, hid)))
    outs = []
    for t in range(S):
        r = ops.sigmoid(ops.add(ops.select(xr, 1, t), ops.matmul(h, w["w_hr"])))
        z = ops.sigmoid(ops.add(ops.select(xz, 1, t), ops.matmul(h, w["w_hz"])))
        hn = ops.add(ops.matmul(h, w["w_hn"]), w["b_hn"])
        n = ops.tanh(ops.add(ops.select(xn, 1, t), ops.mul(r, hn)))
        # h' = (1 - z)·n + z·h
        h = ops.add(n, ops.mul(z, ops.sub(h, n)))
        outs.append(h)
    return ops.stack(outs, axis=1)


def project(weights: Mapping, hidden_seq, prefix: str = "", dropout: float = 0.0,
            rng: np.random.Generator | None = None) -> Tensor:
    """Optional inverted dropout, then the shared linear map to vocabulary logits."""
    hs = as_tensor(hidden_seq)
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout in train mode needs a seeded generator")
        keep = (rng.random(hs.shape) >= dropout) / (1.0 - dropout)
        hs = ops.mul(hs, keep)
    return ops.add(ops.matmul(hs, as_tensor(weights[prefix + "w_out"])), as_tensor(weights[prefix + "b_out"]))


def gru_invert(weights: Mapping, smashed, train_mode: bool = False, dropout: float = GRU_DROPOUT,
               rng: np.random.Generator | None = None) -> Tensor:
    """Logits B×S×V for smashed data B×S×H; dropout only when ``train_mode``."""
    hs = gru_hidden_sequence(weights, smashed)
    return project(weights, hs, dropout=dropout if train_mode else 0.0, rng=rng)
