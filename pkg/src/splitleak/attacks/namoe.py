"""Noise-adaptive mixture of GRU experts sharing one output projection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .._validation import ContractError, check_hidden, check_token_batch
from ..autodiff import as_tensor, ops
from ..defenses import NoiseSpec
from ..minilm.gru import GRU_DROPOUT, GRU_HIDDEN, gru_hidden_sequence, init_gru_core, init_projection, project
from .inverters import SIP_BATCH, SIP_EPOCHS, SIP_LR, EncodedCorpus, mask_tokens, smashed_of, train_gru_weights
from .replica import BottomEncoder

GATE_EPOCHS = 10
GATE_HIDDEN = 64
NOPEEK_POOL = 5
# dxp scales of the paper's expert roster; rescaled to the desk range by ``dxp_roster``
DXP_ROSTER = (math.inf, 0.08, 0.38, 0.21)
# stage-2 draws jitter each expert's scale by a log-uniform factor in [1/e^j, e^j]
SCALE_JITTER = 0.5


def dxp_roster(low: float, high: float) -> list[NoiseSpec]:
    """Map the finite roster values affinely in log space onto [low, high]."""
    finite = [v for v in DXP_ROSTER if math.isfinite(v)]
    lo, hi = math.log(min(finite)), math.log(max(finite))
    specs = []
    for v in DXP_ROSTER:
        if not math.isfinite(v):
            specs.append(NoiseSpec())
        else:
            t = (math.log(v) - lo) / (hi - lo)
            specs.append(NoiseSpec.dxp(math.exp(math.log(low) + t * (math.log(high) - math.log(low)))))
    return specs


def _prefix(k: int) -> str:
    return f"expert{k}."


def _init_gate(hidden: int, n_experts: int, seed) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    return {"gate.w1": rng.normal(0, 1 / math.sqrt(hidden), (hidden, GATE_HIDDEN)),
            "gate.b1": np.zeros(GATE_HIDDEN),
            "gate.w2": rng.normal(0, 1 / math.sqrt(GATE_HIDDEN), (GATE_HIDDEN, n_experts)),
            "gate.b2": np.zeros(n_experts)}


def gate_weights(weights, x, pad_mask) -> "ops.Tensor":
    """Softmax gate over experts from the mean-pooled (non-pad) smashed data; B×E."""
    x = as_tensor(x)
    m = pad_mask.astype(np.float64)
    pooled_w = m / np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    pooled = ops.sum(ops.mul(x, np.broadcast_to(pooled_w[..., None], x.shape)), axis=1)
    h = ops.tanh(ops.add(ops.matmul(pooled, as_tensor(weights["gate.w1"])), as_tensor(weights["gate.b1"])))
    return ops.softmax(ops.add(ops.matmul(h, as_tensor(weights["gate.w2"])), as_tensor(weights["gate.b2"])))


def mixture_logits(weights, x, pad_mask, n_experts: int, gate=None, train_mode: bool = False,
                   dropout: float = GRU_DROPOUT, rng=None):
    """Gate-weighted sum of expert hidden sequences through the shared projection."""
    gate = gate_weights(weights, x, pad_mask) if gate is None else as_tensor(gate)
    hs = ops.stack([gru_hidden_sequence(weights, x, _prefix(k)) for k in range(n_experts)], axis=-1)
    # B×S×h×E → S×h×B×E so the B×E gate broadcasts as a trailing suffix
    mixed = ops.sum(ops.mul(ops.transpose(hs, (1, 2, 0, 3)), gate), axis=-1)
    mixed = ops.transpose(mixed, (2, 0, 1))
    return project(weights, mixed, dropout=dropout if train_mode else 0.0, rng=rng)


@dataclass
class NoiseDraw:
    """Per-batch source of (encoder, noise) for a single fixed spec or for random stage-2 draws."""

    encoder: BottomEncoder
    specs: Sequence[NoiseSpec]
    pool: Sequence[BottomEncoder] = ()
    jitter: float = 0.0

    def __call__(self, rng: np.random.Generator):
        spec = self.specs[int(rng.integers(len(self.specs)))]
        if spec.mechanism == "nopeek":
            if not self.pool:
                raise ContractError("a NoPeek expert needs a pool of pre-fine-tuned bottoms")
            return self.pool[int(rng.integers(len(self.pool)))], spec
        if spec.mechanism != "none" and self.jitter > 0:
            factor = math.exp(rng.uniform(-self.jitter, self.jitter))
            spec = _rescaled(spec, factor)
        return self.encoder, spec


def _rescaled(spec: NoiseSpec, factor: float) -> NoiseSpec:
    if spec.mechanism == "dxp":
        return NoiseSpec.dxp(spec.eps_prime * factor, spec.seed)
    if spec.mechanism == "laplace_dp":
        return NoiseSpec.laplace(spec.eps_star * factor, spec.clip, spec.seed)
    return spec


class NaMoEInverter(BaseEstimator):
    """Mixture of noise-specialised GRU experts with a learned softmax gate.

    Stage 1 trains expert k on smashed data perturbed by ``expert_specs[k]``.
    Expert 0 also trains the shared output projection; later experts train
    their recurrent core against that frozen projection so all hidden spaces
    feed the same output layer. Stage 2 freezes the experts and trains the
    gate plus the projection on randomly drawn noise per batch.
    """

    def __init__(self, encoder: BottomEncoder | None = None, expert_specs: Sequence[NoiseSpec] = (),
                 nopeek_pool: Sequence[BottomEncoder] = (), hidden: int = GRU_HIDDEN,
                 dropout: float = GRU_DROPOUT, epochs_experts: int = SIP_EPOCHS,
                 epochs_gate: int = GATE_EPOCHS, lr: float = SIP_LR, batch_size: int = SIP_BATCH,
                 seed: int = 0, layer: str = "smashed_btm"):
        self.encoder = encoder
        self.expert_specs = expert_specs
        self.nopeek_pool = nopeek_pool
        self.hidden = hidden
        self.dropout = dropout
        self.epochs_experts = epochs_experts
        self.epochs_gate = epochs_gate
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.layer = layer

    @property
    def n_experts(self) -> int:
        return len(self.expert_specs)

    def fit(self, X, y=None, data: EncodedCorpus | None = None, expert0: dict | None = None):
        """``expert0`` optionally supplies already trained noise-free SIP weights for expert 0."""
        if self.encoder is None:
            raise ContractError("NaMoEInverter needs an encoder")
        if self.n_experts < 2:
            raise ContractError(f"NaMoE needs at least 2 experts, got {self.n_experts}")
        if min(self.epochs_experts, self.epochs_gate) < 1:
            raise ContractError("epochs must be >= 1")
        X = check_token_batch(X, vocab_size=self.encoder.config.vocab_size, min_tokens=0)
        data = data or EncodedCorpus(X, self.encoder, self.batch_size)
        seeds = np.random.default_rng(self.seed).integers(0, 2**63, size=2 * self.n_experts + 3)
        H, V = self.encoder.hidden, self.encoder.config.vocab_size
        weights = dict(init_projection(self.hidden, V, seeds[0]))
        self.expert_losses_ = []

        for k, spec in enumerate(self.expert_specs):
            p = _prefix(k)
            core = init_gru_core(H, self.hidden, seeds[1 + 2 * k], p)
            if k == 0 and expert0 is not None:
                weights.update({"w_out": expert0["w_out"], "b_out": expert0["b_out"]})
                weights.update({p + n: v for n, v in expert0.items() if n not in ("w_out", "b_out")})
                self.expert_losses_.append([])
                continue
            weights.update(core)
            names = list(core) + (["w_out", "b_out"] if k == 0 else [])

            def forward(w, x, r, mask, p=p):
                return project(w, gru_hidden_sequence(w, x, p), dropout=self.dropout, rng=r)

            source = NoiseDraw(self.encoder, [spec], self.nopeek_pool)
            weights, curve = train_gru_weights(weights, names, data, self.epochs_experts, self.lr,
                                               seeds[2 + 2 * k], forward, source)
            self.expert_losses_.append(curve)

        weights.update(_init_gate(H, self.n_experts, seeds[-2]))
        gate_names = [n for n in weights if n.startswith("gate.")] + ["w_out", "b_out"]
        E = self.n_experts

        def forward_gate(w, x, r, mask):
            return mixture_logits(w, x, mask, E, train_mode=True, dropout=self.dropout, rng=r)

        source = NoiseDraw(self.encoder, list(self.expert_specs), self.nopeek_pool, SCALE_JITTER)
        weights, self.gate_losses_ = train_gru_weights(weights, gate_names, data, self.epochs_gate,
                                                       self.lr, seeds[-1], forward_gate, source)
        self.weights_ = weights
        return self

    def _check_fitted(self):
        if not hasattr(self, "weights_"):
            raise ContractError("NaMoE inverter is not fitted")

    def gate(self, X) -> np.ndarray:
        self._check_fitted()
        x, mask = smashed_of(X, self.layer)
        return gate_weights(self.weights_, check_hidden(x, self.encoder.hidden, "smashed data"), mask).data

    def predict_logits(self, X, gate=None) -> np.ndarray:
        self._check_fitted()
        x, mask = smashed_of(X, self.layer)
        x = check_hidden(x, self.encoder.hidden, "smashed data")
        return mixture_logits(self.weights_, x, mask, self.n_experts, gate=gate).data

    def predict(self, X) -> np.ndarray:
        _, mask = smashed_of(X, self.layer)
        return mask_tokens(self.predict_logits(X).argmax(-1), mask)

    def expert_logits(self, X, k: int) -> np.ndarray:
        self._check_fitted()
        x, _ = smashed_of(X, self.layer)
        return project(self.weights_, gru_hidden_sequence(self.weights_, x, _prefix(k))).data


def train_namoe(aux_corpus, bottom: BottomEncoder, expert_specs: Sequence[NoiseSpec],
                epochs_experts: int = SIP_EPOCHS, epochs_gate: int = GATE_EPOCHS, seed: int = 0,
                nopeek_pool: Sequence[BottomEncoder] = (), **kw) -> NaMoEInverter:
    return NaMoEInverter(bottom, list(expert_specs), list(nopeek_pool), epochs_experts=epochs_experts,
                         epochs_gate=epochs_gate, seed=seed, **kw).fit(aux_corpus)


def namoe_attack(moe: NaMoEInverter, transcript) -> tuple[np.ndarray, np.ndarray]:
    logits = moe.predict_logits(transcript)
    _, mask = smashed_of(transcript, moe.layer)
    return logits, mask_tokens(logits.argmax(-1), mask)
