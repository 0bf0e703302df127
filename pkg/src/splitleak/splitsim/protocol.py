"""Private-label split learning: Bottom and Top on the client, Trunk on the server.

Each party records its own graph. The client's Bottom graph produces the
smashed data, the server's Trunk graph consumes it, and the client's Top graph
computes the loss. Gradients cross the cut the same way activations do, so the
values handed to the server are exactly what a curious server would log.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from ..autodiff import Graph, Tensor, backward, ops
from ..defenses import NoiseSpec, dp_laplace_perturb, dxp_perturb, nopeek_loss
from ..minilm.model import (
    ModelConfig,
    ModelParams,
    adapter_l2_norm,
    add_positions,
    apply_head,
    embed_tokens,
    lm_loss,
    run_blocks,
)
from ..minilm.tokenizer import TokenBatch
from ..minilm.training import BatchStream, epoch_batches, train_lm
from ..optim import AdamW
from .transcript import BatchMeta, Transcript, TranscriptRecord

log = logging.getLogger(__name__)

FT_LR = 1e-3


class SplitError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SplitSpec:
    """Bottom = embedding + blocks [0, b); Trunk = blocks [b, t); Top = blocks [t, L) + norm + head.

    ``trunk_end == L`` leaves a head-only Top.
    """

    bottom_end: int
    trunk_end: int

    def validate(self, config: ModelConfig) -> "SplitSpec":
        b, t = self.bottom_end, self.trunk_end
        if not 0 < b < t <= config.blocks:
            raise SplitError(f"split ({b}, {t}) invalid for {config.blocks} blocks; need 0 < b < t <= L")
        return self


def _owner(name: str, spec: SplitSpec) -> str:
    if name in ("embed", "pos"):
        return "bottom"
    if name in ("final_norm", "head"):
        return "top"
    i = int(name.split(".")[1])
    if i < spec.bottom_end:
        return "bottom"
    return "trunk" if i < spec.trunk_end else "top"


@dataclass(frozen=True)
class SplitSegments:
    config: ModelConfig
    spec: SplitSpec
    bottom: Mapping[str, np.ndarray]
    trunk: Mapping[str, np.ndarray]
    top: Mapping[str, np.ndarray]
    adapter_rank: int | None = None

    def part(self, name: str) -> Mapping[str, np.ndarray]:
        return {"bottom": self.bottom, "trunk": self.trunk, "top": self.top}[name]

    def merged(self) -> dict[str, np.ndarray]:
        return {**self.bottom, **self.trunk, **self.top}

    def reassemble(self) -> ModelParams:
        return ModelParams(self.config, self.merged(), adapter_rank=self.adapter_rank)

    def trainable(self, part: str) -> list[str]:
        names = list(self.part(part))
        adapters = [n for n in names if ".lora_" in n]
        if self.adapter_rank is not None:
            return adapters
        return names


def split(params: ModelParams, spec: SplitSpec) -> SplitSegments:
    spec.validate(params.config)
    parts: dict[str, dict] = {"bottom": {}, "trunk": {}, "top": {}}
    for name, arr in params.weights.items():
        parts[_owner(name, spec)][name] = arr
    return SplitSegments(params.config, spec, parts["bottom"], parts["trunk"], parts["top"],
                         params.adapter_rank)


# -------------------------------------------------------------- segment passes

def bottom_forward(weights: Mapping, config: ModelConfig, spec: SplitSpec, batch: TokenBatch,
                   noise: NoiseSpec, rng: np.random.Generator | None):
    """Client Bottom pass with any forward defense. Returns (smashed, clean token embeddings)."""
    e = embed_tokens(weights, batch.ids)
    clean = e.data
    if noise.mechanism == "dxp":
        table = getattr(weights["embed"], "data", weights["embed"])
        e = Tensor(dxp_perturb(clean, noise.eps_prime, table, rng))
    h = run_blocks(weights, add_positions(weights, e), 0, spec.bottom_end, config, batch.pad_mask)
    if noise.mechanism == "laplace_dp":
        h = dp_laplace_perturb(h, noise.eps_star, noise.clip, rng)
    return h, clean


def trunk_forward(weights: Mapping, config: ModelConfig, spec: SplitSpec, x, pad_mask,
                  deeper_layer: int | None = None):
    """Server Trunk pass; also returns the hidden state after block ``deeper_layer`` if asked."""
    if deeper_layer is None:
        return run_blocks(weights, x, spec.bottom_end, spec.trunk_end, config, pad_mask), None
    if not spec.bottom_end < deeper_layer <= spec.trunk_end:
        raise SplitError(f"deeper layer {deeper_layer} must lie in ({spec.bottom_end}, {spec.trunk_end}]")
    mid = run_blocks(weights, x, spec.bottom_end, deeper_layer, config, pad_mask)
    return run_blocks(weights, mid, deeper_layer, spec.trunk_end, config, pad_mask), mid


def top_forward(weights: Mapping, config: ModelConfig, spec: SplitSpec, y, pad_mask) -> Tensor:
    h = run_blocks(weights, y, spec.trunk_end, config.blocks, config, pad_mask)
    return apply_head(weights, h, config)


def _leaves(graph: Graph, weights: Mapping, names: Iterable[str]):
    leaves = {n: graph.leaf(weights[n]) for n in names}
    return {**weights, **leaves}, leaves


@dataclass
class Exchange:
    loss: float
    task_loss: float
    grads: dict[str, dict[str, np.ndarray]]
    transcript: Transcript


def protocol_exchange(seg: SplitSegments, batch: TokenBatch, noise: NoiseSpec,
                      rng: np.random.Generator | None, step: int = 0, batch_index: int = 0,
                      deeper_layer: int | None = None) -> Exchange:
    """One forward/backward round trip of the protocol, without updating weights."""
    cfg, spec, mask = seg.config, seg.spec, batch.pad_mask

    # client: Bottom
    g_btm = Graph()
    w_btm, l_btm = _leaves(g_btm, seg.bottom, seg.trainable("bottom"))
    smashed, clean = bottom_forward(w_btm, cfg, spec, batch, noise, rng)

    # server: Trunk
    g_trk = Graph()
    x_in = g_trk.leaf(smashed.data)
    w_trk, l_trk = _leaves(g_trk, seg.trunk, seg.trainable("trunk"))
    trunk_out, deeper = trunk_forward(w_trk, cfg, spec, x_in, mask, deeper_layer)

    # client: Top and loss
    g_top = Graph()
    y_in = g_top.leaf(trunk_out.data)
    w_top, l_top = _leaves(g_top, seg.top, seg.trainable("top"))
    loss = lm_loss(top_forward(w_top, cfg, spec, y_in, mask), batch)
    task_loss = loss.item()
    if not math.isfinite(task_loss):
        raise TrainingDiverged(f"non-finite loss {task_loss} at step {step}")
    top_grads = backward(loss, {**l_top, "__in": y_in})
    grad_trunk_out = top_grads.pop("__in")

    # server: backward through the Trunk
    surrogate = ops.sum(ops.mul(trunk_out, grad_trunk_out))
    trk_grads = backward(surrogate, {**l_trk, "__in": x_in})
    grad_smashed = trk_grads.pop("__in")

    # client: backward through the Bottom (plus the NoPeek term, which lives here)
    surrogate = ops.sum(ops.mul(smashed, grad_smashed))
    total = task_loss
    if noise.mechanism == "nopeek" and noise.alpha > 0:
        reg = nopeek_loss(Tensor(0.0), clean, smashed, noise.alpha)
        total += reg.item()
        surrogate = ops.add(surrogate, reg)
    btm_grads = backward(surrogate, l_btm) if l_btm else {}

    transcript = Transcript(step=step, batch_index=batch_index, smashed_btm=smashed.data,
                            trunk_out=trunk_out.data, grad_trunk_out=grad_trunk_out, pad_mask=mask,
                            deeper_hidden=None if deeper is None else deeper.data)
    return Exchange(total, task_loss, {"bottom": btm_grads, "trunk": trk_grads, "top": top_grads},
                    transcript)


def centralized_step(params: ModelParams, spec: SplitSpec, batch: TokenBatch):
    """Unsplit reference: loss, gradients of trainable weights and ∂L/∂(trunk output)."""
    cfg = params.config
    spec.validate(cfg)
    g = Graph()
    weights, leaves = _leaves(g, params.weights, params.trainable_names())
    h, _ = bottom_forward(weights, cfg, spec, batch, NoiseSpec(), None)
    t, _ = trunk_forward(weights, cfg, spec, h, batch.pad_mask)
    loss = lm_loss(top_forward(weights, cfg, spec, t, batch.pad_mask), batch)
    grads = backward(loss, {**leaves, "__trunk_out": t})
    return loss.item(), grads, grads.pop("__trunk_out")


# ---------------------------------------------------------------- training

@dataclass
class TrainState:
    segments: SplitSegments
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    step: int = 0
    seed: int = 0
    lr: float = FT_LR
    optimizers: dict[str, AdamW] = field(default_factory=dict)
    rng: np.random.Generator | None = None

    def __post_init__(self):
        for part in ("bottom", "trunk", "top"):
            self.optimizers.setdefault(part, AdamW(lr=self.lr))
        if self.rng is None:
            self.rng = np.random.default_rng([self.seed, self.noise.seed])


def init_state(params: ModelParams, spec: SplitSpec, noise: NoiseSpec | None = None, seed: int = 0,
               lr: float = FT_LR) -> TrainState:
    return TrainState(split(params, spec), noise or NoiseSpec(), 0, seed, lr)


def sl_train_step(state: TrainState, batch: TokenBatch, batch_index: int = 0,
                  deeper_layer: int | None = None) -> tuple[TrainState, Transcript, float]:
    """Run one protocol round trip and update every segment's trainable weights.

    Optimizer moments are advanced in place; the returned state carries the new
    segment snapshots and step counter.
    """
    ex = protocol_exchange(state.segments, batch, state.noise, state.rng, state.step, batch_index,
                           deeper_layer)
    if not math.isfinite(ex.loss):
        raise TrainingDiverged(f"non-finite loss {ex.loss} at step {state.step}")
    seg = state.segments
    new = {}
    for part in ("bottom", "trunk", "top"):
        weights = dict(seg.part(part))
        grads = ex.grads[part]
        if grads:
            weights.update(state.optimizers[part].step(weights, grads))
        new[part] = weights
    segments = replace(seg, **new)
    return replace(state, segments=segments, step=state.step + 1), ex.transcript, ex.loss


def split_perplexity(seg: SplitSegments, corpus: TokenBatch, noise: NoiseSpec | None = None,
                     rng: np.random.Generator | None = None, batch_size: int = 32) -> float:
    """Token-weighted test perplexity of the split model, defense noise included."""
    noise = noise or NoiseSpec()
    cfg, spec = seg.config, seg.spec
    w = seg.merged()
    total, count = 0.0, 0
    for batch in epoch_batches(corpus, batch_size):
        h, _ = bottom_forward(w, cfg, spec, batch, noise if noise.mechanism != "nopeek" else NoiseSpec(), rng)
        t, _ = trunk_forward(w, cfg, spec, h, batch.pad_mask)
        n = int(batch.pad_mask[:, 1:].sum())
        total += lm_loss(top_forward(w, cfg, spec, t, batch.pad_mask), batch).item() * n
        count += n
    if count == 0:
        raise ValueError("perplexity needs a non-empty corpus")
    return math.exp(min(total / count, 700.0))


@dataclass
class SplitRun:
    segments: SplitSegments
    records: list[TranscriptRecord]
    utility: list[tuple[int, float]]
    losses: list[float]


def recording_points(steps: int, record_every: int) -> list[int]:
    return list(range(0, steps + 1, record_every))


def run_split_ft(model: ModelParams, spec: SplitSpec, corpus: TokenBatch, steps: int,
                 defense: NoiseSpec | None = None, record_every: int = 200, record_batches: int = 5,
                 seed: int = 0, batch_size: int = 2, lr: float = FT_LR,
                 test_corpus: TokenBatch | None = None, deeper_layer: int | None = None) -> SplitRun:
    """Split fine-tuning with transcripts recorded every ``record_every`` steps.

    At each recording point the current weights serve ``record_batches``
    protocol exchanges on held-aside batches; their transcripts are what the
    server would log for those steps. Recording never perturbs training.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    defense = defense or NoiseSpec()
    state = init_state(model, spec, defense, seed, lr)
    train_stream = BatchStream(corpus, batch_size, seed=[seed, 1])
    record_stream = BatchStream(corpus, batch_size, seed=[seed, 2])
    record_rng = np.random.default_rng([seed, defense.seed, 3])
    util_rng_seed = [seed, defense.seed, 4]
    points = set(recording_points(steps, record_every))
    records: list[TranscriptRecord] = []
    utility: list[tuple[int, float]] = []
    losses: list[float] = []

    def record(step):
        for j in range(record_batches):
            batch = next(record_stream)
            rows = record_stream.last_rows
            ex = protocol_exchange(state.segments, batch, defense, record_rng, step, j, deeper_layer)
            records.append(TranscriptRecord(ex.transcript, BatchMeta(rows, batch.ids, batch.pad_mask),
                                            {"loss": ex.task_loss}))
        if test_corpus is not None:
            ppl = split_perplexity(state.segments, test_corpus, defense, np.random.default_rng(util_rng_seed))
            utility.append((step, ppl))

    for step in range(steps):
        if step in points:
            record(step)
        state, _, loss = sl_train_step(state, next(train_stream))
        losses.append(loss)
    if steps in points:
        record(steps)
    return SplitRun(state.segments, records, utility, losses)


def pre_finetune(model: ModelParams, spec: SplitSpec, corpus: TokenBatch, steps: int, seed: int = 0,
                 lr: float = FT_LR, batch_size: int = 4) -> tuple[ModelParams, float]:
    """Client-side fine-tuning of Bottom and Top adapters before split training.

    Returns the new params and their adapter L2 norm.
    """
    if not model.adapter_names:
        raise ValueError("pre_finetune needs adapters attached")
    if steps == 0:
        return model, adapter_l2_norm(model)
    spec.validate(model.config)
    names = [n for n in model.adapter_names if _owner(n, spec) in ("bottom", "top")]
    params, _ = train_lm(model, corpus, steps, batch_size=batch_size, lr=lr, seed=seed, warmup=1,
                         names=names)
    return params, adapter_l2_norm(params)
