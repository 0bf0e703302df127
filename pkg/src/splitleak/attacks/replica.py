"""What the attacker may run: pretrained replicas of the client's segments.

Replicas are built from the *pretrained* model only. Fine-tuned client weights
never reach attack code; the provenance flag makes that checkable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..autodiff import Tensor
from ..defenses import NoiseSpec
from ..minilm.model import ModelConfig, ModelParams, build_model
from ..minilm.tokenizer import TokenBatch
from ..splitsim.protocol import SplitSpec, bottom_forward, split, top_forward, trunk_forward

PROVENANCES = ("pretrained", "random", "pre-finetuned")


class ProvenanceError(ValueError):
    pass


def _strip_adapters(weights: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in weights.items() if ".lora_" not in k}


@dataclass(frozen=True)
class BottomEncoder:
    """A frozen Bottom (optionally continued into the Trunk up to ``stop``) used as SIP encoder."""

    config: ModelConfig
    spec: SplitSpec
    weights: Mapping[str, np.ndarray]
    provenance: str = "pretrained"
    stop: int | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ProvenanceError(f"unknown provenance '{self.provenance}'")

    @property
    def hidden(self) -> int:
        return self.config.hidden

    @property
    def embedding_table(self) -> np.ndarray:
        return np.asarray(self.weights["embed"])

    def encode(self, batch: TokenBatch, noise: NoiseSpec | None = None,
               rng: np.random.Generator | None = None) -> np.ndarray:
        """Smashed data (B×S×H) for ``batch``, perturbed as ``noise`` prescribes."""
        noise = noise or NoiseSpec()
        if noise.mechanism == "nopeek":
            noise = NoiseSpec()
        h, _ = bottom_forward(self.weights, self.config, self.spec, batch, noise, rng)
        if self.stop is not None and self.stop > self.spec.bottom_end:
            deep_spec = SplitSpec(self.spec.bottom_end, self.stop)
            h, _ = trunk_forward(self.weights, self.config, deep_spec, h, batch.pad_mask)
        return h.data


@dataclass(frozen=True)
class ReplicaSegments:
    """Pretrained Bottom, Trunk and Top at the attacked split."""

    config: ModelConfig
    spec: SplitSpec
    bottom: Mapping[str, np.ndarray]
    trunk: Mapping[str, np.ndarray]
    top: Mapping[str, np.ndarray]
    provenance: str = "pretrained"

    def __post_init__(self):
        if self.provenance != "pretrained":
            raise ProvenanceError(f"replicas must come from the pretrained model, got '{self.provenance}'")

    @classmethod
    def from_pretrained(cls, pretrained: ModelParams, spec: SplitSpec) -> "ReplicaSegments":
        seg = split(ModelParams(pretrained.config, _strip_adapters(pretrained.weights)), spec)
        return cls(pretrained.config, spec, seg.bottom, seg.trunk, seg.top)

    def encoder(self, stop: int | None = None) -> BottomEncoder:
        weights = {**self.bottom, **self.trunk} if stop else dict(self.bottom)
        return BottomEncoder(self.config, self.spec, weights, "pretrained", stop)

    @property
    def embedding_table(self) -> np.ndarray:
        return np.asarray(self.bottom["embed"])

    def bottom_from_embeddings(self, weights: Mapping, e: Tensor, pad_mask) -> Tensor:
        """Bottom replica applied to token embeddings (positions added here)."""
        from ..minilm.model import add_positions, run_blocks
        w = {**self.bottom, **weights}
        return run_blocks(w, add_positions(w, e), 0, self.spec.bottom_end, self.config, pad_mask)

    def top_logits(self, x, pad_mask, weights: Mapping | None = None) -> Tensor:
        return top_forward({**self.top, **(weights or {})}, self.config, self.spec, x, pad_mask)


def random_encoder(config: ModelConfig, spec: SplitSpec, seed: int) -> BottomEncoder:
    """Bottom-shaped encoder with fresh random weights (AE baseline)."""
    seg = split(build_model(config, seed), spec)
    return BottomEncoder(config, spec, seg.bottom, "random")


def pre_finetuned_encoder(params: ModelParams, spec: SplitSpec) -> BottomEncoder:
    """Encoder from a client-style fine-tuned Bottom (NoPeek simulation pool)."""
    return BottomEncoder(params.config, spec, split(params, spec).bottom, "pre-finetuned")
