"""Composition of the learning-based and optimisation-based stages."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .._validation import ContractError
from ..splitsim.transcript import Transcript
from .matching import AttackHyperparams, gradient_matching, smashed_data_matching
from .inverters import mask_tokens
from .replica import ReplicaSegments

MODES = ("sip", "b", "f", "b+f")


class ModeError(ContractError):
    pass


@dataclass
class AttackResult:
    """Reconstructed token ids per stage, logits where a stage produces them, and timings."""

    tokens: dict[str, np.ndarray]
    logits: dict[str, np.ndarray] = field(default_factory=dict)
    wall_ms: dict[str, float] = field(default_factory=dict)
    scores: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def stages(self) -> list[str]:
        return list(self.tokens)


def _stages(mode: str) -> list[str]:
    if mode not in MODES:
        raise ModeError(f"unknown attack mode '{mode}'; expected one of {MODES}")
    return {"sip": ["sip"], "b": ["sip", "b"], "f": ["sip", "f"], "b+f": ["sip", "b", "b+f"]}[mode]


def bisr_pipeline(transcript: Transcript, inverter, replicas: ReplicaSegments, mode: str = "b+f",
                  hp: AttackHyperparams | None = None, seed: int = 0, gm_init: str = "sip") -> AttackResult:
    """Run SIP, then gradient matching (b), smashed-data matching (f), or both in sequence.

    Every requested stage is reported, including the intermediate ones, so a
    single run yields the SIP-only, b and b+f reconstructions. ``gm_init``
    "random" starts gradient matching from near-uniform labels instead of
    the SIP logits (position 0 then falls back to BOS).
    """
    # wall_ms is cumulative: each stage includes the stages it builds on
    hp = hp or AttackHyperparams()
    stages = _stages(mode)
    if "b" in stages and transcript.grad_trunk_out is None:
        raise ModeError(f"mode '{mode}' needs the observed gradient in the transcript")
    if gm_init not in ("sip", "random"):
        raise ModeError(f"gm_init must be 'sip' or 'random', got '{gm_init}'")
    mask = transcript.pad_mask
    out = AttackResult({})

    t0 = time.perf_counter()
    logits = inverter.predict_logits(transcript)
    out.logits["sip"] = logits
    out.tokens["sip"] = mask_tokens(logits.argmax(-1), mask)
    out.wall_ms["sip"] = 1e3 * (time.perf_counter() - t0)

    if "b" in stages:
        t0 = time.perf_counter()
        if gm_init == "sip":
            gm = gradient_matching(transcript, replicas, logits[:, 1:], hp, init_tokens=out.tokens["sip"],
                                   seed=seed)
        else:
            gm = gradient_matching(transcript, replicas, "random", hp, seed=seed)
        out.tokens["b"] = gm.tokens
        out.logits["b"] = gm.iterate
        out.wall_ms["b"] = 1e3 * (time.perf_counter() - t0) + out.wall_ms["sip"]

    for stage, init in (("f", "sip"), ("b+f", "b")):
        if stage in stages:
            t0 = time.perf_counter()
            sm = smashed_data_matching(transcript.smashed_btm, replicas, out.tokens[init], hp, pad_mask=mask)
            out.tokens[stage] = sm.tokens
            out.wall_ms[stage] = 1e3 * (time.perf_counter() - t0) + out.wall_ms[init]
    return out


def run_modes(transcript: Transcript, inverter, replicas: ReplicaSegments, modes,
              hp: AttackHyperparams | None = None, seed: int = 0, gm_init: str = "sip") -> AttackResult:
    """Union of the stages of several modes, sharing the stages they have in common."""
    wanted: list[str] = []
    for mode in modes:
        wanted += [s for s in _stages(mode) if s not in wanted]
    merged = AttackResult({})
    for mode in sorted(set(modes), key=lambda m: (-len(_stages(m)), m)):
        if all(s in merged.tokens for s in _stages(mode)):
            continue
        res = bisr_pipeline(transcript, inverter, replicas, mode, hp, seed, gm_init)
        for s in res.tokens:
            if s not in merged.tokens:
                merged.tokens[s] = res.tokens[s]
                merged.wall_ms[s] = res.wall_ms[s]
                if s in res.logits:
                    merged.logits[s] = res.logits[s]
    return AttackResult({s: merged.tokens[s] for s in wanted}, merged.logits,
                        {s: merged.wall_ms[s] for s in wanted})
