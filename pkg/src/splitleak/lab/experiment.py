"""Experiment orchestration: pretrain (cached), split fine-tune, invert, attack, score."""

from __future__ import annotations

import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping

import numpy as np

from ..attacks import (AttackHyperparams, NaMoEInverter, ReplicaSegments, SIPInverter, dxp_roster,
                       pre_finetuned_encoder, run_modes, train_ae_baseline)
from ..attacks.pipeline import _stages
from ..defenses import NoiseSpec
from ..minilm import checkpoint
from ..minilm.model import ModelConfig, ModelParams, attach_adapters
from ..minilm.tokenizer import TokenBatch, encode_batch
from ..minilm.training import pretrain
from ..splitsim.protocol import SplitSpec, pre_finetune, recording_points, run_split_ft
from ..textmetrics import score_pair
from .config import ExperimentConfig, fingerprint, load_config
from .corpus import code_spec, generate_lines, news_spec, read_lines
from .report import METRICS, ReportRow, emit_report

log = logging.getLogger(__name__)

# what a seed changes; the pretrained model is shared by every seed
SEED_ROLES = ["split fine-tuning data order", "recording batch choice", "adapter initialisation",
              "inverter initialisation and batch order", "random gradient-matching start"]


def cache_dir() -> Path:
    return Path(os.environ.get("SPLITLEAK_CACHE") or Path.home() / ".cache" / "splitleak")


def corpus_lines(ref, base_dir: Path) -> list[str]:
    if isinstance(ref, str):
        return read_lines(base_dir / ref)
    make = {"news": news_spec, "code": code_spec}[ref["synth"]]
    return generate_lines(make(int(ref["count"]), seed=int(ref["seed"]))).surface


def resolve_corpus(ref, base_dir: Path, max_len: int) -> TokenBatch:
    return encode_batch(corpus_lines(ref, base_dir), max_len)


def split_spec(cfg: Mapping) -> SplitSpec:
    return SplitSpec(int(cfg["split"]["bottom_end"]), int(cfg["split"]["trunk_end"]))


def defense_spec(cfg: Mapping) -> NoiseSpec:
    return NoiseSpec.from_dict(cfg["defense"])


def hyperparams(cfg: Mapping) -> AttackHyperparams:
    return AttackHyperparams(**cfg["attack"]["hyperparams"])


def pretrain_key(cfg: Mapping) -> str:
    return fingerprint({"model": cfg["model"], "pretrain": cfg["pretrain"]})


def obtain_pretrained(cfg: Mapping, base_dir: Path, cache: Path | None = None) -> ModelParams:
    """Load the pretrained model for ``cfg`` from the on-disk cache, pretraining on a miss."""
    cache = cache or cache_dir()
    stem = cache / f"pretrained-{pretrain_key(cfg)}"
    if stem.with_suffix(".json").exists():
        return checkpoint.load_model(stem)
    config = ModelConfig(**cfg["model"])
    pre = cfg["pretrain"]
    lines = [line for ref in pre["corpora"] for line in corpus_lines(ref, base_dir)]
    log.info("pretraining %s for %d steps", stem.name, pre["steps"])
    model, _ = pretrain(config, encode_batch(lines, config.max_seq), int(pre["steps"]), seed=int(pre["seed"]),
                        batch_size=int(pre["batch_size"]), lr=float(pre["lr"]))
    cache.mkdir(parents=True, exist_ok=True)
    checkpoint.save_model(stem, model)
    return model


class RunContext:
    """Per-process memo of corpora, fine-tuning runs and trained inverters."""

    def __init__(self, base_dir: Path, cache: Path | None = None):
        self.base_dir = Path(base_dir)
        self.cache = cache or cache_dir()
        self._memo: dict[str, object] = {}

    def memo(self, key_obj, build):
        key = fingerprint(key_obj)
        if key not in self._memo:
            self._memo[key] = build()
        return self._memo[key]

    def model(self, cfg) -> ModelParams:
        return self.memo(("model", pretrain_key(cfg)), lambda: obtain_pretrained(cfg, self.base_dir, self.cache))

    def corpus(self, cfg, role: str) -> TokenBatch:
        ref = cfg["corpora"][role]
        max_len = int(cfg["model"]["max_seq"])
        return self.memo(("corpus", ref, max_len), lambda: resolve_corpus(ref, self.base_dir, max_len))

    def client_model(self, cfg, seed: int) -> tuple[ModelParams, float]:
        """Adapters attached and, optionally, client-side pre-fine-tuned."""
        def build():
            params = attach_adapters(self.model(cfg), int(cfg["adapter_rank"]), seed=seed)
            return pre_finetune(params, split_spec(cfg), self.corpus(cfg, "finetune"), int(cfg["pre_ft_steps"]),
                                seed=seed, lr=float(cfg["lr"]))
        key = (pretrain_key(cfg), cfg["adapter_rank"], cfg["pre_ft_steps"], cfg["split"], cfg["corpora"]["finetune"],
               cfg["lr"], seed)
        return self.memo(("client",) + key, build)

    def split_run(self, cfg, seed: int):
        def build():
            params, _ = self.client_model(cfg, seed)
            test = self.corpus(cfg, "test") if cfg["corpora"].get("test") else None
            return run_split_ft(params, split_spec(cfg), self.corpus(cfg, "finetune"), int(cfg["steps"]),
                                defense_spec(cfg), int(cfg["recording"]["every"]),
                                int(cfg["recording"]["batches"]), seed, int(cfg["batch_size"]),
                                float(cfg["lr"]), test, cfg["attack"]["deeper_layer"])
        key = {k: cfg[k] for k in ("model", "pretrain", "split", "corpora", "defense", "recording", "steps",
                                   "batch_size", "lr", "adapter_rank", "pre_ft_steps")}
        return self.memo(("run", key, cfg["attack"]["deeper_layer"], seed), build)

    def replicas(self, cfg) -> ReplicaSegments:
        return self.memo(("replicas", pretrain_key(cfg), cfg["split"]),
                         lambda: ReplicaSegments.from_pretrained(self.model(cfg), split_spec(cfg)))

    def inverter(self, cfg, seed: int, kind: str | None = None, noise: NoiseSpec | None = None):
        """Trained inverter for ``cfg``; defaults follow ``attack.inverter`` and ``attack.noise_aware``."""
        atk = cfg["attack"]
        kind = kind or atk["inverter"]
        deeper = atk["deeper_layer"]
        layer = "deeper_hidden" if deeper is not None else "smashed_btm"
        if noise is None and kind == "sip-gru" and atk["noise_aware"]:
            noise = defense_spec(cfg)
        if noise is not None and noise.mechanism in ("none", "nopeek"):
            noise = None
        epochs = int(atk["epochs"])
        base_key = (pretrain_key(cfg), cfg["split"], cfg["corpora"]["auxiliary"], deeper, epochs, seed)
        aux = lambda: self.corpus(cfg, "auxiliary")  # noqa: E731

        if kind == "sip-gru":
            return self.memo(("sip",) + base_key + (noise.to_dict() if noise else None,),
                             lambda: SIPInverter(self.replicas(cfg).encoder(deeper), noise, epochs=epochs,
                                                 seed=seed, layer=layer).fit(aux()))
        if kind == "ae":
            return self.memo(("ae",) + base_key,
                             lambda: train_ae_baseline(aux(), ModelConfig(**cfg["model"]), split_spec(cfg),
                                                       epochs=epochs, seed=seed))
        if kind == "namoe":
            nm = atk["namoe"]

            def build():
                specs = dxp_roster(*nm["dxp_range"]) + [NoiseSpec.nopeek(a) for a in nm["nopeek_alphas"]]
                pool = self.nopeek_pool(cfg, seed) if nm["nopeek_alphas"] else ()
                expert0 = self.inverter(cfg, seed, "sip-gru", NoiseSpec())
                moe = NaMoEInverter(self.replicas(cfg).encoder(deeper), specs, pool, epochs_experts=epochs,
                                    epochs_gate=int(nm["epochs_gate"]), seed=seed, layer=layer)
                return moe.fit(aux(), expert0=expert0.weights_)
            return self.memo(("namoe",) + base_key + (nm,), build)
        raise ValueError(f"unknown inverter kind '{kind}'")

    def nopeek_pool(self, cfg, seed: int):
        """Bottoms pre-fine-tuned on the auxiliary corpus from distinct adapter starts."""
        nm = cfg["attack"]["namoe"]
        spec = split_spec(cfg)
        pool = []
        for i in range(int(nm["pool_size"])):
            params = attach_adapters(self.model(cfg), int(cfg["adapter_rank"]), seed=1000 * seed + i + 1)
            params, _ = pre_finetune(params, spec, self.corpus(cfg, "auxiliary"), int(nm["pool_steps"]),
                                     seed=1000 * seed + i + 1)
            pool.append(pre_finetuned_encoder(params, spec))
        return pool


def point_stages(cfg: Mapping) -> list[str]:
    stages: list[str] = []
    for mode in cfg["attack"]["modes"]:
        stages += [s for s in _stages(mode) if s not in stages]
    return stages


def _grid(cfg: Mapping) -> list[tuple[int, int, str]]:
    steps = recording_points(int(cfg["steps"]), int(cfg["recording"]["every"]))
    return [(step, b, stage) for step in steps for b in range(int(cfg["recording"]["batches"]))
            for stage in point_stages(cfg)]


def failure_rows(sweep_id: str, cfg: Mapping, seed: int, error: str) -> list[ReportRow]:
    return [ReportRow(sweep_id, seed, step, b, stage, error=error) for step, b, stage in _grid(cfg)]


def attack_point(ctx: RunContext, sweep_id: str, cfg: Mapping, seed: int) -> tuple[list[ReportRow], list]:
    """Rows for one (sweep point, seed), plus its utility trace."""
    run = ctx.split_run(cfg, seed)
    _, l2 = ctx.client_model(cfg, seed)
    inverter = ctx.inverter(cfg, seed)
    replicas = ctx.replicas(cfg)
    hp = hyperparams(cfg)
    ppl = dict(run.utility)
    rows = []
    for rec in run.records:
        t = rec.transcript
        res = run_modes(t, inverter, replicas, cfg["attack"]["modes"], hp, seed, cfg["attack"]["gm_init"])
        for stage in point_stages(cfg):
            scores = [score_pair(c, r) for c, r in zip(res.tokens[stage], rec.meta.token_ids)]
            mean = {m: float(np.mean([s[m] for s in scores])) for m in METRICS}
            rows.append(ReportRow(sweep_id, seed, t.step, t.batch_index, stage, ppl_test=ppl.get(t.step),
                                  adapter_l2=float(l2), wall_ms=float(res.wall_ms[stage]), **mean))
    return rows, [[int(s), float(p)] for s, p in run.utility]


def _run_seed(points: list[tuple[str, dict]], seed: int, base_dir: str, cache: str,
              ctx: RunContext | None = None) -> tuple[list, dict]:
    ctx = ctx or RunContext(Path(base_dir), Path(cache))
    rows, utility = [], {}
    for sweep_id, cfg in points:
        try:
            point_rows, trace = attack_point(ctx, sweep_id, cfg, seed)
            rows += point_rows
            utility[sweep_id] = trace
        except Exception as exc:  # one point's failure must not stop the others
            log.error("sweep point %s seed %d failed:\n%s", sweep_id, seed, traceback.format_exc())
            rows += failure_rows(sweep_id, cfg, seed, f"{type(exc).__name__}: {exc}")
    return rows, utility


def sweep_ids(config: ExperimentConfig) -> list[tuple[str, dict]]:
    return [(f"p{i}", {k: v for k, v in p.items() if k != "_overrides"}) for i, p in enumerate(config.points)]


def run_experiment(config, out_dir=None, jobs: int = 1, cache: Path | None = None,
                   seeds: list[int] | None = None, context: RunContext | None = None) -> dict:
    """Run every sweep point for every seed; writes the report when ``out_dir`` is given.

    A ``context`` shared between calls reuses fine-tuning runs and inverters
    whose inputs coincide (serial runs only).

    Returns {"rows", "utility", "points", "paths"}.
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    cache = Path(cache or cache_dir())
    points = sweep_ids(config)
    seeds = list(seeds) if seeds is not None else config.seeds
    # pretrain once up front so parallel workers only read the cache
    for _, cfg in points:
        try:
            obtain_pretrained(cfg, config.base_dir, cache)
        except Exception:  # reported per point by the workers
            log.error("pretraining failed:\n%s", traceback.format_exc())

    args = [(points, s, str(config.base_dir), str(cache)) for s in seeds]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(seeds))) as pool:
            results = list(pool.map(_run_seed, *zip(*args)))
    else:
        results = [_run_seed(*a, ctx=context) for a in args]

    order = {sid: i for i, (sid, _) in enumerate(points)}
    rows = sorted((r for rs, _ in results for r in rs),
                  key=lambda r: (order[r.sweep_id], r.seed, r.step, r.batch, _stage_rank(r.stage)))
    utility = {sid: {str(s): res[1].get(sid) for s, res in zip(seeds, results)} for sid, _ in points}
    meta = {sid: p["_overrides"] for (sid, _), p in zip(points, config.points)}
    out = {"rows": rows, "utility": utility, "points": meta, "paths": None}
    if out_dir is not None:
        out["paths"] = emit_report(rows, out_dir, config=config.to_dict(), points=meta,
                                   extras={"utility": utility, "seeds": seeds, "seed_roles": SEED_ROLES})
    return out


def _stage_rank(stage: str) -> int:
    return ("sip", "b", "f", "b+f").index(stage)
