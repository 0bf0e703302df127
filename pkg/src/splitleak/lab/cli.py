"""``splitleak`` command line: one subcommand per experiment stage plus ``run`` and ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..attacks import NaMoEInverter, SIPInverter, random_encoder, run_modes
from ..defenses import NoiseSpec
from ..minilm import checkpoint
from ..minilm.model import ModelConfig
from ..splitsim.transcript import read_transcript_log, write_transcript_log
from ..textmetrics import score_pair
from .config import DEFAULTS, ConfigError, load_config
from .corpus import code_spec, generate_sensi_corpora, news_spec
from .experiment import RunContext, hyperparams, obtain_pretrained, point_stages, run_experiment, split_spec
from .report import METRICS, ReportRow, emit_report, read_csv, summarize

log = logging.getLogger("splitleak")


def _config(args):
    """First sweep point of ``--config`` (or the defaults), with ``--seed`` applied."""
    cfg = load_config(args.config) if args.config else load_config({"version": DEFAULTS["version"]})
    point = {k: v for k, v in cfg.points[0].items() if k != "_overrides"}
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    return cfg, point, int(seed)


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_pretrain(args) -> int:
    cfg, point, _ = _config(args)
    model = obtain_pretrained(point, cfg.base_dir)
    path = checkpoint.save_model(_out(args, ".") / "pretrained", model)
    print(path)
    return 0


def cmd_gen_corpus(args) -> int:
    make = {"news": news_spec, "code": code_spec}[args.kind]
    paths = generate_sensi_corpora(make(args.count, seed=args.seed or 0), _out(args, "."))
    for kind, path in paths.items():
        print(f"{kind}\t{path}")
    return 0


def cmd_split_ft(args) -> int:
    cfg, point, seed = _config(args)
    ctx = RunContext(cfg.base_dir)
    run = ctx.split_run(point, seed)
    out = _out(args, ".")
    path = write_transcript_log(out / "transcripts.jsonl", run.records)
    (out / "utility.json").write_text(json.dumps({"utility": run.utility, "losses": run.losses}))
    print(path)
    return 0


def _inverter_meta(point, inv, kind: str) -> dict:
    meta = {"kind": kind, "layer": inv.layer, "model": point["model"], "split": point["split"],
            "pretrain": point["pretrain"], "deeper_layer": point["attack"]["deeper_layer"]}
    if kind == "namoe":
        meta["expert_specs"] = [s.to_dict() for s in inv.expert_specs]
    elif kind == "ae":
        meta["encoder_seed"] = inv.encoder_seed_
    else:
        meta["noise"] = inv.noise.to_dict() if inv.noise else None
    return meta


def cmd_train_inverter(args) -> int:
    cfg, point, seed = _config(args)
    kind = point["attack"]["inverter"]
    inv = RunContext(cfg.base_dir).inverter(point, seed)
    path = checkpoint.save_checkpoint(_out(args, ".") / "inverter", inv.weights_, role=f"inverter-{kind}",
                                      meta=_inverter_meta(point, inv, kind))
    print(path)
    return 0


def load_inverter(stem, ctx: RunContext, point):
    """Rebuild a fitted inverter from an ``inverter-*`` checkpoint."""
    weights, manifest = checkpoint.load_checkpoint(stem)
    role, meta = manifest["role"], manifest["meta"]
    if not role.startswith("inverter-"):
        raise checkpoint.CheckpointError(f"expected an inverter checkpoint, found role '{role}'")
    kind = role.split("-", 1)[1]
    if kind == "ae":
        enc = random_encoder(ModelConfig(**meta["model"]), split_spec(meta), meta["encoder_seed"])
        inv = SIPInverter(enc, None, layer=meta["layer"])
    elif kind == "namoe":
        specs = [NoiseSpec.from_dict(d) for d in meta["expert_specs"]]
        inv = NaMoEInverter(ctx.replicas(point).encoder(meta["deeper_layer"]), specs, layer=meta["layer"])
    else:
        noise = NoiseSpec.from_dict(meta["noise"]) if meta.get("noise") else None
        inv = SIPInverter(ctx.replicas(point).encoder(meta["deeper_layer"]), noise, layer=meta["layer"])
    inv.weights_ = weights
    return inv


def cmd_attack(args) -> int:
    cfg, point, seed = _config(args)
    ctx = RunContext(cfg.base_dir)
    inv = load_inverter(args.inverter, ctx, point)
    hp = hyperparams(point)
    rows = []
    for rec in read_transcript_log(args.transcripts):
        t = rec.transcript
        res = run_modes(t, inv, ctx.replicas(point), point["attack"]["modes"], hp, seed, point["attack"]["gm_init"])
        for stage in point_stages(point):
            scores = [score_pair(c, r) for c, r in zip(res.tokens[stage], rec.meta.token_ids)]
            rows.append(ReportRow("cli", seed, t.step, t.batch_index, stage, wall_ms=res.wall_ms[stage],
                                  **{m: float(np.mean([s[m] for s in scores])) for m in METRICS}))
    paths = emit_report(rows, _out(args, "."), config=cfg.to_dict())
    print(paths["csv"])
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else load_config({"version": DEFAULTS["version"]})
    seeds = [args.seed] if args.seed is not None else None
    result = run_experiment(cfg, _out(args, "report"), jobs=args.jobs, seeds=seeds)
    print(result["paths"]["csv"])
    failed = sorted({(r.sweep_id, r.seed) for r in result["rows"] if r.error})
    for sid, seed in failed:
        print(f"failed: {sid} seed {seed}", file=sys.stderr)
    return 1 if failed else 0


def cmd_report(args) -> int:
    rows = read_csv(args.csv)
    summary = summarize(rows)
    if args.out:
        emit_report(rows, _out(args, "."))
    for sid, stages in summary.items():
        for stage, metrics in stages.items():
            cells = []
            for m in METRICS:
                s = metrics[m]
                std = "" if s["std"] is None else f" ± {s['std']:.4f}"
                cells.append(f"{m}={s['mean']:.4f}{std}")
            print(f"{sid}\t{stage}\t" + "\t".join(cells))
    return 0


def _globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="experiment config (JSON, version 1)")
    parser.add_argument("--seed", type=int, default=d(None), help="override the config seed")
    parser.add_argument("--out", default=d(None), help="output directory")
    parser.add_argument("--jobs", type=int, default=d(1), help="worker processes")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitleak", description="Split-learning data reconstruction lab.")
    _globals(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        _globals(s, suppress=True)
        s.set_defaults(fn=fn)
        return s

    add("pretrain", cmd_pretrain, "pretrain (or load the cached) model and save a checkpoint")
    g = add("gen-corpus", cmd_gen_corpus, "write marked/replaced/masked synthetic corpora")
    g.add_argument("--kind", choices=("news", "code"), default="news")
    g.add_argument("--count", type=int, default=1000)
    add("split-ft", cmd_split_ft, "split fine-tuning; writes the transcript log")
    add("train-inverter", cmd_train_inverter, "train the configured inverter on the auxiliary corpus")
    a = add("attack", cmd_attack, "attack a transcript log with a trained inverter")
    a.add_argument("--transcripts", required=True)
    a.add_argument("--inverter", required=True)
    add("run", cmd_run, "full experiment over every sweep point and seed")
    r = add("report", cmd_report, "summarise a report CSV")
    r.add_argument("csv")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"splitleak: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
