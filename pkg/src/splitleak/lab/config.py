"""Versioned JSON experiment configuration with strict keys and sweep expansion."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from pathlib import Path
from typing import Any, Mapping

from ..defenses import NoiseSpec
from ..minilm.model import ModelConfig

CONFIG_VERSION = 1
INVERTERS = ("sip-gru", "namoe", "ae")
GM_INITS = ("sip", "random")


class ConfigError(ValueError):
    pass


def _synth(kind: str, count: int, seed: int) -> dict:
    return {"synth": kind, "count": count, "seed": seed}


# Desk defaults. Every key a config may set appears here; anything else is rejected.
DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "name": "experiment",
    "model": ModelConfig().to_dict(),
    "pretrain": {"steps": 1200, "seed": 0, "batch_size": 16, "lr": 3e-3,
                 "corpora": [_synth("news", 2000, 11), _synth("code", 2000, 12)]},
    "split": {"bottom_end": 1, "trunk_end": 7},
    "corpora": {"finetune": _synth("news", 400, 101), "auxiliary": _synth("news", 400, 103),
                "test": _synth("news", 40, 104)},
    "defense": NoiseSpec().to_dict(),
    "attack": {
        "modes": ["b+f"],
        "inverter": "sip-gru",
        "noise_aware": False,
        "gm_init": "sip",
        "deeper_layer": None,
        "epochs": 15,
        "hyperparams": {"gm_epochs": 18, "gm_lr": 0.09, "gm_beta": 0.85, "gm_tau": 1.2,
                        "sm_epochs": 800, "sm_lr": 0.005, "sm_weight_decay": 0.02,
                        "sm_objective": "cosine"},
        "namoe": {"dxp_range": [0.15, 0.45], "epochs_gate": 10, "nopeek_alphas": [],
                  "pool_size": 5, "pool_steps": 50},
    },
    "recording": {"every": 200, "batches": 5},
    "steps": 600,
    "batch_size": 2,
    "lr": 1e-3,
    "adapter_rank": 4,
    "pre_ft_steps": 0,
    "seeds": [0, 1, 2],
    "sweep": {},
    "sweep_points": [],
}

# Objects taken verbatim rather than merged key by key
_VERBATIM = {"sweep", "corpora.finetune", "corpora.auxiliary", "corpora.test"}


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(base[key], dict) and where not in _VERBATIM:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key '{where}' must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def get_path(cfg: Mapping, dotted: str):
    node = cfg
    for part in dotted.split("."):
        if not isinstance(node, Mapping) or part not in node:
            raise ConfigError(f"unknown config field '{dotted}'")
        node = node[part]
    return node


def set_path(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config field '{dotted}'")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"unknown config field '{dotted}'")
    node[parts[-1]] = value


def _is_scalar(v) -> bool:
    return v is None or isinstance(v, (bool, int, float, str))


def _check_corpus(ref, base_dir: Path, where: str) -> None:
    if isinstance(ref, str):
        if not (base_dir / ref).is_file():
            raise ConfigError(f"{where}: corpus file '{ref}' does not exist")
        return
    if not isinstance(ref, Mapping) or set(ref) != {"synth", "count", "seed"}:
        raise ConfigError(f"{where}: corpus must be a file path or {{synth, count, seed}}")
    if ref["synth"] not in ("news", "code") or int(ref["count"]) < 1:
        raise ConfigError(f"{where}: synth must be 'news' or 'code' with count >= 1")


def validate(cfg: dict, base_dir: Path) -> dict:
    """Check a fully merged config (one sweep point); returns it unchanged."""
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']}")
    try:
        model = ModelConfig(**cfg["model"])
        NoiseSpec.from_dict(cfg["defense"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    b, t = cfg["split"]["bottom_end"], cfg["split"]["trunk_end"]
    if not 0 < b < t <= model.blocks:
        raise ConfigError(f"split ({b}, {t}) invalid for {model.blocks} blocks")
    if not cfg["seeds"]:
        raise ConfigError("seeds must be non-empty")
    atk = cfg["attack"]
    if atk["inverter"] not in INVERTERS:
        raise ConfigError(f"attack.inverter must be one of {INVERTERS}")
    if atk["gm_init"] not in GM_INITS:
        raise ConfigError(f"attack.gm_init must be one of {GM_INITS}")
    from ..attacks.matching import AttackHyperparams
    from ..attacks.pipeline import MODES
    for mode in atk["modes"]:
        if mode not in MODES:
            raise ConfigError(f"unknown attack mode '{mode}'")
    try:
        AttackHyperparams(**atk["hyperparams"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    deeper = atk["deeper_layer"]
    if deeper is not None and not b < deeper <= t:
        raise ConfigError(f"attack.deeper_layer must lie in ({b}, {t}]")
    for key in ("steps", "batch_size", "adapter_rank"):
        if int(cfg[key]) < 1:
            raise ConfigError(f"{key} must be >= 1")
    if cfg["recording"]["every"] < 1 or cfg["recording"]["batches"] < 1:
        raise ConfigError("recording.every and recording.batches must be >= 1")
    for role, ref in cfg["corpora"].items():
        if role == "test" and ref is None:
            continue
        _check_corpus(ref, base_dir, f"corpora.{role}")
    for i, ref in enumerate(cfg["pretrain"]["corpora"]):
        _check_corpus(ref, base_dir, f"pretrain.corpora[{i}]")
    return cfg


def load_config(source, base_dir=None) -> "ExperimentConfig":
    """From a path or an already parsed mapping."""
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base_dir = base_dir or path.parent
    else:
        raw = dict(source)
    return ExperimentConfig(raw, Path(base_dir or "."))


class ExperimentConfig:
    """A parsed config plus its expanded sweep points."""

    def __init__(self, raw: Mapping, base_dir: Path):
        if raw.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config needs \"version\": {CONFIG_VERSION}")
        self.raw = dict(raw)
        self.base_dir = base_dir
        self.base = _merge(DEFAULTS, raw)
        for field, values in self.base["sweep"].items():
            get_path(self.base, field)
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep axis '{field}' needs a non-empty list of values")
            if not all(_is_scalar(v) for v in values):
                raise ConfigError(f"sweep axis '{field}' must take scalar values")
            if not _is_scalar(get_path(self.base, field)):
                raise ConfigError(f"sweep axis '{field}' is not a scalar field")
        self.points = [validate(p, base_dir) for p in self._expand()]

    def _expand(self) -> list[dict]:
        axes = self.base["sweep"]
        names = list(axes)
        explicit = self.base["sweep_points"] or [{}]
        points = []
        for combo in itertools.product(*(axes[n] for n in names)):
            for extra in explicit:
                p = copy.deepcopy(self.base)
                for n, v in zip(names, combo):
                    set_path(p, n, v)
                for n, v in extra.items():
                    get_path(self.base, n)
                    set_path(p, n, v)
                p["sweep"], p["sweep_points"] = {}, []
                p["_overrides"] = {**dict(zip(names, combo)), **extra}
                points.append(p)
        return points

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.base["seeds"]]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.base)


def fingerprint(obj) -> str:
    """Stable short hash of a JSON-serialisable object (cache keys)."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
