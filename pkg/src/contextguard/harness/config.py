"""Declarative run configuration: one YAML file drives every stage."""

from __future__ import annotations

from pathlib import Path

import yaml

from ..errors import ConfigError
from ..guardians import AutoencoderTrainConfig
from ..sceme import ScemeTrainConfig
from ..synthworld import default_world_config
from .pipeline import AttackSettings, CorpusSettings, EvalSettings, RunConfig

_WORLD_KEYS = {
    "num_categories",
    "feature_dim",
    "world_seed",
    "margin_factor",
    "objects_per_scene",
    "proposals_per_object",
    "background_rate",
    "noise_scale",
    "overlap_fraction",
}
_TOP_KEYS = {"seed", "world", "corpus", "sceme", "autoencoder", "attacks", "evaluation"}


def _require_mapping(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where} must be a mapping")
    return value


def _reject_unknown(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _build_dataclass(cls, section: dict, where: str):
    allowed = set(cls.__dataclass_fields__)
    _reject_unknown(section, allowed, where)
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad {where} section: {exc}") from exc


def parse_config(doc: dict) -> RunConfig:
    doc = _require_mapping(doc, "config")
    _reject_unknown(doc, _TOP_KEYS, "config")
    if "seed" not in doc or not isinstance(doc["seed"], int):
        raise ConfigError("config requires an integer 'seed'")
    seed = doc["seed"]

    world_sec = dict(_require_mapping(doc.get("world", {}), "world"))
    _reject_unknown(world_sec, _WORLD_KEYS, "world")
    world_seed = world_sec.pop("world_seed", seed)
    margin_factor = world_sec.pop("margin_factor", 1.6)
    for key in ("objects_per_scene", "proposals_per_object"):
        if key in world_sec:
            pair = world_sec[key]
            if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
                raise ConfigError(f"world.{key} must be a [min, max] pair")
            world_sec[key] = (int(pair[0]), int(pair[1]))
    try:
        world = default_world_config(seed=world_seed, **world_sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad world section: {exc}") from exc

    corpus = _build_dataclass(
        CorpusSettings, dict(_require_mapping(doc.get("corpus", {}), "corpus")), "corpus"
    )
    sceme = _build_dataclass(
        ScemeTrainConfig, dict(_require_mapping(doc.get("sceme", {}), "sceme")), "sceme"
    )
    autoencoder = _build_dataclass(
        AutoencoderTrainConfig,
        dict(_require_mapping(doc.get("autoencoder", {}), "autoencoder")),
        "autoencoder",
    )

    attacks_sec = doc.get("attacks", [])
    if not isinstance(attacks_sec, list):
        raise ConfigError("attacks must be a list")
    attacks = []
    seen = set()
    for i, item in enumerate(attacks_sec):
        attack = _build_dataclass(
            AttackSettings, dict(_require_mapping(item, f"attacks[{i}]")), f"attacks[{i}]"
        )
        if attack.mask not in ("full", "block25"):
            raise ConfigError(f"attacks[{i}].mask must be 'full' or 'block25'")
        if attack.name in seen:
            raise ConfigError(f"duplicate attack name {attack.name!r}")
        seen.add(attack.name)
        attacks.append(attack)

    evaluation = _build_dataclass(
        EvalSettings,
        dict(_require_mapping(doc.get("evaluation", {}), "evaluation")),
        "evaluation",
    )
    if not (0.0 <= evaluation.target_fpr <= 1.0):
        raise ConfigError("evaluation.target_fpr must lie in [0, 1]")
    if evaluation.threshold_mode not in ("per_category", "global"):
        raise ConfigError("evaluation.threshold_mode must be per_category or global")

    cfg = RunConfig(
        seed=seed,
        world=world,
        world_margin_factor=float(margin_factor),
        corpus=corpus,
        sceme=sceme,
        autoencoder=autoencoder,
        attacks=attacks,
        evaluation=evaluation,
    )
    cfg.world.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        raise ConfigError(f"{path} is empty")
    return parse_config(doc)
