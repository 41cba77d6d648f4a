"""Run configuration: per-profile defaults, YAML files and dotted command-line overrides."""

from __future__ import annotations

import copy
import dataclasses
import os
import re
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from carl.env import EnvConfig
from carl.metrics import DEFAULT_PENALTIES
from carl.trainer import PPOConfig

OUTPUT_ROOT_ENV = "CARL_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponent floats without a dot (``3e-4``)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _load(text: str):
    return yaml.load(text, Loader=_Loader)


def _dataclass_defaults(cls, obj) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else copy.deepcopy(v)
    return out


def defaults(profile: str = "carla") -> dict:
    """Full config tree with every default spelled out."""
    if profile not in ("carla", "nuplan"):
        raise ConfigError(f"env.profile: expected 'carla' or 'nuplan', got {profile!r}")
    return {
        "run": {
            "name": "run",
            "seed": 0,
            "output_dir": None,
            "checkpoint_every": 10,
            "collection": "sync",
            "step_timeout": None,
        },
        "env": _dataclass_defaults(EnvConfig, EnvConfig.for_profile(profile)),
        "ppo": {k: v for k, v in _dataclass_defaults(PPOConfig, PPOConfig.for_profile(profile)).items() if k != "seed"},
        "net": {"preset": "desk"},
        "eval": {"routes": 10, "repeats": 3, "max_steps": None},
        "metrics": {"penalties": dict(DEFAULT_PENALTIES)},
    }


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r}: expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {text!r}: malformed key")
    try:
        value = _load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{key}: cannot parse value {raw!r}: {exc}") from None
    return key.split("."), value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(base[k], dict) and k != "penalties" and k != "traffic_modes":
            if not isinstance(v, dict):
                raise ConfigError(f"{path}: expected a mapping, got {type(v).__name__}")
            _merge(base[k], v, path + ".")
        else:
            base[k] = v


def _set(tree: dict, parts: list[str], value) -> None:
    node = tree
    for i, p in enumerate(parts[:-1]):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"{'.'.join(parts[: i + 1])}: unknown key")
        node = node[p]
    leaf = parts[-1]
    free = len(parts) >= 2 and parts[-2] in ("penalties", "traffic_modes")
    if not isinstance(node, dict) or (leaf not in node and not free):
        raise ConfigError(f"{'.'.join(parts)}: unknown key")
    node[leaf] = value


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> dict:
    """Layer defaults, then the YAML file, then ``key=value`` overrides; then validate."""
    doc: dict = {}
    if path is not None:
        try:
            doc = _load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path}: top level must be a mapping")
    parsed = [parse_override(o) for o in overrides]
    profile = doc.get("env", {}).get("profile", "carla") if isinstance(doc.get("env"), dict) else "carla"
    for parts, value in parsed:
        if parts == ["env", "profile"]:
            profile = value
    cfg = defaults(profile)
    _merge(cfg, doc)
    for parts, value in parsed:
        _set(cfg, parts, value)
    validate(cfg)
    return cfg


def _build(cls, section: str, values: dict):
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except ValueError as exc:
        msg = str(exc)
        raise ConfigError(msg if msg.startswith(section) else f"{section}: {msg}") from None


def env_config(cfg: dict) -> EnvConfig:
    values = dict(cfg["env"])
    values["initial_speed"] = tuple(values["initial_speed"])
    return _build(EnvConfig, "env", values)


def ppo_config(cfg: dict) -> PPOConfig:
    return _build(PPOConfig, "ppo", dict(cfg["ppo"], seed=cfg["run"]["seed"]))


def validate(cfg: dict) -> None:
    run = cfg["run"]
    if not isinstance(run["seed"], int) or run["seed"] < 0:
        raise ConfigError("run.seed: must be a non-negative integer")
    if run["collection"] not in ("sync", "async"):
        raise ConfigError("run.collection: must be 'sync' or 'async'")
    if not isinstance(run["checkpoint_every"], int) or run["checkpoint_every"] < 1:
        raise ConfigError("run.checkpoint_every: must be a positive integer")
    if cfg["net"]["preset"] not in ("desk", "paper"):
        raise ConfigError("net.preset: must be 'desk' or 'paper'")
    if cfg["net"]["preset"] != cfg["env"]["raster"]:
        raise ConfigError("net.preset: must match env.raster")
    for k, v in cfg["metrics"]["penalties"].items():
        if not isinstance(v, (int, float)) or not 0 < v <= 1:
            raise ConfigError(f"metrics.penalties.{k}: factor must lie in (0, 1]")
    for k in ("routes", "repeats"):
        if not isinstance(cfg["eval"][k], int) or cfg["eval"][k] < 1:
            raise ConfigError(f"eval.{k}: must be a positive integer")
    env_config(cfg)
    ppo_config(cfg)


def run_dir(cfg: dict) -> Path:
    if cfg["run"]["output_dir"]:
        return Path(cfg["run"]["output_dir"])
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / cfg["run"]["name"]


def dump(cfg: dict, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))
