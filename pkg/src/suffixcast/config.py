"""Hyperparameter settings and run configuration.

The three canned settings differ in depth, optimizer, assumed noise
distribution for continuous attributes, and which features the decoder
consumes/predicts. Any field can be overridden from the run config.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

TIME_FEATURES = ("case_elapsed", "event_elapsed", "day_of_week", "time_of_day")

NORMAL = "normal"
LOG_NORMAL = "log-normal"


@dataclass(frozen=True)
class HyperparameterSetting:
    id: int
    layers: int                 # LSTM layers in encoder and in decoder
    hidden: int
    optimizer: str              # "adam" | "adamw"
    epochs: int
    decoder_features: str       # "all" | "activity_time"
    distribution: str           # noise assumed for continuous attributes
    fc_layers: int = 1
    dropout: float = 0.1
    weight_decay: float = 1e-4


SETTINGS: dict[int, HyperparameterSetting] = {
    1: HyperparameterSetting(1, layers=2, hidden=128, optimizer="adam", epochs=200,
                             decoder_features="all", distribution=NORMAL),
    2: HyperparameterSetting(2, layers=4, hidden=128, optimizer="adamw", epochs=100,
                             decoder_features="activity_time", distribution=NORMAL),
    3: HyperparameterSetting(3, layers=4, hidden=128, optimizer="adamw", epochs=100,
                             decoder_features="activity_time", distribution=LOG_NORMAL),
}

_SETTING_FIELDS = {"layers", "hidden", "optimizer", "epochs", "decoder_features",
                   "distribution", "fc_layers", "dropout", "weight_decay"}


def resolve_setting(setting_id: int, overrides: dict[str, Any] | None = None) -> HyperparameterSetting:
    if setting_id not in SETTINGS:
        raise ConfigError(f"unknown setting id {setting_id}; valid: 1, 2, 3")
    base = SETTINGS[setting_id]
    if not overrides:
        return base
    bad = set(overrides) - _SETTING_FIELDS
    if bad:
        raise ConfigError(f"unknown setting override(s): {sorted(bad)}; "
                          f"valid: {sorted(_SETTING_FIELDS)}")
    values = {f: getattr(base, f) for f in _SETTING_FIELDS}
    values.update(overrides)
    return HyperparameterSetting(id=setting_id, **values)


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 7,
    "out_dir": "runs/default",
    "threads": 1,
    "dataset": {
        "csv": None,
        "case_col": "case_id",
        "activity_col": "activity",
        "timestamp_col": "timestamp",
        "timestamp_format": "%Y-%m-%d %H:%M:%S.%f",
        "categorical": [],
        "continuous": [],
        "report_time_unit": "days",
    },
    "split": {"ratios": [0.65, 0.15, 0.20]},
    "setting": {"id": 1, "overrides": {}},
    "train": {
        "epochs": None,            # None: take the setting's default
        "batch_size": 128,
        "learning_rate": 1e-4,
        "seq_window": 5,
        "tf_start": 0.8,
        "tf_decay_start": 0.2,
        "t_mc": 10,
        "gradnorm_alpha": 1.5,
        "gradnorm_lr": 0.025,
        "clip_norm": 5.0,
        "checkpoint_every": 25,
    },
    "sample": {
        "t": 1000,
        "m": None,                 # None: pad_length
        "p": 0.1,
        "decoder_dropout_mode": "naive",
        "n_prefixes": None,        # sample command: cap on dumped prefixes
    },
    "eval": {"bins": 20, "svg": True, "t": None, "m": None},
    "synth": None,                 # ProcessSpec JSON; None: default spec
}

ENV_OUT_DIR = "SUFFIXCAST_OUT_DIR"


def _merge(base: dict, update: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    """Load a JSON config, apply --set overrides, and resolve defaults."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if "synth" in user and user["synth"] is not None:
            synth_cfg = user.pop("synth")
            cfg = _merge(cfg, user)
            cfg["synth"] = synth_cfg
        else:
            cfg = _merge(cfg, user)
    for item in overrides or []:
        cfg = apply_override(cfg, item)
    env_out = os.environ.get(ENV_OUT_DIR)
    if env_out:
        cfg["out_dir"] = env_out
    return cfg


def apply_override(cfg: dict, item: str) -> dict:
    """Apply one ``--set dotted.key=value`` override; values parse as JSON
    first and fall back to strings."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, _, raw = item.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    out = copy.deepcopy(cfg)
    node = out
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node and not (parts[0] == "synth"):
        raise ConfigError(f"unknown config key {key!r}")
    node[leaf] = value
    return out


def echo_config(cfg: dict, out_dir: Path, command: str) -> Path:
    """Write the fully-resolved config next to the run outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"config.{command}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
