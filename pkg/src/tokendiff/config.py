"""Config-file-first run configuration with dotted CLI overrides.

A run is reproducible from one JSON document plus one root seed; every
random stream derives from (seed, stream-label), so adding a consumer
never perturbs the others. Unknown keys are hard errors.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .denoiser import DenoiserConfig, LoraConfig
from .errors import ConfigError
from .rngtools import derive_rng
from .schedule import ScheduleConfig
from .trainer import TrainConfig

DEFAULT_CONFIG = {
    "seed": 11,
    "task": {
        "C": 4, "K": 8, "D": 4,
        "peak": 0.75, "trans_peak": None, "jitter": 0.10, "min_pairwise_tv": 0.3,
    },
    "schedule": {
        "T": 10, "terminal_mask_mass": 0.9, "terminal_uniform_mass": 0.0999,
    },
    "model": {
        "d_model": 64, "n_layers": 2, "n_heads": 4, "d_cond": 64,
    },
    "data": {
        "n_train": 20000, "n_val": 2000,
    },
    "train": {
        "phase": "pretrain", "epochs": 40, "batch_size": 32,
        "learning_rate": 1e-3, "lr_schedule": "cosine", "weight_decay": 0.0,
        "lambda": 0.0, "n_negatives": 0, "clamp_negative_at": None,
        "lora": {"r": 8, "alpha": 16.0, "targets": ["wq", "wk", "wv", "wp"]},
    },
    "ablation": {
        "shift_weight": 0.5, "n_train": 4000, "epochs": 8,
        "learning_rate": 1e-3, "lambda": 5e-5, "n_negatives": 10,
        "n_eval_per_condition": 2000,
    },
    "eval": {
        "n_per_condition": 20000, "chunk": 4096, "kid_seed": 0,
    },
    "sample": {
        "chunk": 4096,
    },
}


def _check_keys(doc, template, path=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in template:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(template[key], dict) and template[key]:
            _check_keys(value, template[key], here)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None) -> dict:
    """Defaults merged under the file's values; unknown keys are fatal."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from exc
    _check_keys(doc, DEFAULT_CONFIG)
    return _merge(DEFAULT_CONFIG, doc)


def _coerce(raw: str, template_value):
    if template_value is None or isinstance(template_value, (dict, list)):
        # JSON for structured or untyped slots ("null" stays None)
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"override value {raw!r} is not valid JSON") from exc
    if isinstance(template_value, bool):
        if raw.lower() in ("true", "1"):
            return True
        if raw.lower() in ("false", "0"):
            return False
        raise ConfigError(f"expected boolean, got {raw!r}")
    if isinstance(template_value, int):
        return int(raw)
    if isinstance(template_value, float):
        return float(raw)
    return raw


def apply_overrides(config: dict, pairs: list[str]) -> dict:
    """Apply repeatable --set key.path=value entries with type coercion."""
    config = copy.deepcopy(config)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        dotted, raw = pair.split("=", 1)
        keys = dotted.split(".")
        node = config
        template = DEFAULT_CONFIG
        for key in keys[:-1]:
            if not isinstance(template, dict) or key not in template:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node.setdefault(key, {})
            template = template[key]
        leaf = keys[-1]
        if not isinstance(template, dict) or leaf not in template:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = _coerce(raw, template[leaf])
    return config


def sub_seed(root_seed: int, label: str) -> int:
    """Stable per-stream integer seed derived from the root seed."""
    return int(derive_rng(root_seed, label).integers(0, 2**63 - 1))


# ----- constructors ----------------------------------------------------------


def schedule_config(config: dict) -> ScheduleConfig:
    sec = config["schedule"]
    return ScheduleConfig(
        K=config["task"]["K"], T=sec["T"],
        terminal_mask_mass=sec["terminal_mask_mass"],
        terminal_uniform_mass=sec["terminal_uniform_mass"],
    )


def model_config(config: dict) -> DenoiserConfig:
    task, mdl = config["task"], config["model"]
    return DenoiserConfig(
        K=task["K"], T=config["schedule"]["T"], D=task["D"], n_conditions=task["C"],
        d_model=mdl["d_model"], n_layers=mdl["n_layers"], n_heads=mdl["n_heads"],
        d_cond=mdl["d_cond"],
    )


def lora_config(config: dict) -> LoraConfig:
    doc = config["train"]["lora"]
    if doc is None:
        raise ConfigError("train.lora is null but a lora config is required")
    return LoraConfig(r=doc["r"], alpha=doc["alpha"], targets=tuple(doc["targets"]))


def train_config(config: dict, phase=None, **overrides) -> TrainConfig:
    sec = dict(config["train"])
    sec.update(overrides)
    phase = phase or sec["phase"]
    lora = lora_config(config) if str(phase).startswith("finetune") else None
    cfg = TrainConfig(
        phase=phase,
        epochs=sec["epochs"],
        batch_size=sec["batch_size"],
        learning_rate=sec["learning_rate"],
        lr_schedule=sec["lr_schedule"],
        weight_decay=sec["weight_decay"],
        lam=sec["lambda"],
        n_negatives=sec["n_negatives"],
        seed=config["seed"],
        lora=lora,
        clamp_negative_at=sec["clamp_negative_at"],
    )
    cfg.validate()
    return cfg
