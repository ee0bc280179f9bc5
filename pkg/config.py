"""Global settings and the experiment config layer (edit defaults here)."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from typing import Any, Dict, Iterable, Mapping

from errors import ConfigError

PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))

# ─── Paths ───────────────────────────────────────────────────────────
RUNS_ROOT = os.getenv("GLYPHDIFF_RUNS_ROOT", os.path.join(PROJECT_ROOT, "runs"))
DATA_DIR = os.path.join(PROJECT_ROOT, "data")

# Device for torch work: "cuda", "cpu" or "auto" (cuda when available)
DEVICE = os.getenv("GLYPHDIFF_DEVICE", "auto")

# ─── Dataset ─────────────────────────────────────────────────────────
IMAGE_SIZE = 32
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)
TOY_CLASSES = 5
TOY_PER_CLASS = 200

# ─── Noise schedule ──────────────────────────────────────────────────
SCHEDULE_KIND = "linear"
TIMESTEPS = 200          # desk scale; 1000 is the usual full-scale value
BETA_START = 1e-4
BETA_END = 0.02
VARIANCE = "posterior"   # "posterior" (σ̃²_t) or "beta"

# ─── Denoiser backbone ───────────────────────────────────────────────
BASE_CHANNELS = 64
CHANNEL_MULTIPLIERS = [1, 2, 4]
BLOCKS_PER_LEVEL = 2
SE_REDUCTION = 16
ATTENTION_HEADS = 4
DROPOUT = 0.1

# ─── Sampler ─────────────────────────────────────────────────────────
GUIDANCE_SCALE = 1.0
SAMPLE_METHOD = "ddpm"
SAMPLES_PER_CLASS = 200

# ─── Training (AdamW, lr 1e-4, batch 128, early stopping) ────────────
LEARNING_RATE = 1e-4
BATCH_SIZE = 128
MAX_EPOCHS = 50
EARLY_STOP_PATIENCE = 10
WEIGHT_DECAY = 0.01

# ─── Filtering / metrics ─────────────────────────────────────────────
FILTER_THRESHOLD = 0.90
FEATURE_LAYER = "penultimate"

SEED = 0


def default_config() -> Dict[str, Any]:
    """Nested ExperimentConfig defaults; section keys match dataclass fields."""
    return {
        "seed": SEED,
        "data": {
            "manifest": None,
            "image_size": IMAGE_SIZE,
            "fractions": list(SPLIT_FRACTIONS),
            "toy_classes": TOY_CLASSES,
            "toy_per_class": TOY_PER_CLASS,
            "train_per_class": None,
            "n_jobs": 1,
        },
        "schedule": {
            "kind": SCHEDULE_KIND,
            "T": TIMESTEPS,
            "beta_start": BETA_START,
            "beta_end": BETA_END,
            "variance": VARIANCE,
        },
        "backbone": {
            "base_channels": BASE_CHANNELS,
            "channel_multipliers": list(CHANNEL_MULTIPLIERS),
            "blocks_per_level": BLOCKS_PER_LEVEL,
            "embedding_dim": None,
            "se_reduction": SE_REDUCTION,
            "attention_heads": ATTENTION_HEADS,
            "dropout": DROPOUT,
            "attention_levels": [1, 2],
            "norm_groups": 8,
        },
        "sampler": {
            "steps": TIMESTEPS,
            "guidance_scale": GUIDANCE_SCALE,
            "method": SAMPLE_METHOD,
            "ddim_eta": 0.0,
            "clamp_each_step": False,
            "batch_size": 64,
            "per_class": SAMPLES_PER_CLASS,
        },
        "training": {
            "learning_rate": LEARNING_RATE,
            "batch_size": BATCH_SIZE,
            "max_epochs": MAX_EPOCHS,
            "early_stop_patience": EARLY_STOP_PATIENCE,
            "weight_decay": WEIGHT_DECAY,
            "ema_decay": None,
            "eval_every": 1,
            "lr_schedule": "constant",
            "num_workers": 0,
            "device": DEVICE,
            "precision": "float32",
        },
        "filter": {
            "threshold": FILTER_THRESHOLD,
            "require_argmax_match": False,
        },
        "metrics": {
            "extractor": None,
            "layer": FEATURE_LAYER,
        },
        "classifier": {
            "family": "residual",
            "depth_preset": "desk",
            "families": [],          # experiment: every listed family filters and retrains
        },
    }


def derive_seed(global_seed: int, stage: str) -> int:
    """Stage seed = first 8 bytes of sha256("<seed>:<stage>") mod 2**63."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


# ─────────────────────────────────────────────────────────────────────
def _coerce(value: Any, default: Any, key: str) -> Any:
    """Coerce *value* to the type of *default*; None defaults accept anything."""
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected bool, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{key}: expected int, got {value!r}")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{key}: expected float, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return list(value)
        raise ConfigError(f"{key}: expected list, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{key}: expected str, got {value!r}")
    return value


def _merge(base: Dict[str, Any], update: Mapping[str, Any], prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{dotted}: expected a section, got {value!r}")
            _merge(base[key], value, prefix=f"{dotted}.")
        else:
            base[key] = _coerce(value, base[key], dotted)


def _parse_override_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Any]:
    """Turn ``["training.batch_size=64", …]`` into a nested mapping."""
    nested: Dict[str, Any] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value: {pair!r}")
        dotted, raw = pair.split("=", 1)
        node = nested
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_override_value(raw)
    return nested


def resolve_config(
    file_cfg: Mapping[str, Any] | None = None,
    overrides: Iterable[str] = (),
) -> Dict[str, Any]:
    """Defaults ← config file ← dotted overrides; unknown keys raise ConfigError."""
    cfg = default_config()
    if file_cfg:
        _merge(cfg, file_cfg)
    _merge(cfg, parse_overrides(overrides))
    fractions = cfg["data"]["fractions"]
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"data.fractions must be 3 values summing to 1, got {fractions}")
    return cfg


def load_config_file(path: str | None) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def section(cfg: Mapping[str, Any], name: str) -> Dict[str, Any]:
    """Deep copy of one config section (safe to hand to a dataclass)."""
    return copy.deepcopy(dict(cfg[name]))
