"""Checkpoint archive shared by every model kind.

One joblib file per model:
    schema_version  int (major; other majors are rejected)
    kind            "denoiser" | "guidance" | "downstream"
    config          flat "key=<json value>" text block, one key per line
    weights         {hierarchical name: numpy array}  (dtype/shape carried by the array)
    schedule        NoiseSchedule.to_state() for diffusion kinds, else None
    extra           free-form metadata (seed, run log summary, …)
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import joblib
import torch
from torch import nn

from backbone import BackboneConfig, SEUNet, count_parameters
from classifiers import DownstreamModelSpec, GuidanceClassifier, FULL_ARCHITECTURES, build_downstream
from errors import CheckpointError
from logger_setup import get_logger
from schedule import NoiseSchedule

log = get_logger(__name__)

SCHEMA_VERSION = 1
KINDS = ("denoiser", "guidance", "downstream")


@dataclass
class LoadedCheckpoint:
    model: nn.Module
    kind: str
    config: Dict[str, Any]
    schedule: Optional[NoiseSchedule] = None
    extra: Dict[str, Any] = field(default_factory=dict)


def config_block(config: Dict[str, Any]) -> str:
    return "\n".join(f"{k}={json.dumps(config[k])}" for k in sorted(config))


def parse_config_block(text: str) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "=" not in line:
            raise CheckpointError(f"config block line {lineno} has no '='")
        key, value = line.split("=", 1)
        out[key] = json.loads(value)
    return out


def _model_config(model: nn.Module, kind: str) -> Dict[str, Any]:
    if kind in ("denoiser", "guidance"):
        return model.config.to_dict()
    return model.spec.to_dict()


def save_checkpoint(
    path: str,
    model: nn.Module,
    kind: str,
    schedule: Optional[NoiseSchedule] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": config_block(_model_config(model, kind)),
        "weights": {n: t.detach().cpu().numpy() for n, t in model.state_dict().items()},
        "schedule": schedule.to_state() if schedule is not None else None,
        "extra": extra or {},
    }
    joblib.dump(payload, path, compress=3)
    log.info("Checkpoint saved ➜ %s  (%s, %d params)", path, kind, count_parameters(model))
    return path


def load_checkpoint(path: str, device: str | torch.device = "cpu") -> LoadedCheckpoint:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = joblib.load(path)
    except Exception as exc:  # joblib surfaces pickle/zlib errors of many types
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    if int(payload["schema_version"]) != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: schema version {payload['schema_version']} != {SCHEMA_VERSION}"
        )

    kind = payload["kind"]
    cfg = parse_config_block(payload["config"])
    if kind == "denoiser":
        model: nn.Module = SEUNet(BackboneConfig.from_dict(cfg))
    elif kind == "guidance":
        model = GuidanceClassifier(BackboneConfig.from_dict(cfg), zero_head=False)
    elif kind == "downstream":
        model = build_downstream(DownstreamModelSpec(**cfg))
    else:
        raise CheckpointError(f"{path}: unknown kind {kind!r}")

    weights = payload["weights"]
    sample = next(iter(weights.values()), None)
    if sample is not None and sample.dtype.kind == "f":
        model = model.to(dtype=torch.from_numpy(sample[:0]).dtype)
    try:
        model.load_state_dict({k: torch.from_numpy(v) for k, v in weights.items()})
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not match the stored config ({exc})") from exc
    model.to(device).eval()

    schedule = NoiseSchedule.from_state(payload["schedule"]) if payload.get("schedule") else None
    return LoadedCheckpoint(model, kind, cfg, schedule, payload.get("extra", {}))


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_model_card(path: str, model: nn.Module, seed: int, manifest_path: Optional[str]) -> str:
    spec: DownstreamModelSpec = model.spec
    lines = [
        f"family: {spec.family}",
        f"preset: {spec.depth_preset}",
        f"stands_in_for: {FULL_ARCHITECTURES[spec.family]}",
        f"class_count: {spec.class_count}",
        f"input_size: {spec.input_size}",
        f"seed: {seed}",
        f"parameters: {count_parameters(model)}",
        f"training_manifest_sha256: {file_sha256(manifest_path) if manifest_path else 'n/a'}",
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
