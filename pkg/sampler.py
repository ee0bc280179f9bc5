"""Reverse-process generation with classifier guidance.

Reverse DDPM step (σ² = the schedule's reverse variance at t):
    ε̂ = ε_θ(x_t, t, y);  μ = posterior mean;  μ′ = μ + s·σ²·∇ log p(y | x_t);  x_{t-1} = μ′ + σ·z
DDIM step (η ∈ [0, 1]; guidance enters as ε̂′ = ε̂ − √(1−ᾱ_t)·s·∇ log p):
    x̂0 from ε̂′;  x_{t′} = √ᾱ_{t′}·x̂0 + √(1−ᾱ_{t′}−σ²)·ε̂′ + σ·z

Each sample owns a torch.Generator seeded from (run seed, sample index), so the
output of one sample never depends on batch size or on the other samples.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image
from tqdm import tqdm

from classifiers import guidance_log_prob_grad
from config import GUIDANCE_SCALE, SAMPLES_PER_CLASS, TIMESTEPS, derive_seed
from data_ingestion import load_image, to_uint8
from errors import (
    ClassOutOfRange,
    ManifestError,
    MissingFile,
    ParseError,
    ShapeMismatch,
    TimestepOrderError,
    TimestepOutOfRange,
)
from logger_setup import get_logger
from schedule import (
    NoiseSchedule,
    posterior_mean_from_x0,
    posterior_params,
    predict_x0_from_eps,
    respace,
)

log = get_logger(__name__)

Denoiser = Callable[..., torch.Tensor]   # (x_t, t, y) → ε̂
SIDECAR_NAME = "samples.jsonl"


@dataclass
class SyntheticSampleRecord:
    image: np.ndarray                   # (1, S, S) float32 in [-1, 1]
    intended_class: int
    guidance_scale: float
    steps: int
    seed: int
    method: str = "ddpm"
    sample_index: int = 0
    path: Optional[str] = None
    confidences: Dict[str, Tuple[int, float]] = field(default_factory=dict)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = TIMESTEPS
    guidance_scale: float = GUIDANCE_SCALE
    method: str = "ddpm"
    ddim_eta: float = 0.0
    clamp_each_step: bool = False
    batch_size: int = 64
    per_class: int = SAMPLES_PER_CLASS

    def validate(self, T: int) -> None:
        if not 1 <= self.steps <= T:
            raise ValueError(f"steps must be in [1, {T}], got {self.steps}")
        if self.guidance_scale < 0:
            raise ValueError(f"guidance_scale must be ≥ 0, got {self.guidance_scale}")
        if self.method not in ("ddpm", "ddim"):
            raise ValueError(f"method must be 'ddpm' or 'ddim', got {self.method!r}")
        if not 0.0 <= self.ddim_eta <= 1.0:
            raise ValueError(f"ddim_eta must be in [0, 1], got {self.ddim_eta}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be ≥ 1")

    def labels_for(self, class_count: int) -> List[int]:
        """per_class copies of every class, class-major."""
        return [c for c in range(class_count) for _ in range(self.per_class)]


# ─── single steps ────────────────────────────────────────────────────
def apply_guidance(mean: torch.Tensor, variance, grad: torch.Tensor, s: float) -> torch.Tensor:
    """μ + s·σ²·∇ log p(y | x_t)."""
    if grad.shape != mean.shape:
        raise ShapeMismatch(f"grad {tuple(grad.shape)} != mean {tuple(mean.shape)}")
    if s == 0:
        return mean
    return mean + s * variance * grad


def _check_t(t: int, T: int) -> None:
    if not 0 <= int(t) < T:
        raise TimestepOutOfRange(f"timestep {t} outside [0, {T})")


def ddpm_step(
    x_t: torch.Tensor,
    t: int,
    y,
    denoiser: Denoiser,
    guidance,
    sched: NoiseSchedule,
    s: float,
    noise: Optional[torch.Tensor],
    model_t: Optional[int] = None,
    clamp_x0: bool = False,
) -> torch.Tensor:
    """One guided ancestral step x_t → x_{t-1}.

    ``t`` indexes *sched*; ``model_t`` is the timestep handed to the networks
    (differs from t only for a respaced schedule).
    """
    _check_t(t, sched.T)
    mt = t if model_t is None else model_t
    eps = denoiser(x_t, mt, y)
    if clamp_x0:
        x0 = predict_x0_from_eps(x_t, eps, t, sched, clamp=True)
        mean = posterior_mean_from_x0(x0, x_t, t, sched)
        variance = float(sched.reverse_variances[t])
    else:
        mean, variance = posterior_params(x_t, eps, t, sched)

    if guidance is not None and s != 0 and variance > 0:
        grad = guidance_log_prob_grad(guidance, x_t, mt, y)
        mean = apply_guidance(mean, variance, grad, s)

    if t == 0:
        return mean
    if noise is None:
        raise ValueError(f"noise is required at t={t}")
    if noise.shape != x_t.shape:
        raise ShapeMismatch(f"noise {tuple(noise.shape)} != x_t {tuple(x_t.shape)}")
    return mean + math.sqrt(variance) * noise


def ddim_step(
    x_t: torch.Tensor,
    t_from: int,
    t_to: int,
    y,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    eta: float = 0.0,
    noise: Optional[torch.Tensor] = None,
    guidance=None,
    s: float = 0.0,
    clamp_x0: bool = False,
) -> torch.Tensor:
    """Jump x_{t_from} → x_{t_to}; ``t_to = -1`` lands on x̂0 (ᾱ := 1)."""
    if t_to >= t_from:
        raise TimestepOrderError(f"t_to ({t_to}) must be < t_from ({t_from})")
    _check_t(t_from, sched.T)
    if t_to < -1:
        raise TimestepOutOfRange(f"t_to {t_to} below -1")
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must be in [0, 1], got {eta}")

    eps = denoiser(x_t, t_from, y)
    ab_from = float(sched.alpha_bars[t_from])
    ab_to = float(sched.alpha_bars[t_to]) if t_to >= 0 else 1.0
    if guidance is not None and s != 0:
        grad = guidance_log_prob_grad(guidance, x_t, t_from, y)
        eps = eps - math.sqrt(1.0 - ab_from) * s * grad

    x0 = predict_x0_from_eps(x_t, eps, t_from, sched, clamp=clamp_x0)
    sigma = eta * math.sqrt((1.0 - ab_to) / (1.0 - ab_from)) * math.sqrt(1.0 - ab_from / ab_to)
    out = math.sqrt(ab_to) * x0 + math.sqrt(max(1.0 - ab_to - sigma**2, 0.0)) * eps
    if sigma > 0:
        if noise is None:
            raise ValueError("noise is required when eta > 0")
        out = out + sigma * noise
    return out


def step_sequence(T: int, steps: int) -> List[int]:
    """Uniformly strided timesteps, descending from T−1 to 0 (just T−1 when steps = 1)."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return [T - 1]
    return [int(v) for v in np.round(np.linspace(T - 1, 0, steps))]


# ─── batch generation ────────────────────────────────────────────────
def _param_like(*models) -> Tuple[torch.device, torch.dtype]:
    for m in models:
        if isinstance(m, torch.nn.Module):
            p = next(m.parameters(), None)
            if p is not None:
                return p.device, p.dtype
    return torch.device("cpu"), torch.float32


def _class_count(*models) -> Optional[int]:
    for m in models:
        cfg = getattr(m, "config", None)
        if cfg is not None and hasattr(cfg, "class_count"):
            return cfg.class_count
    return None


def generate(
    labels: Sequence[int],
    cfg: SamplerConfig,
    denoiser: Denoiser,
    guidance,
    sched: NoiseSchedule,
    seed: int,
    image_size: Optional[int] = None,
    trace: Optional[List[int]] = None,
    progress: bool = True,
) -> List[SyntheticSampleRecord]:
    """Sample one image per label; deterministic given *seed*."""
    cfg.validate(sched.T)
    k = _class_count(denoiser, guidance)
    bad = [y for y in labels if y < 0 or (k is not None and y >= k)]
    if bad:
        raise ClassOutOfRange(f"labels outside [0, {k}): {sorted(set(bad))}")
    if image_size is None:
        image_size = getattr(getattr(denoiser, "config", None), "image_size", None)
    if image_size is None:
        raise ValueError("image_size is required for a denoiser without a config")

    for m in (denoiser, guidance):
        if isinstance(m, torch.nn.Module):
            m.eval()
    device, dtype = _param_like(denoiser, guidance)
    shape = (1, image_size, image_size)
    s = cfg.guidance_scale

    seq = step_sequence(sched.T, cfg.steps)
    ascending = sorted(seq)
    ddpm_sched = sched if len(ascending) == sched.T else respace(sched, ascending)

    records: List[SyntheticSampleRecord] = []
    starts = range(0, len(labels), cfg.batch_size)
    for start in tqdm(starts, desc="sampling", disable=not progress):
        idx = list(range(start, min(start + cfg.batch_size, len(labels))))
        gens = [torch.Generator().manual_seed(derive_seed(seed, f"sample:{i}")) for i in idx]

        def draw() -> torch.Tensor:
            return torch.stack([torch.randn(shape, generator=g) for g in gens]).to(device, dtype)

        x = draw()
        y = torch.tensor([labels[i] for i in idx], dtype=torch.long, device=device)
        with torch.no_grad():
            if cfg.method == "ddpm":
                for i in reversed(range(len(ascending))):
                    model_t = ascending[i]
                    if trace is not None and start == 0:
                        trace.append(model_t)
                    noise = draw() if i > 0 else None
                    x = ddpm_step(x, i, y, denoiser, guidance, ddpm_sched, s, noise,
                                  model_t=model_t, clamp_x0=cfg.clamp_each_step)
            else:
                targets = seq[1:] + [-1]
                for t_from, t_to in zip(seq, targets):
                    if trace is not None and start == 0:
                        trace.append(t_from)
                    noise = draw() if cfg.ddim_eta > 0 and t_to >= 0 else None
                    x = ddim_step(x, t_from, t_to, y, denoiser, sched, cfg.ddim_eta, noise,
                                  guidance, s, clamp_x0=cfg.clamp_each_step)

        images = x.clamp(-1.0, 1.0).float().cpu().numpy()
        for j, i in enumerate(idx):
            records.append(SyntheticSampleRecord(
                image=images[j], intended_class=int(labels[i]), guidance_scale=float(s),
                steps=cfg.steps, seed=seed, method=cfg.method, sample_index=i,
            ))
    log.info("Generated %d samples (%s, %d steps, s=%.2f)", len(records), cfg.method, cfg.steps, s)
    return records


# ─── on-disk samples ─────────────────────────────────────────────────
def record_to_dict(rec: SyntheticSampleRecord) -> Dict[str, object]:
    """Every field except the pixels."""
    return {f.name: getattr(rec, f.name) for f in fields(rec) if f.name != "image"}


def _sidecar_row(rec: SyntheticSampleRecord, base: str) -> Dict[str, object]:
    row = record_to_dict(rec)
    row["path"] = os.path.relpath(rec.path, base).replace(os.sep, "/")
    confidences = row.pop("confidences")
    if confidences:
        row["confidences"] = {k: [int(p), float(c)] for k, (p, c) in confidences.items()}
    return row


def write_sidecar(records: Sequence[SyntheticSampleRecord], path: str) -> str:
    """JSON-lines listing of saved samples; paths relative to the sidecar."""
    base = os.path.dirname(os.path.abspath(path))
    os.makedirs(base, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            if rec.path is None:
                raise ValueError(f"sample {rec.sample_index} has no image path")
            fh.write(json.dumps(_sidecar_row(rec, base)) + "\n")
    return path


def save_samples(
    records: Sequence[SyntheticSampleRecord], out_dir: str, sidecar_name: str = SIDECAR_NAME
) -> Tuple[List[SyntheticSampleRecord], str]:
    """Write 8-bit PNGs plus a sidecar; returns records carrying their paths."""
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    saved = []
    for rec in records:
        fname = f"sample_{rec.sample_index:06d}_c{rec.intended_class}.png"
        path = os.path.abspath(os.path.join(img_dir, fname))
        Image.fromarray(to_uint8(rec.image)).save(path)
        saved.append(replace(rec, path=path))
    sidecar = write_sidecar(saved, os.path.join(out_dir, sidecar_name))
    log.info("Samples written ➜ %s  (%d images)", sidecar, len(saved))
    return saved, sidecar


def load_samples(sidecar: str, image_size: int = 32) -> List[SyntheticSampleRecord]:
    """Read a sidecar back; a missing file or image raises MissingFile, a bad row ParseError."""
    if not os.path.isfile(sidecar):
        raise MissingFile(f"sample sidecar not found: {sidecar}")
    base = os.path.dirname(os.path.abspath(sidecar))
    records = []
    try:
        with open(sidecar, encoding="utf-8") as fh:
            lines = fh.readlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"{sidecar}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            path = os.path.normpath(os.path.join(base, row["path"]))
            meta = dict(
                intended_class=int(row["intended_class"]),
                guidance_scale=float(row["guidance_scale"]),
                steps=int(row["steps"]),
                seed=int(row["seed"]),
                method=row.get("method", "ddpm"),
                sample_index=int(row.get("sample_index", len(records))),
                confidences={k: (int(v[0]), float(v[1])) for k, v in row.get("confidences", {}).items()},
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise ParseError(lineno, f"{sidecar}: bad sample row ({exc!r})") from exc
        records.append(SyntheticSampleRecord(image=load_image(path, image_size), path=path, **meta))
    return records


def save_sample_grid(records: Sequence[SyntheticSampleRecord], path: str, per_class: int = 8) -> str:
    """One row per class, up to *per_class* samples each."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    classes = sorted({r.intended_class for r in records})
    if not classes:
        return path
    rows = {c: [r for r in records if r.intended_class == c][:per_class] for c in classes}
    fig, axes = plt.subplots(len(classes), per_class, figsize=(per_class, len(classes)), squeeze=False)
    for row, c in enumerate(classes):
        for col in range(per_class):
            ax = axes[row][col]
            ax.axis("off")
            if col < len(rows[c]):
                ax.imshow(to_uint8(rows[c][col].image), cmap="gray", vmin=0, vmax=255)
        axes[row][0].set_title(f"class {c}", fontsize=6, loc="left")
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
