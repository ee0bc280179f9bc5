"""Closed-form diffusion maths: noise schedules, q(x_t | x_0) and the reverse posterior.

Timesteps are 0-indexed; ᾱ_{-1} := 1, so the posterior variance at t = 0 is 0.
All functions are pure and work on any tensor shape ``(…, C, H, W)``; ``t`` may
be a Python int or a LongTensor with one entry per leading batch element.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np
import torch

from config import BETA_END, BETA_START, SCHEDULE_KIND, TIMESTEPS, VARIANCE
from errors import (
    InvalidRange,
    NonPositiveT,
    ScheduleChecksumError,
    ShapeMismatch,
    TimestepOutOfRange,
)

COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    variance: str = VARIANCE
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    alpha_bars_prev: np.ndarray = field(init=False, repr=False)
    posterior_variances: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = _readonly(self.betas)
        object.__setattr__(self, "betas", betas)
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        object.__setattr__(self, "alphas", _readonly(alphas))
        object.__setattr__(self, "alpha_bars", _readonly(alpha_bars))
        object.__setattr__(self, "alpha_bars_prev", _readonly(alpha_bars_prev))
        object.__setattr__(
            self,
            "posterior_variances",
            _readonly(betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)),
        )

    @property
    def reverse_variances(self) -> np.ndarray:
        """σ²_t used by the reverse step (posterior σ̃²_t, or β_t with 0 at t = 0)."""
        if self.variance == "beta":
            out = self.betas.copy()
            out[0] = 0.0
            return out
        return self.posterior_variances

    @property
    def snr(self) -> np.ndarray:
        return self.alpha_bars / (1.0 - self.alpha_bars)

    def betas_checksum(self) -> str:
        return hashlib.sha256(self.betas.tobytes()).hexdigest()

    def to_state(self) -> Dict[str, object]:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "variance": self.variance,
            "betas_sha256": self.betas_checksum(),
        }

    @classmethod
    def from_state(cls, state: Dict[str, object]) -> "NoiseSchedule":
        sched = make_schedule(
            str(state["kind"]), int(state["T"]), float(state["beta_start"]),
            float(state["beta_end"]), variance=str(state.get("variance", VARIANCE)),
        )
        expected = state.get("betas_sha256")
        if expected is not None and expected != sched.betas_checksum():
            raise ScheduleChecksumError("stored betas checksum does not match the recomputed schedule")
        return sched


def make_schedule(
    kind: str = SCHEDULE_KIND,
    T: int = TIMESTEPS,
    beta_start: float = BETA_START,
    beta_end: float = BETA_END,
    variance: str = VARIANCE,
) -> NoiseSchedule:
    if T < 1:
        raise NonPositiveT(f"T must be ≥ 1, got {T}")
    if variance not in ("posterior", "beta"):
        raise InvalidRange(f"variance must be 'posterior' or 'beta', got {variance!r}")

    if kind == "linear":
        if not 0.0 < beta_start <= beta_end < 1.0:
            raise InvalidRange(f"need 0 < beta_start ≤ beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math.pi / 2) ** 2
        alpha_bar = f / f[0]
        betas = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-12, COSINE_MAX_BETA)
    else:
        raise InvalidRange(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(kind, T, float(beta_start), float(beta_end), betas, variance)


def respace(sched: NoiseSchedule, timesteps: Sequence[int]) -> NoiseSchedule:
    """Schedule over an increasing sub-sequence of timesteps (strided sampling).

    Index i of the result corresponds to original timestep ``timesteps[i]`` and
    keeps its ᾱ; betas are re-derived as 1 − ᾱ_i / ᾱ_{i-1}.
    """
    ts = list(timesteps)
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise InvalidRange("respaced timesteps must be strictly increasing")
    for t in ts:
        _check_t(t, sched.T)
    ab = sched.alpha_bars[ts]
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / ab_prev
    return NoiseSchedule("respaced", len(ts), sched.beta_start, sched.beta_end, betas, sched.variance)


# ─── helpers ─────────────────────────────────────────────────────────
def _check_t(t, T: int) -> None:
    if isinstance(t, torch.Tensor):
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= T):
            raise TimestepOutOfRange(f"timestep outside [0, {T}): {t.tolist()}")
    elif not 0 <= int(t) < T:
        raise TimestepOutOfRange(f"timestep {t} outside [0, {T})")


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {tuple(a.shape)} != {tuple(b.shape)}")


def _coef(arr: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather arr[t] as a tensor broadcastable against *like*."""
    table = torch.as_tensor(arr, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        vals = table[t.to(like.device).long()]
        return vals.reshape(-1, *([1] * (like.ndim - 1)))
    return table[int(t)]


# ─── forward process ─────────────────────────────────────────────────
def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε."""
    _check_shapes(x0, eps)
    _check_t(t, sched.T)
    ab = _coef(sched.alpha_bars, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def q_step(x_prev: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single forward kernel x_t = √α_t · x_{t-1} + √β_t · ε."""
    _check_shapes(x_prev, eps)
    _check_t(t, sched.T)
    a = _coef(sched.alphas, t, x_prev)
    b = _coef(sched.betas, t, x_prev)
    return a.sqrt() * x_prev + b.sqrt() * eps


# ─── reverse process ─────────────────────────────────────────────────
def posterior_params(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule
) -> Tuple[torch.Tensor, torch.Tensor | float]:
    """μ = (x_t − β_t/√(1−ᾱ_t) · ε̂) / √α_t and the reverse variance σ²_t."""
    _check_shapes(x_t, eps_hat)
    _check_t(t, sched.T)
    a = _coef(sched.alphas, t, x_t)
    b = _coef(sched.betas, t, x_t)
    ab = _coef(sched.alpha_bars, t, x_t)
    mean = (x_t - b / (1.0 - ab).sqrt() * eps_hat) / a.sqrt()
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        return mean, _coef(sched.reverse_variances, t, x_t)
    return mean, float(sched.reverse_variances[int(t)])


def posterior_mean_from_x0(
    x0: torch.Tensor, x_t: torch.Tensor, t, sched: NoiseSchedule
) -> torch.Tensor:
    """μ̃ = (√ᾱ_{t-1} β_t · x0 + √α_t (1 − ᾱ_{t-1}) · x_t) / (1 − ᾱ_t)."""
    _check_shapes(x0, x_t)
    _check_t(t, sched.T)
    a = _coef(sched.alphas, t, x_t)
    b = _coef(sched.betas, t, x_t)
    ab = _coef(sched.alpha_bars, t, x_t)
    ab_prev = _coef(sched.alpha_bars_prev, t, x_t)
    return (ab_prev.sqrt() * b * x0 + a.sqrt() * (1.0 - ab_prev) * x_t) / (1.0 - ab)


def predict_x0_from_eps(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t, sched: NoiseSchedule, clamp: bool = False
) -> torch.Tensor:
    """x̂0 = (x_t − √(1−ᾱ_t) · ε̂) / √ᾱ_t, optionally clamped to [-1, 1]."""
    _check_shapes(x_t, eps_hat)
    _check_t(t, sched.T)
    ab = _coef(sched.alpha_bars, t, x_t)
    x0 = (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    return x0.clamp(-1.0, 1.0) if clamp else x0
