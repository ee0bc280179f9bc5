"""Classification reports and Fréchet distances between feature distributions.

• ``classification_report`` – accuracy, macro precision / recall / F1 and the
  confusion matrix (scikit-learn, undefined per-class rates count as 0 and are
  flagged).
• ``frechet_distance`` – d² = ‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2}); the trace
  term comes from the eigenvalues of Σ₁Σ₂ (real and ≥ 0 for PSD inputs).
• ``extract_features`` – activations of a named layer via a forward hook.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
import torch
import torch.nn.functional as F
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
from torch import nn

from config import FEATURE_LAYER
from errors import (
    ClassOutOfRange,
    DimensionMismatch,
    LengthMismatch,
    NonPSDProduct,
    ShapeMismatch,
    TooFewSamples,
    UnknownLayer,
)
from logger_setup import get_logger

log = get_logger(__name__)

EIGEN_TOLERANCE = 1e-8


# ─── classification ──────────────────────────────────────────────────
@dataclass
class EvalReport:
    loss: Optional[float]
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    confusion: np.ndarray
    support: np.ndarray
    zero_predicted: List[int] = field(default_factory=list)
    zero_support: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "f1_macro": self.f1_macro,
            "confusion": self.confusion.tolist(),
            "support": self.support.tolist(),
            "zero_predicted": list(self.zero_predicted),
            "zero_support": list(self.zero_support),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "EvalReport":
        return cls(
            loss=d.get("loss"),
            accuracy=float(d["accuracy"]),
            precision_macro=float(d["precision_macro"]),
            recall_macro=float(d["recall_macro"]),
            f1_macro=float(d["f1_macro"]),
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            support=np.asarray(d["support"], dtype=np.int64),
            zero_predicted=list(d.get("zero_predicted", [])),
            zero_support=list(d.get("zero_support", [])),
        )


def classification_report(
    predictions: Sequence[int], labels: Sequence[int], K: int, loss: Optional[float] = None
) -> EvalReport:
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if len(pred) != len(true):
        raise LengthMismatch(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise LengthMismatch("cannot score an empty prediction set")
    for name, arr in (("prediction", pred), ("label", true)):
        if arr.min() < 0 or arr.max() >= K:
            raise ClassOutOfRange(f"{name} outside [0, {K}): {sorted(set(arr[(arr < 0) | (arr >= K)].tolist()))}")

    classes = list(range(K))
    cm = confusion_matrix(true, pred, labels=classes)
    precision, recall, f1, support = precision_recall_fscore_support(
        true, pred, labels=classes, average=None, zero_division=0
    )
    predicted_counts = cm.sum(axis=0)
    return EvalReport(
        loss=None if loss is None else float(loss),
        accuracy=float(np.trace(cm) / cm.sum()),
        precision_macro=float(np.mean(precision)),
        recall_macro=float(np.mean(recall)),
        f1_macro=float(np.mean(f1)),
        confusion=cm.astype(np.int64),
        support=np.asarray(support, dtype=np.int64),
        zero_predicted=[c for c in classes if predicted_counts[c] == 0],
        zero_support=[c for c in classes if support[c] == 0],
    )


# ─── Fréchet statistics ──────────────────────────────────────────────
@dataclass(frozen=True)
class FrechetStats:
    mean: np.ndarray
    covariance: np.ndarray
    count: int
    extractor_id: str = "unknown"

    def __post_init__(self):
        if self.count < 2:
            raise TooFewSamples(f"need at least 2 samples for a covariance, got {self.count}")
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "mean", np.atleast_1d(np.asarray(self.mean, dtype=np.float64)))
        if cov.shape != (self.dim, self.dim):
            raise DimensionMismatch(f"covariance {cov.shape} does not match mean ({self.dim},)")
        scale = max(1.0, float(np.abs(cov).max(initial=0.0)))
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-9 * scale):
            raise ValueError("covariance is not symmetric")

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def from_features(cls, features: np.ndarray, extractor_id: str = "unknown") -> "FrechetStats":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2:
            raise ShapeMismatch(f"features must be (count, D), got {feats.shape}")
        if len(feats) < 2:
            raise TooFewSamples(f"need at least 2 samples, got {len(feats)}")
        cov = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
        return cls(feats.mean(axis=0), cov, len(feats), extractor_id)


class StatsAccumulator:
    """Mergeable (count, Σx, Σxxᵀ) sums; merging is exact addition."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.total = np.zeros(dim, dtype=np.float64)
        self.outer = np.zeros((dim, dim), dtype=np.float64)

    def update(self, features: np.ndarray) -> "StatsAccumulator":
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.dim:
            raise DimensionMismatch(f"expected (n, {self.dim}) features, got {feats.shape}")
        self.count += len(feats)
        self.total += feats.sum(axis=0)
        self.outer += feats.T @ feats
        return self

    def merge(self, other: "StatsAccumulator") -> "StatsAccumulator":
        if other.dim != self.dim:
            raise DimensionMismatch(f"cannot merge D={other.dim} into D={self.dim}")
        out = StatsAccumulator(self.dim)
        out.count = self.count + other.count
        out.total = self.total + other.total
        out.outer = self.outer + other.outer
        return out

    def to_stats(self, extractor_id: str = "unknown") -> FrechetStats:
        if self.count < 2:
            raise TooFewSamples(f"need at least 2 samples, got {self.count}")
        mean = self.total / self.count
        cov = (self.outer - self.count * np.outer(mean, mean)) / (self.count - 1)
        return FrechetStats(mean, (cov + cov.T) / 2.0, self.count, extractor_id)


def frechet_distance(a: FrechetStats, b: FrechetStats) -> float:
    """Squared Fréchet distance between two Gaussian fits (the usual 'FID' number)."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"D={a.dim} vs D={b.dim}")
    diff = a.mean - b.mean
    eig = scipy.linalg.eigvals(a.covariance @ b.covariance)
    lam = eig.real
    scale = max(1.0, float(np.abs(eig).max(initial=0.0)))
    if np.abs(eig.imag).max(initial=0.0) > 1e-6 * scale:
        log.warning("Σ₁Σ₂ has complex eigenvalues (max imag %.3g); using real parts",
                    float(np.abs(eig.imag).max()))
    tol = EIGEN_TOLERANCE * scale
    if lam.min(initial=0.0) < -tol:
        raise NonPSDProduct(f"Σ₁Σ₂ has eigenvalue {lam.min():.3g} below −{tol:.1g}")
    negative = lam < 0
    if negative.any():
        log.warning("Clamped %d round-off negative eigenvalue(s) of Σ₁Σ₂ to 0", int(negative.sum()))
        lam = np.where(negative, 0.0, lam)
    d2 = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.sqrt(lam).sum())
    if d2 < 0:
        log.warning("Fréchet d² = %.3g < 0 from round-off; clamped to 0", d2)
        d2 = 0.0
    return d2


# ─── feature extraction ──────────────────────────────────────────────
def _resolve_layer(model: nn.Module, layer: str) -> nn.Module:
    try:
        return model.get_submodule(layer)
    except AttributeError as exc:
        raise UnknownLayer(f"{type(model).__name__} has no layer {layer!r}") from exc


def extract_features(
    images, model: nn.Module, layer: str = FEATURE_LAYER, batch_size: int = 256
) -> np.ndarray:
    """Row i = flattened output of *layer* for image i (eval mode, float64)."""
    target = _resolve_layer(model, layer)
    x_all = torch.as_tensor(np.asarray(images))
    if x_all.ndim == 3:
        x_all = x_all[:, None]
    size = getattr(getattr(model, "spec", None), "input_size", None)
    if x_all.ndim != 4 or x_all.shape[1] != 1 or (size is not None and tuple(x_all.shape[-2:]) != (size, size)):
        raise ShapeMismatch(f"expected (N, 1, {size}, {size}) images, got {tuple(x_all.shape)}")

    captured: List[torch.Tensor] = []
    handle = target.register_forward_hook(lambda _m, _i, out: captured.append(out.detach().flatten(1)))
    p = next(model.parameters())
    model.eval()
    try:
        with torch.no_grad():
            for lo in range(0, len(x_all), batch_size):
                model(x_all[lo: lo + batch_size].to(device=p.device, dtype=p.dtype))
    finally:
        handle.remove()
    if not captured:
        return np.zeros((0, 0), dtype=np.float64)
    return torch.cat(captured).double().cpu().numpy()


def layer_width(model: nn.Module, layer: str = FEATURE_LAYER, image_size: int = 32) -> int:
    """Feature width of *layer*, found by one forward pass on a blank image."""
    return extract_features(np.zeros((1, 1, image_size, image_size), np.float32), model, layer).shape[1]


def feature_stats(
    images,
    extractor: nn.Module,
    layer: str = FEATURE_LAYER,
    extractor_id: str = "unknown",
    batch_size: int = 256,
) -> FrechetStats:
    """Gaussian fit of *layer* features, accumulated one batch at a time."""
    images = np.asarray(images)
    acc = StatsAccumulator(layer_width(extractor, layer, images.shape[-1]))
    for lo in range(0, len(images), batch_size):
        acc.update(extract_features(images[lo: lo + batch_size], extractor, layer, batch_size))
    return acc.to_stats(extractor_id)


def fid_between_sets(
    real_images,
    synthetic_images,
    extractor: nn.Module,
    layer: str = FEATURE_LAYER,
    extractor_id: str = "unknown",
    batch_size: int = 256,
) -> float:
    n_real, n_syn = len(real_images), len(synthetic_images)
    if min(n_real, n_syn) < 2:
        raise TooFewSamples(f"need ≥ 2 images per set, got {n_real} real / {n_syn} synthetic")
    real = feature_stats(real_images, extractor, layer, extractor_id, batch_size)
    synthetic = feature_stats(synthetic_images, extractor, layer, extractor_id, batch_size)
    if min(n_real, n_syn) < real.dim + 1:
        log.warning("FID with %d / %d images for D=%d features: covariance is rank-deficient",
                    n_real, n_syn, real.dim)
    fid = frechet_distance(real, synthetic)
    log.info("FID %.4f  (real %d, synthetic %d, extractor %s)", fid, n_real, n_syn, extractor_id)
    return fid


class InceptionExtractor(nn.Module):
    """torchvision Inception-v3 pool features for 1×S×S inputs in [-1, 1].

    Images are resized to 299×299 and replicated to 3 channels; ``penultimate``
    exposes the 2048-d pooled vector.
    """

    IMAGENET_MEAN = (0.485, 0.456, 0.406)
    IMAGENET_STD = (0.229, 0.224, 0.225)

    def __init__(self, weights: Optional[str] = "DEFAULT"):
        super().__init__()
        from torchvision import models

        net = models.inception_v3(weights=weights, aux_logits=True, init_weights=weights is None)
        net.aux_logits = False
        net.AuxLogits = None
        net.fc = nn.Identity()
        self.net = net
        self.penultimate = nn.Identity()
        self.register_buffer("mean", torch.tensor(self.IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(self.IMAGENET_STD).view(1, 3, 1, 1))

    def inception_input(self, x: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        x = x.repeat(1, 3, 1, 1)
        return ((x + 1.0) / 2.0 - self.mean) / self.std

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.penultimate(self.net(self.inception_input(x)))


# ─── report tables ───────────────────────────────────────────────────
TABLE_COLUMNS = ["Model", "Role", "Loss", "Accuracy", "Precision", "Recall", "F1"]


def comparison_table(
    baseline: Mapping[str, EvalReport], retrained: Mapping[str, EvalReport]
) -> pd.DataFrame:
    """Baseline rows then retrained rows, one per model, plus accuracy deltas."""
    rows = []
    for role, reports in (("baseline", baseline), ("retrained", retrained)):
        for model_id in sorted(reports):
            r = reports[model_id]
            rows.append({
                "Model": model_id, "Role": role,
                "Loss": float("nan") if r.loss is None else r.loss,
                "Accuracy": r.accuracy, "Precision": r.precision_macro,
                "Recall": r.recall_macro, "F1": r.f1_macro,
            })
    df = pd.DataFrame(rows, columns=TABLE_COLUMNS)
    base_acc = {m: r.accuracy for m, r in baseline.items()}
    df["Δ Accuracy"] = [
        row.Accuracy - base_acc[row.Model] if row.Role == "retrained" and row.Model in base_acc else math.nan
        for row in df.itertuples(index=False)
    ]
    return df


def render_table(df: pd.DataFrame) -> str:
    return df.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="")
