"""Confidence gate for synthetic samples.

A sample is kept iff the classifier's softmax probability of its *intended*
class is ≥ threshold (argmax agreement is only required in strict mode).
Filters never touch their input list: each one returns fresh records that
carry a ``confidences[model_id] = (predicted_class, p_intended)`` entry.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from torch import nn

from classifiers import score_images
from config import FILTER_THRESHOLD
from errors import ClassMismatch, InvalidRange, LengthMismatch
from logger_setup import get_logger
from sampler import SyntheticSampleRecord, write_sidecar

log = get_logger(__name__)

UNFILTERED = "unfiltered"   # dataset id of the whole pool in FID reports


@dataclass
class FilterReport:
    filter_model_id: str
    threshold: float
    total_in: int
    total_retained: int
    per_class: Dict[int, Tuple[int, int]] = field(default_factory=dict)   # class → (in, retained)
    mean_confidence_retained: Optional[float] = None
    mean_confidence_rejected: Optional[float] = None
    require_argmax_match: bool = False

    @property
    def retention_rate(self) -> float:
        return self.total_retained / self.total_in if self.total_in else 0.0

    def to_dict(self) -> Dict[str, object]:
        d = asdict(self)
        d["per_class"] = {str(c): [n_in, n_kept] for c, (n_in, n_kept) in sorted(self.per_class.items())}
        d["retention_rate"] = self.retention_rate
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, object]) -> "FilterReport":
        return cls(
            filter_model_id=d["filter_model_id"],
            threshold=float(d["threshold"]),
            total_in=int(d["total_in"]),
            total_retained=int(d["total_retained"]),
            per_class={int(c): (int(v[0]), int(v[1])) for c, v in d.get("per_class", {}).items()},
            mean_confidence_retained=d.get("mean_confidence_retained"),
            mean_confidence_rejected=d.get("mean_confidence_rejected"),
            require_argmax_match=bool(d.get("require_argmax_match", False)),
        )


def retain_mask(
    p_intended: np.ndarray,
    predicted: np.ndarray,
    intended: np.ndarray,
    threshold: float = FILTER_THRESHOLD,
    require_argmax_match: bool = False,
) -> np.ndarray:
    mask = np.asarray(p_intended) >= threshold
    if require_argmax_match:
        mask &= np.asarray(predicted) == np.asarray(intended)
    return mask


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise InvalidRange(f"threshold must be in [0, 1], got {threshold}")


def score_pool(records: Sequence[SyntheticSampleRecord], model: nn.Module,
               batch_size: int = 256, n_jobs: int = 1) -> np.ndarray:
    """(N, K) softmax probabilities for the pool's images."""
    if not records:
        return np.zeros((0, model.spec.class_count))
    images = np.stack([np.asarray(r.image, dtype=np.float32) for r in records])
    return score_images(model, images, batch_size=batch_size, n_jobs=n_jobs)


def filter_scored(
    records: Sequence[SyntheticSampleRecord],
    probs: np.ndarray,
    threshold: float = FILTER_THRESHOLD,
    model_id: str = "classifier",
    require_argmax_match: bool = False,
) -> Tuple[List[SyntheticSampleRecord], FilterReport]:
    """Apply the gate to precomputed probabilities."""
    _check_threshold(threshold)
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise LengthMismatch(f"probabilities must be (N, K), got shape {probs.shape}")
    if len(probs) != len(records):
        raise LengthMismatch(f"{len(probs)} probability rows for {len(records)} records")
    k = probs.shape[1]
    intended = np.array([r.intended_class for r in records], dtype=np.int64)
    if len(intended) and (intended.min() < 0 or intended.max() >= k):
        raise ClassMismatch(f"intended class {int(intended.max())} outside the classifier's {k} classes")

    rows = np.arange(len(records))
    p_int = probs[rows, intended] if len(records) else np.zeros(0)
    predicted = probs.argmax(axis=1) if len(records) else np.zeros(0, dtype=np.int64)
    mask = retain_mask(p_int, predicted, intended, threshold, require_argmax_match)

    retained = [
        replace(rec, confidences={**rec.confidences, model_id: (int(predicted[i]), float(p_int[i]))})
        for i, rec in enumerate(records) if mask[i]
    ]
    per_class = {
        c: (int((intended == c).sum()), int(((intended == c) & mask).sum())) for c in range(k)
    }
    report = FilterReport(
        filter_model_id=model_id,
        threshold=float(threshold),
        total_in=len(records),
        total_retained=int(mask.sum()),
        per_class=per_class,
        mean_confidence_retained=float(p_int[mask].mean()) if mask.any() else None,
        mean_confidence_rejected=float(p_int[~mask].mean()) if (~mask).any() else None,
        require_argmax_match=require_argmax_match,
    )
    log.info("Filter %s @ %.2f: kept %d / %d (%.1f%%)", model_id, threshold,
             report.total_retained, report.total_in, 100 * report.retention_rate)
    return retained, report


def filter_batch(
    records: Sequence[SyntheticSampleRecord],
    model: nn.Module,
    threshold: float = FILTER_THRESHOLD,
    model_id: Optional[str] = None,
    require_argmax_match: bool = False,
    batch_size: int = 256,
    n_jobs: int = 1,
) -> Tuple[List[SyntheticSampleRecord], FilterReport]:
    _check_threshold(threshold)
    spec = getattr(model, "spec", None)
    k = spec.class_count if spec is not None else None
    wanted = max((r.intended_class for r in records), default=-1)
    if k is not None and wanted >= k:
        raise ClassMismatch(f"classifier has {k} classes but a sample intends class {wanted}")
    model_id = model_id or (spec.model_id if spec is not None else type(model).__name__)
    probs = score_pool(records, model, batch_size, n_jobs)
    return filter_scored(records, probs, threshold, model_id, require_argmax_match)


def multi_filter(
    records: Sequence[SyntheticSampleRecord],
    classifiers: Mapping[str, nn.Module],
    threshold: float = FILTER_THRESHOLD,
    require_argmax_match: bool = False,
    batch_size: int = 256,
    n_jobs: int = 1,
) -> Dict[str, Tuple[List[SyntheticSampleRecord], FilterReport]]:
    """Every classifier sees the full pool."""
    return {
        cid: filter_batch(records, model, threshold, cid, require_argmax_match, batch_size, n_jobs)
        for cid, model in classifiers.items()
    }


# ─── outputs ─────────────────────────────────────────────────────────
def write_retained(retained: Sequence[SyntheticSampleRecord], path: str) -> str:
    """Sidecar pointing at the original PNGs; no image is copied."""
    return write_sidecar(retained, path)


def write_filter_report(report: FilterReport, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    return path


def retention_table(
    reports: Mapping[str, FilterReport],
    fids: Optional[Mapping[str, float]] = None,
    pool_size: Optional[int] = None,
    pool_fid: Optional[float] = None,
) -> pd.DataFrame:
    """Dataset | Images Retained | FID, with the unfiltered pool first."""
    fids = fids or {}
    if pool_size is None and reports:
        pool_size = next(iter(reports.values())).total_in
    rows = [{"Dataset": "Unfiltered", "Images Retained": pool_size,
             "FID": np.nan if pool_fid is None else pool_fid}]
    for cid in sorted(reports):
        rows.append({
            "Dataset": f"{cid} Filtered",
            "Images Retained": reports[cid].total_retained,
            "FID": fids.get(cid, np.nan),
        })
    return pd.DataFrame(rows, columns=["Dataset", "Images Retained", "FID"])
