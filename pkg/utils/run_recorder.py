# utils/run_recorder.py
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import pandas as pd

STOP_REASONS = ("early_stop", "max_epochs", "user")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metrics: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0


class RunLog:
    """
    Collect one record per finished epoch.
    The analysis dict looks like:
        {"epochs": [ {...}, ... ], "best_epoch": 4, "stop_reason": "early_stop"}
    """

    def __init__(self, name: str = "run"):
        self.name = name
        self.records: List[EpochRecord] = []
        self.stop_reason: Optional[str] = None

    def add(self, record: EpochRecord) -> None:
        last = self.records[-1].epoch if self.records else 0
        if record.epoch <= last:
            raise ValueError(f"epoch {record.epoch} logged after epoch {last}")
        self.records.append(record)

    def finish(self, reason: str) -> None:
        if reason not in STOP_REASONS:
            raise ValueError(f"unknown stop reason {reason!r}")
        self.stop_reason = reason

    @property
    def best_epoch(self) -> Optional[int]:
        """Epoch with the lowest val_loss (earliest on ties); None when nothing was logged."""
        finite = [r for r in self.records if math.isfinite(r.val_loss)]
        if not finite:
            return None
        return min(finite, key=lambda r: (r.val_loss, r.epoch)).epoch

    @property
    def best_val_loss(self) -> Optional[float]:
        best = self.best_epoch
        return None if best is None else next(r.val_loss for r in self.records if r.epoch == best)

    def train_losses(self) -> List[float]:
        return [r.train_loss for r in self.records]

    def val_losses(self) -> List[float]:
        return [r.val_loss for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {"epoch": r.epoch, "train_loss": r.train_loss,
                   "val_loss": r.val_loss, "wall_time": r.wall_time}
            row.update({f"val_{k}": v for k, v in r.val_metrics.items()})
            rows.append(row)
        return pd.DataFrame(rows, columns=None if rows else ["epoch", "train_loss", "val_loss", "wall_time"])

    def summary(self) -> Dict[str, object]:
        return {
            "name": self.name,
            "epochs": len(self.records),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
        }

    def write_jsonl(self, path: str) -> str:
        """One epoch per line; appends so several stages can share a run's log.jsonl."""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps({"stage": self.name, **asdict(r)}) + "\n")
        return path

    def get_analysis(self) -> Dict[str, object]:
        return {"epochs": [asdict(r) for r in self.records], **self.summary()}
