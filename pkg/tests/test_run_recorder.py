import json
import math

import pytest

from utils.run_recorder import EpochRecord, RunLog


def _log(losses, name="denoiser"):
    run_log = RunLog(name)
    for epoch, val in enumerate(losses, start=1):
        run_log.add(EpochRecord(epoch, train_loss=val + 0.1, val_loss=val, val_metrics={"accuracy": 0.5}))
    return run_log


class TestRunLog:
    def test_epochs_must_increase(self):
        run_log = _log([1.0, 0.8])
        with pytest.raises(ValueError):
            run_log.add(EpochRecord(2, 0.1, 0.1))

    def test_best_epoch_earliest_on_ties(self):
        assert _log([1.0, 0.5, 0.5, 0.7]).best_epoch == 2
        assert _log([1.0, 0.5, 0.5, 0.7]).best_val_loss == 0.5

    def test_best_epoch_skips_non_finite(self):
        assert _log([math.nan, 0.9]).best_epoch == 2

    def test_empty_log(self):
        run_log = RunLog()
        assert run_log.best_epoch is None
        assert run_log.to_frame().empty
        assert list(run_log.to_frame().columns) == ["epoch", "train_loss", "val_loss", "wall_time"]

    def test_finish_rejects_unknown_reason(self):
        with pytest.raises(ValueError):
            RunLog().finish("crashed")

    def test_frame_and_summary(self):
        run_log = _log([0.4, 0.3])
        run_log.finish("max_epochs")
        df = run_log.to_frame()
        assert df["epoch"].tolist() == [1, 2]
        assert df["val_accuracy"].tolist() == [0.5, 0.5]
        assert run_log.summary() == {"name": "denoiser", "epochs": 2, "best_epoch": 2,
                                     "best_val_loss": 0.3, "stop_reason": "max_epochs"}
        assert len(run_log.get_analysis()["epochs"]) == 2

    def test_jsonl_appends_stages(self, tmp_path):
        path = str(tmp_path / "run" / "log.jsonl")
        _log([0.4, 0.3], "denoiser").write_jsonl(path)
        _log([0.9], "guidance").write_jsonl(path)
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh]
        assert [r["stage"] for r in rows] == ["denoiser", "denoiser", "guidance"]
        assert rows[1]["val_loss"] == 0.3
