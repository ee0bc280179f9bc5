import json

import numpy as np
import pytest
import torch
from torch import nn

from classifiers import DownstreamModelSpec, build_downstream
from errors import ClassMismatch, InvalidRange, LengthMismatch
from filtering import (
    FilterReport,
    filter_batch,
    filter_scored,
    multi_filter,
    retain_mask,
    retention_table,
    write_filter_report,
    write_retained,
)
from sampler import SyntheticSampleRecord, load_samples, save_samples


def _records(classes, seed=0):
    rng = np.random.default_rng(seed)
    return [
        SyntheticSampleRecord(image=rng.uniform(-1, 1, (1, 32, 32)).astype(np.float32),
                              intended_class=c, guidance_scale=1.0, steps=10, seed=seed, sample_index=i)
        for i, c in enumerate(classes)
    ]


def _probs(p_first):
    return np.array([[p, 1.0 - p] for p in p_first])


class TestRetainMask:
    def test_boundary_is_inclusive(self):
        mask = retain_mask(np.array([0.95, 0.90, 0.8999]), np.zeros(3), np.zeros(3), 0.9)
        assert mask.tolist() == [True, True, False]

    def test_argmax_match(self):
        mask = retain_mask(np.array([0.35]), np.array([1]), np.array([0]), 0.3, require_argmax_match=True)
        assert mask.tolist() == [False]


class TestFilterScored:
    def test_keeps_confident_records(self):
        recs = _records([0, 0, 0])
        kept, report = filter_scored(recs, _probs([0.95, 0.90, 0.8999]), 0.9, "m")
        assert [r.sample_index for r in kept] == [0, 1]
        assert report.total_in == 3 and report.total_retained == 2
        assert report.retention_rate == pytest.approx(2 / 3)
        assert report.mean_confidence_rejected == pytest.approx(0.8999)

    def test_input_is_not_mutated(self):
        recs = _records([0, 1])
        kept, _ = filter_scored(recs, np.array([[0.99, 0.01], [0.2, 0.8]]), 0.5, "m")
        assert all(r.confidences == {} for r in recs)
        assert kept[0].confidences == {"m": (0, pytest.approx(0.99))}
        assert kept[1].confidences["m"][0] == 1
        np.testing.assert_array_equal(kept[0].image, recs[0].image)

    def test_thresholds_at_the_ends(self):
        recs = _records([0, 1, 1])
        probs = np.array([[0.2, 0.8], [0.6, 0.4], [0.01, 0.99]])
        assert len(filter_scored(recs, probs, 0.0)[0]) == 3
        assert len(filter_scored(recs, probs, 1.0)[0]) == 0

    def test_intended_class_below_argmax(self):
        recs = _records([0])
        probs = np.array([[0.35, 0.65]])
        assert len(filter_scored(recs, probs, 0.3)[0]) == 1
        assert len(filter_scored(recs, probs, 0.3, require_argmax_match=True)[0]) == 0

    def test_per_class_covers_every_class(self):
        recs = _records([0, 0, 2])
        probs = np.array([[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])
        _, report = filter_scored(recs, probs, 0.5)
        assert report.per_class == {0: (2, 1), 1: (0, 0), 2: (1, 1)}

    def test_empty_pool(self):
        kept, report = filter_scored([], np.zeros((0, 3)), 0.9)
        assert kept == [] and report.total_in == 0
        assert report.retention_rate == 0.0
        assert report.mean_confidence_retained is None

    def test_errors(self):
        recs = _records([0, 2])
        with pytest.raises(ClassMismatch):
            filter_scored(recs, _probs([0.5, 0.5]), 0.9)
        with pytest.raises(LengthMismatch):
            filter_scored(recs, _probs([0.5]), 0.9)
        with pytest.raises(InvalidRange):
            filter_scored(recs[:1], _probs([0.5]), 1.5)

    def test_report_round_trip(self, tmp_path):
        _, report = filter_scored(_records([0, 1]), np.array([[0.9, 0.1], [0.7, 0.3]]), 0.5, "m")
        again = FilterReport.from_dict(report.to_dict())
        assert again == report
        path = write_filter_report(report, str(tmp_path / "r.json"))
        with open(path, encoding="utf-8") as fh:
            assert json.load(fh)["per_class"] == {"0": [1, 1], "1": [1, 0]}


class TestFilterWithModels:
    @pytest.fixture
    def model(self):
        torch.manual_seed(3)
        return build_downstream(DownstreamModelSpec("dense", 3)).eval()

    def test_class_beyond_classifier(self, model):
        with pytest.raises(ClassMismatch):
            filter_batch(_records([3]), model, 0.5)

    def test_uses_model_id(self, model):
        _, report = filter_batch(_records([0, 1, 2]), model, 0.0)
        assert report.filter_model_id == "dense-desk"
        assert report.total_retained == 3

    def test_identical_classifiers_agree(self, model):
        twin = build_downstream(DownstreamModelSpec("dense", 3)).eval()
        twin.load_state_dict(model.state_dict())
        out = multi_filter(_records([0, 1, 2, 1, 0]), {"a": model, "b": twin}, threshold=0.3)
        assert [r.sample_index for r in out["a"][0]] == [r.sample_index for r in out["b"][0]]
        assert out["a"][1].total_retained == out["b"][1].total_retained

    def test_uniform_classifier_keeps_nothing(self, model):
        nn.init.zeros_(model.fc.weight)
        nn.init.zeros_(model.fc.bias)
        kept, report = filter_batch(_records([0, 1, 2]), model, 0.9)
        assert kept == []
        assert report.mean_confidence_rejected == pytest.approx(1 / 3)

    def test_retained_sidecar_points_at_pool(self, model, tmp_path):
        saved, _ = save_samples(_records([0, 1, 2]), str(tmp_path / "pool"))
        kept, _ = filter_batch(saved, model, 0.0, "m")
        path = write_retained(kept, str(tmp_path / "filtered" / "m.jsonl"))
        back = load_samples(path)
        assert [r.path for r in back] == [r.path for r in saved]
        assert all("m" in r.confidences for r in back)


class TestRetentionTable:
    def test_layout(self):
        _, a = filter_scored(_records([0, 1]), np.array([[0.9, 0.1], [0.7, 0.3]]), 0.5, "alpha")
        _, b = filter_scored(_records([0, 1]), np.array([[0.9, 0.1], [0.1, 0.9]]), 0.5, "beta")
        df = retention_table({"beta": b, "alpha": a}, {"alpha": 12.5}, pool_fid=20.0)
        assert df["Dataset"].tolist() == ["Unfiltered", "alpha Filtered", "beta Filtered"]
        assert df["Images Retained"].tolist() == [2, 1, 2]
        assert df["FID"].iloc[0] == 20.0 and df["FID"].iloc[1] == 12.5
        assert np.isnan(df["FID"].iloc[2])
