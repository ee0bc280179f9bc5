import math

import numpy as np
import pytest
import scipy.linalg
import torch

from classifiers import DownstreamModelSpec, build_downstream
from errors import (
    ClassOutOfRange,
    DimensionMismatch,
    LengthMismatch,
    NonPSDProduct,
    TooFewSamples,
    UnknownLayer,
)
from metrics import (
    EvalReport,
    FrechetStats,
    StatsAccumulator,
    classification_report,
    comparison_table,
    InceptionExtractor,
    extract_features,
    feature_stats,
    fid_between_sets,
    frechet_distance,
    layer_width,
    render_table,
)


def _stats(mean, cov, count=10):
    return FrechetStats(np.asarray(mean, float), np.asarray(cov, float), count)


def _spd(rng, d):
    a = rng.normal(size=(d, d))
    return a @ a.T + d * np.eye(d)


class TestClassificationReport:
    def test_two_classes(self):
        r = classification_report([0, 0, 0, 1], [0, 0, 1, 1], 2)
        assert r.accuracy == pytest.approx(0.75)
        assert r.precision_macro == pytest.approx(5 / 6)
        assert r.recall_macro == pytest.approx(0.75)
        assert r.confusion.tolist() == [[2, 0], [1, 1]]

    def test_constant_predictions(self):
        r = classification_report([0, 0, 0], [0, 1, 2], 3)
        assert r.accuracy == pytest.approx(1 / 3)
        assert r.recall_macro == pytest.approx(1 / 3)
        assert r.precision_macro == pytest.approx(1 / 9)
        assert r.zero_predicted == [1, 2]
        assert r.zero_support == []

    def test_perfect(self):
        r = classification_report([0, 1, 2, 2], [0, 1, 2, 2], 3, loss=0.01)
        assert r.accuracy == r.precision_macro == r.recall_macro == r.f1_macro == 1.0
        assert r.loss == 0.01

    def test_errors(self):
        with pytest.raises(LengthMismatch):
            classification_report([0, 1], [0], 2)
        with pytest.raises(LengthMismatch):
            classification_report([], [], 2)
        with pytest.raises(ClassOutOfRange):
            classification_report([0, 2], [0, 1], 2)

    def test_dict_round_trip(self):
        r = classification_report([0, 1, 1], [0, 1, 0], 2, loss=0.4)
        again = EvalReport.from_dict(r.to_dict())
        assert again.accuracy == r.accuracy
        np.testing.assert_array_equal(again.confusion, r.confusion)


class TestFrechetDistance:
    @pytest.mark.parametrize("a, b", [((0.0, 1.0), (1.0, 1.0)), ((0.0, 1.0), (0.0, 4.0))])
    def test_scalar_gaussians(self, a, b):
        d = frechet_distance(_stats([a[0]], [[a[1]]]), _stats([b[0]], [[b[1]]]))
        assert d == pytest.approx(1.0, abs=1e-12)

    def test_identical_stats(self):
        rng = np.random.default_rng(0)
        s = _stats(rng.normal(size=5), _spd(rng, 5))
        assert frechet_distance(s, s) == pytest.approx(0.0, abs=1e-9)

    def test_matches_matrix_square_root(self):
        rng = np.random.default_rng(1)
        a = _stats(rng.normal(size=8), _spd(rng, 8))
        b = _stats(rng.normal(size=8), _spd(rng, 8))
        root = scipy.linalg.sqrtm(a.covariance @ b.covariance).real
        diff = a.mean - b.mean
        expected = diff @ diff + np.trace(a.covariance + b.covariance - 2 * root)
        assert frechet_distance(a, b) == pytest.approx(expected, rel=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a = _stats(rng.normal(size=4), _spd(rng, 4))
        b = _stats(rng.normal(size=4), _spd(rng, 4))
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), rel=1e-9)

    def test_shrinks_with_more_samples(self):
        rng = np.random.default_rng(3)
        fids = []
        for n in (64, 256, 1024):
            x = rng.normal(size=(2 * n, 8))
            fids.append(frechet_distance(FrechetStats.from_features(x[:n]), FrechetStats.from_features(x[n:])))
        assert fids[0] > fids[1] > fids[2]

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            frechet_distance(_stats([0.0], [[1.0]]), _stats([0.0, 0.0], np.eye(2)))
        with pytest.raises(NonPSDProduct):
            frechet_distance(_stats([0.0, 0.0], np.diag([1.0, -1.0])), _stats([0.0, 0.0], np.eye(2)))
        with pytest.raises(TooFewSamples):
            _stats([0.0], [[1.0]], count=1)
        with pytest.raises(TooFewSamples):
            FrechetStats.from_features(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            _stats([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


class TestStatsAccumulator:
    def test_merge_matches_pooled_fit(self):
        x = np.random.default_rng(4).normal(size=(50, 3))
        merged = StatsAccumulator(3).update(x[:20]).merge(StatsAccumulator(3).update(x[20:])).to_stats()
        direct = FrechetStats.from_features(x)
        np.testing.assert_allclose(merged.mean, direct.mean, rtol=1e-12)
        np.testing.assert_allclose(merged.covariance, direct.covariance, rtol=1e-9, atol=1e-12)
        assert merged.count == 50

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            StatsAccumulator(3).update(np.zeros((4, 2)))
        with pytest.raises(DimensionMismatch):
            StatsAccumulator(3).merge(StatsAccumulator(2))
        with pytest.raises(TooFewSamples):
            StatsAccumulator(3).update(np.zeros((1, 3))).to_stats()


class TestFeatures:
    @pytest.fixture
    def extractor(self):
        torch.manual_seed(7)
        return build_downstream(DownstreamModelSpec("plainconv", 3)).eval()

    @pytest.fixture
    def images(self):
        return np.random.default_rng(5).uniform(-1, 1, (80, 1, 32, 32)).astype(np.float32)

    def test_deterministic_rows(self, extractor, images):
        a = extract_features(images[:6], extractor, "penultimate", batch_size=4)
        b = extract_features(images[:6], extractor, "penultimate", batch_size=6)
        np.testing.assert_allclose(a, b, atol=1e-6)
        assert a.dtype == np.float64
        assert a.shape == (6, layer_width(extractor, "penultimate"))
        assert not np.allclose(a[0], a[1])

    def test_unknown_layer(self, extractor, images):
        with pytest.raises(UnknownLayer):
            extract_features(images[:2], extractor, "no_such_layer")

    def test_set_against_itself(self, extractor, images):
        feats = extract_features(images, extractor, "penultimate")
        scale = max(1.0, float(np.trace(np.cov(feats, rowvar=False))))
        assert fid_between_sets(images, images, extractor, "penultimate") == pytest.approx(0.0, abs=1e-4 * scale)

    def test_set_too_small(self, extractor, images):
        with pytest.raises(TooFewSamples):
            fid_between_sets(images[:1], images, extractor, "penultimate")

    def test_batched_stats_match_one_shot_fit(self, extractor, images):
        streamed = feature_stats(images, extractor, "penultimate", "plain", batch_size=7)
        direct = FrechetStats.from_features(extract_features(images, extractor, "penultimate"))
        assert streamed.count == 80 and streamed.extractor_id == "plain"
        np.testing.assert_allclose(streamed.mean, direct.mean, rtol=1e-9, atol=1e-9)
        np.testing.assert_allclose(streamed.covariance, direct.covariance, rtol=1e-6, atol=1e-8)

    def test_fid_ignores_batch_size(self, extractor, images):
        a = fid_between_sets(images[:40], images[40:], extractor, "penultimate", batch_size=9)
        b = fid_between_sets(images[:40], images[40:], extractor, "penultimate", batch_size=64)
        assert a == pytest.approx(b, rel=1e-4, abs=1e-6)


@pytest.mark.slow
class TestInceptionExtractor:
    def test_width_and_determinism(self):
        torch.manual_seed(0)
        extractor = InceptionExtractor(weights=None).eval()
        images = np.random.default_rng(2).uniform(-1, 1, (3, 1, 32, 32)).astype(np.float32)
        a = extract_features(images, extractor, "penultimate", batch_size=2)
        b = extract_features(images, extractor, "penultimate", batch_size=3)
        assert a.shape == (3, 2048)
        assert layer_width(extractor, "penultimate") == 2048
        np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


class TestComparisonTable:
    def test_delta_column(self):
        base = {"m": classification_report([0, 0, 1, 1], [0, 1, 1, 0], 2, loss=0.7)}
        new = {"m": classification_report([0, 1, 1, 1], [0, 1, 1, 0], 2, loss=0.5)}
        df = comparison_table(base, new)
        assert df["Role"].tolist() == ["baseline", "retrained"]
        assert math.isnan(df["Δ Accuracy"].iloc[0])
        assert df["Δ Accuracy"].iloc[1] == pytest.approx(0.25)
        assert "retrained" in render_table(df)
