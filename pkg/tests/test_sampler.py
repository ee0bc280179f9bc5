import json
import math
import os

import numpy as np
import pytest
import torch

from backbone import SEUNet
from classifiers import GuidanceClassifier, guidance_log_prob_grad
from errors import ClassOutOfRange, MissingFile, ParseError, ShapeMismatch, TimestepOrderError
from sampler import (
    SamplerConfig,
    SyntheticSampleRecord,
    apply_guidance,
    ddim_step,
    ddpm_step,
    generate,
    load_samples,
    record_to_dict,
    save_sample_grid,
    save_samples,
    step_sequence,
    write_sidecar,
)
from schedule import make_schedule, posterior_params, q_sample


def _eps_model(scale=0.1):
    return lambda x, t, y: scale * x


def _x(seed=0, shape=(2, 1, 4, 4)):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class TestApplyGuidance:
    def test_zero_scale_is_identity(self):
        mean = _x()
        assert apply_guidance(mean, 0.3, _x(1), 0.0) is mean

    def test_arithmetic(self):
        out = apply_guidance(torch.zeros(1, 4, 4), 0.5, torch.ones(1, 4, 4), 3.0)
        assert torch.all(out == 1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            apply_guidance(torch.zeros(1, 4, 4), 0.5, torch.ones(1, 4, 5), 1.0)


class TestDDPMStep:
    def test_final_step_returns_mean(self):
        s = make_schedule("linear", 10)
        x = _x()
        mean, _ = posterior_params(x, 0.1 * x, 0, s)
        out = ddpm_step(x, 0, None, _eps_model(), None, s, 0.0, None)
        torch.testing.assert_close(out, mean, rtol=0, atol=0)

    def test_zero_noise_gives_posterior_mean(self):
        s = make_schedule("linear", 10)
        x = _x()
        mean, _ = posterior_params(x, 0.1 * x, 6, s)
        out = ddpm_step(x, 6, None, _eps_model(), None, s, 0.0, torch.zeros_like(x))
        torch.testing.assert_close(out, mean, rtol=0, atol=0)

    def test_adds_scaled_noise(self):
        s = make_schedule("linear", 10)
        x, z = _x(), _x(7)
        mean, var = posterior_params(x, 0.1 * x, 6, s)
        out = ddpm_step(x, 6, None, _eps_model(), None, s, 0.0, z)
        torch.testing.assert_close(out, mean + math.sqrt(var) * z)

    def test_missing_guidance_ignores_scale(self):
        s = make_schedule("linear", 10)
        x, z = _x(), _x(3)
        a = ddpm_step(x, 4, None, _eps_model(), None, s, 5.0, z)
        b = ddpm_step(x, 4, None, _eps_model(), None, s, 0.0, z)
        assert torch.equal(a, b)

    def test_guidance_shifts_mean(self, backbone_cfg):
        s = make_schedule("linear", 10)
        torch.manual_seed(8)
        clf = GuidanceClassifier(backbone_cfg, zero_head=False).double().eval()
        x = torch.randn(1, 1, 32, 32, dtype=torch.float64)
        z = torch.zeros_like(x)
        y = torch.tensor([1])
        plain = ddpm_step(x, 5, y, _eps_model(), clf, s, 0.0, z)
        guided = ddpm_step(x, 5, y, _eps_model(), clf, s, 2.0, z)
        grad = guidance_log_prob_grad(clf, x, 5, y)
        var = float(s.reverse_variances[5])
        torch.testing.assert_close(guided - plain, 2.0 * var * grad, rtol=1e-6, atol=1e-10)

    def test_noise_required_before_last_step(self):
        s = make_schedule("linear", 10)
        with pytest.raises(ValueError):
            ddpm_step(_x(), 3, None, _eps_model(), None, s, 0.0, None)

    def test_noise_shape_checked(self):
        s = make_schedule("linear", 10)
        with pytest.raises(ShapeMismatch):
            ddpm_step(_x(), 3, None, _eps_model(), None, s, 0.0, torch.zeros(1, 1, 4, 4))


class TestDDIMStep:
    def test_deterministic_without_eta(self):
        s = make_schedule("linear", 20)
        x = _x()
        a = ddim_step(x, 15, 10, None, _eps_model(), s)
        b = ddim_step(x, 15, 10, None, _eps_model(), s)
        assert torch.equal(a, b)

    def test_exact_noise_lands_on_forward_marginal(self):
        s = make_schedule("cosine", 50)
        x0, eps = _x(1), _x(2)
        x_t = q_sample(x0, 40, eps, s)
        oracle = lambda x, t, y: eps
        torch.testing.assert_close(ddim_step(x_t, 40, 12, None, oracle, s), q_sample(x0, 12, eps, s))
        torch.testing.assert_close(ddim_step(x_t, 40, -1, None, oracle, s), x0)

    def test_full_eta_single_step_matches_ancestral(self):
        s = make_schedule("linear", 20)
        x, z = _x(4), _x(5)
        ddim = ddim_step(x, 9, 8, None, _eps_model(), s, eta=1.0, noise=z)
        ddpm = ddpm_step(x, 9, None, _eps_model(), None, s, 0.0, z)
        torch.testing.assert_close(ddim, ddpm, rtol=1e-8, atol=1e-10)

    def test_order_enforced(self):
        s = make_schedule("linear", 20)
        with pytest.raises(TimestepOrderError):
            ddim_step(_x(), 10, 10, None, _eps_model(), s)

    def test_noise_required_with_eta(self):
        s = make_schedule("linear", 20)
        with pytest.raises(ValueError):
            ddim_step(_x(), 10, 5, None, _eps_model(), s, eta=0.5)


class TestStepSequence:
    def test_full_sequence(self):
        assert step_sequence(10, 10) == list(range(9, -1, -1))

    def test_single_step(self):
        assert step_sequence(10, 1) == [9]

    def test_strided_is_descending_and_spans(self):
        seq = step_sequence(200, 25)
        assert len(seq) == 25
        assert seq[0] == 199 and seq[-1] == 0
        assert all(a > b for a, b in zip(seq, seq[1:]))

    def test_too_many_steps(self):
        with pytest.raises(ValueError):
            step_sequence(10, 11)


class TestSamplerConfig:
    def test_labels_class_major(self):
        assert SamplerConfig(per_class=2).labels_for(3) == [0, 0, 1, 1, 2, 2]

    @pytest.mark.parametrize("kwargs", [
        {"steps": 0}, {"steps": 11}, {"guidance_scale": -1.0}, {"method": "euler"},
        {"ddim_eta": 1.5}, {"batch_size": 0},
    ])
    def test_validate(self, kwargs):
        with pytest.raises(ValueError):
            SamplerConfig(**{"steps": 10, **kwargs}).validate(10)


class TestGenerate:
    @pytest.fixture
    def denoiser(self, backbone_cfg):
        torch.manual_seed(6)
        return SEUNet(backbone_cfg).eval()

    def test_seeded_and_labelled(self, denoiser, sched10):
        cfg = SamplerConfig(steps=10, guidance_scale=0.0)
        a = generate([0, 0, 1], cfg, denoiser, None, sched10, seed=42, progress=False)
        b = generate([0, 0, 1], cfg, denoiser, None, sched10, seed=42, progress=False)
        assert [r.intended_class for r in a] == [0, 0, 1]
        assert all(np.array_equal(r.image, q.image) for r, q in zip(a, b))
        assert not np.array_equal(a[0].image, a[1].image)
        assert all(r.image.shape == (1, 32, 32) for r in a)
        assert all(r.image.min() >= -1.0 and r.image.max() <= 1.0 for r in a)
        assert [r.sample_index for r in a] == [0, 1, 2]
        assert a[0].seed == 42 and a[0].steps == 10

    def test_batch_size_does_not_change_samples(self, denoiser, sched10):
        one = generate([0, 1, 2], SamplerConfig(steps=10, batch_size=1), denoiser, None, sched10, 3, progress=False)
        all_ = generate([0, 1, 2], SamplerConfig(steps=10, batch_size=8), denoiser, None, sched10, 3, progress=False)
        for r, q in zip(one, all_):
            np.testing.assert_allclose(r.image, q.image, atol=1e-4)

    def test_zero_head_guidance_changes_nothing(self, denoiser, sched10, backbone_cfg):
        clf = GuidanceClassifier(backbone_cfg).eval()
        cfg = SamplerConfig(steps=10, guidance_scale=4.0)
        guided = generate([1, 2], cfg, denoiser, clf, sched10, 9, progress=False)
        plain = generate([1, 2], cfg, denoiser, None, sched10, 9, progress=False)
        for r, q in zip(guided, plain):
            np.testing.assert_array_equal(r.image, q.image)

    def test_strided_ddpm_trace(self, denoiser, sched10):
        trace = []
        generate([0], SamplerConfig(steps=4), denoiser, None, sched10, 0, trace=trace, progress=False)
        assert trace == sorted(step_sequence(10, 4), reverse=True)

    def test_ddim_trace_and_output(self, denoiser, sched10):
        trace = []
        cfg = SamplerConfig(steps=5, method="ddim")
        out = generate([2, 0], cfg, denoiser, None, sched10, 1, trace=trace, progress=False)
        assert trace == step_sequence(10, 5)
        assert out[0].method == "ddim"
        assert np.isfinite(out[0].image).all()

    def test_label_outside_model_classes(self, denoiser, sched10):
        with pytest.raises(ClassOutOfRange):
            generate([3], SamplerConfig(steps=10), denoiser, None, sched10, 0, progress=False)


class TestSampleFiles:
    def _records(self):
        rng = np.random.default_rng(0)
        return [
            SyntheticSampleRecord(image=rng.uniform(-1, 1, (1, 32, 32)).astype(np.float32),
                                  intended_class=i % 2, guidance_scale=1.0, steps=10, seed=5, sample_index=i)
            for i in range(4)
        ]

    def test_save_and_reload(self, tmp_path):
        saved, sidecar = save_samples(self._records(), str(tmp_path / "pool"))
        assert os.path.basename(saved[1].path) == "sample_000001_c1.png"
        with open(sidecar, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh]
        assert len(rows) == 4
        assert {"path", "intended_class", "guidance_scale", "steps", "seed"} <= set(rows[0])
        assert rows[0]["path"] == "images/sample_000000_c0.png"

        loaded = load_samples(sidecar)
        assert [r.intended_class for r in loaded] == [0, 1, 0, 1]
        for orig, back in zip(saved, loaded):
            np.testing.assert_allclose(back.image, orig.image, atol=1 / 127.5)
            assert back.path == orig.path

    def test_confidences_survive_sidecar(self, tmp_path):
        saved, _ = save_samples(self._records(), str(tmp_path / "pool"))
        saved[0].confidences["residual-desk"] = (0, 0.97)
        path = write_sidecar(saved[:1], str(tmp_path / "kept.jsonl"))
        assert load_samples(path)[0].confidences == {"residual-desk": (0, 0.97)}

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(MissingFile):
            load_samples(str(tmp_path / "absent.jsonl"))

    @pytest.mark.parametrize("row", ['{"path": "a.png", "steps": 10}', "not json", '{"path": "a.png", '
                                     '"intended_class": "x", "guidance_scale": 1, "steps": 1, "seed": 0}'])
    def test_malformed_row_names_its_line(self, tmp_path, row):
        _, sidecar = save_samples(self._records()[:1], str(tmp_path / "pool"))
        with open(sidecar, "a", encoding="utf-8") as fh:
            fh.write(row + "\n")
        with pytest.raises(ParseError) as info:
            load_samples(sidecar)
        assert info.value.line == 2

    def test_sidecar_pointing_at_deleted_image(self, tmp_path):
        saved, sidecar = save_samples(self._records()[:2], str(tmp_path / "pool"))
        os.remove(saved[1].path)
        with pytest.raises(MissingFile):
            load_samples(sidecar)

    def test_sidecar_rows_match_record_fields(self, tmp_path):
        saved, sidecar = save_samples(self._records()[:1], str(tmp_path / "pool"))
        with open(sidecar, encoding="utf-8") as fh:
            row = json.loads(fh.readline())
        expected = record_to_dict(saved[0])
        expected.pop("confidences")
        assert set(row) == set(expected)
        assert row["seed"] == 5 and row["method"] == "ddpm"

    def test_grid_and_dict(self, tmp_path):
        recs = self._records()
        path = save_sample_grid(recs, str(tmp_path / "grid.png"), per_class=2)
        assert os.path.getsize(path) > 0
        d = record_to_dict(recs[0])
        assert "image" not in d and d["intended_class"] == 0
