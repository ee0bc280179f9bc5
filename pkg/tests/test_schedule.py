import math

import numpy as np
import pytest
import torch

from errors import (
    InvalidRange,
    NonPositiveT,
    ScheduleChecksumError,
    ShapeMismatch,
    TimestepOutOfRange,
)
from schedule import (
    NoiseSchedule,
    make_schedule,
    posterior_mean_from_x0,
    posterior_params,
    predict_x0_from_eps,
    q_sample,
    q_step,
    respace,
)


def _loop_alpha_bar(betas, t):
    prod = 1.0
    for b in betas[: t + 1]:
        prod *= 1.0 - float(b)
    return prod


def _img(value=0.0, shape=(2, 1, 4, 4)):
    return torch.full(shape, value, dtype=torch.float64)


class TestMakeSchedule:
    def test_single_step(self):
        s = make_schedule("linear", 1, 1e-4, 0.02)
        np.testing.assert_array_equal(s.betas, [1e-4])
        np.testing.assert_allclose(s.alpha_bars, [0.9999], rtol=0, atol=1e-15)

    def test_linear_endpoints_exact(self):
        s = make_schedule("linear", 1000, 1e-4, 0.02)
        assert s.betas[0] == 1e-4
        assert s.betas[999] == 0.02

    def test_alpha_bar_matches_plain_loop(self):
        s = make_schedule("linear", 1000, 1e-4, 0.02)
        expected = _loop_alpha_bar(s.betas, 999)
        assert s.alpha_bars[999] == pytest.approx(expected, rel=1e-10)

    def test_alpha_bars_strictly_decreasing(self):
        for kind in ("linear", "cosine"):
            ab = make_schedule(kind, 200).alpha_bars
            assert np.all(np.diff(ab) < 0)
            assert 0.0 < ab[-1] < ab[0] < 1.0

    def test_cosine_betas_capped(self):
        s = make_schedule("cosine", 50)
        assert s.betas.max() <= 0.999
        assert s.betas.min() > 0

    def test_posterior_variance_zero_at_first_step(self):
        s = make_schedule("linear", 100)
        assert s.posterior_variances[0] == 0.0
        assert np.all(s.posterior_variances[1:] > 0)
        assert np.all(s.posterior_variances[1:] <= s.betas[1:])

    def test_beta_variance_option(self):
        s = make_schedule("linear", 10, variance="beta")
        assert s.reverse_variances[0] == 0.0
        np.testing.assert_array_equal(s.reverse_variances[1:], s.betas[1:])

    def test_tables_are_read_only(self):
        s = make_schedule("linear", 10)
        with pytest.raises(ValueError):
            s.alpha_bars[0] = 0.5

    @pytest.mark.parametrize("kwargs, exc", [
        ({"T": 0}, NonPositiveT),
        ({"beta_start": 0.03, "beta_end": 0.02}, InvalidRange),
        ({"beta_start": 0.0}, InvalidRange),
        ({"beta_end": 1.0}, InvalidRange),
        ({"kind": "sigmoid"}, InvalidRange),
        ({"variance": "learned"}, InvalidRange),
    ])
    def test_invalid_parameters(self, kwargs, exc):
        with pytest.raises(exc):
            make_schedule(**{"kind": "linear", "T": 10, **kwargs})


class TestState:
    def test_state_round_trip(self):
        s = make_schedule("cosine", 30, variance="beta")
        again = NoiseSchedule.from_state(s.to_state())
        np.testing.assert_array_equal(again.betas, s.betas)
        assert again.variance == "beta"

    def test_checksum_mismatch(self):
        state = make_schedule("linear", 30).to_state()
        state["betas_sha256"] = "0" * 64
        with pytest.raises(ScheduleChecksumError):
            NoiseSchedule.from_state(state)


class TestRespace:
    def test_keeps_alpha_bars_at_chosen_steps(self):
        s = make_schedule("linear", 100)
        steps = [0, 24, 49, 74, 99]
        r = respace(s, steps)
        assert r.T == 5
        np.testing.assert_allclose(r.alpha_bars, s.alpha_bars[steps], rtol=1e-12)

    def test_full_respace_is_identity(self):
        s = make_schedule("linear", 20)
        r = respace(s, range(20))
        np.testing.assert_allclose(r.betas, s.betas, rtol=1e-10)

    def test_rejects_unsorted(self):
        with pytest.raises(InvalidRange):
            respace(make_schedule("linear", 20), [5, 3])


class TestForward:
    def test_zero_noise(self):
        s = make_schedule("linear", 50)
        x0 = torch.linspace(-1, 1, 32, dtype=torch.float64).reshape(2, 1, 4, 4)
        out = q_sample(x0, 17, torch.zeros_like(x0), s)
        np.testing.assert_allclose(out.numpy(), math.sqrt(s.alpha_bars[17]) * x0.numpy(), rtol=1e-15)

    def test_zero_signal(self):
        s = make_schedule("linear", 50)
        eps = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        out = q_sample(torch.zeros_like(eps), 30, eps, s)
        np.testing.assert_allclose(out.numpy(), math.sqrt(1 - s.alpha_bars[30]) * eps.numpy(), rtol=1e-15)

    def test_last_step_of_two_hundred(self):
        s = make_schedule("linear", 200, 1e-4, 0.02)
        ab = _loop_alpha_bar(s.betas, 199)
        out = q_sample(_img(1.0), 199, _img(1.0), s)
        np.testing.assert_allclose(out.numpy(), math.sqrt(ab) + math.sqrt(1 - ab), rtol=1e-10)

    def test_per_example_timesteps(self):
        s = make_schedule("linear", 50)
        x0, eps = _img(1.0), _img(0.0)
        out = q_sample(x0, torch.tensor([0, 49]), eps, s)
        assert out[0, 0, 0, 0].item() == pytest.approx(math.sqrt(s.alpha_bars[0]))
        assert out[1, 0, 0, 0].item() == pytest.approx(math.sqrt(s.alpha_bars[49]))

    def test_single_kernel_from_clean_image(self):
        s = make_schedule("linear", 50)
        x0, eps = torch.randn(2, 1, 4, 4, dtype=torch.float64), torch.randn(2, 1, 4, 4, dtype=torch.float64)
        np.testing.assert_allclose(q_step(x0, 0, eps, s).numpy(), q_sample(x0, 0, eps, s).numpy(), rtol=1e-9)

    def test_timestep_out_of_range(self):
        s = make_schedule("linear", 10)
        with pytest.raises(TimestepOutOfRange):
            q_sample(_img(), 10, _img(), s)
        with pytest.raises(TimestepOutOfRange):
            q_sample(_img(), torch.tensor([0, -1]), _img(), s)

    def test_shape_mismatch(self):
        s = make_schedule("linear", 10)
        with pytest.raises(ShapeMismatch):
            q_sample(_img(), 3, torch.zeros(2, 1, 4, 5, dtype=torch.float64), s)


class TestReverse:
    def test_zero_prediction(self):
        s = make_schedule("linear", 50)
        x_t = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        mean, var = posterior_params(x_t, torch.zeros_like(x_t), 20, s)
        np.testing.assert_allclose(mean.numpy(), x_t.numpy() / math.sqrt(s.alphas[20]), rtol=1e-14)
        assert var == s.posterior_variances[20]

    def test_first_step_has_no_variance(self):
        s = make_schedule("linear", 50)
        x_t = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        _, var = posterior_params(x_t, torch.randn_like(x_t), 0, s)
        assert var == 0.0

    def test_eps_and_x0_forms_agree(self):
        s = make_schedule("cosine", 100)
        x0 = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        eps = torch.randn_like(x0)
        for t in (1, 37, 99):
            x_t = q_sample(x0, t, eps, s)
            mean, _ = posterior_params(x_t, eps, t, s)
            np.testing.assert_allclose(mean.numpy(), posterior_mean_from_x0(x0, x_t, t, s).numpy(),
                                       rtol=1e-9, atol=1e-10)

    def test_x0_from_zero_eps(self):
        s = make_schedule("linear", 50)
        x_t = torch.randn(2, 1, 4, 4, dtype=torch.float64)
        out = predict_x0_from_eps(x_t, torch.zeros_like(x_t), 10, s)
        np.testing.assert_allclose(out.numpy(), x_t.numpy() / math.sqrt(s.alpha_bars[10]), rtol=1e-14)

    def test_x0_recovers_clean_image(self):
        s = make_schedule("linear", 50)
        x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64) * 2 - 1
        eps = torch.randn_like(x0)
        x_t = q_sample(x0, 42, eps, s)
        np.testing.assert_allclose(predict_x0_from_eps(x_t, eps, 42, s).numpy(), x0.numpy(), atol=1e-10)

    def test_x0_clamped(self):
        s = make_schedule("linear", 50)
        x_t = _img(1.7 * math.sqrt(s.alpha_bars[5]))
        out = predict_x0_from_eps(x_t, torch.zeros_like(x_t), 5, s, clamp=True)
        assert torch.all(out == 1.0)
