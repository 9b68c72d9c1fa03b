import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from rdcodec.diffusion import (
    NoiseSchedule,
    Parameterization,
    ddim_sigma,
    ddim_step,
    ddpm_ancestral_step,
    forward_sample,
    make_cosine_schedule,
    make_linear_schedule,
    predict_eps_from_x0,
    predict_x0_from_eps,
    subsample_timesteps,
    to_x0_eps,
    v_convert,
    x0_eps_from_v,
)

S = make_linear_schedule()


def schedule_with(alpha_bar_value):
    """Two-step schedule whose first alpha_bar is ``alpha_bar_value``."""
    b0 = 1 - alpha_bar_value
    return NoiseSchedule.from_betas([b0, 0.5])


# --- schedules ---------------------------------------------------------------

def test_linear_schedule_first_value():
    assert S.alpha_bar[0] == pytest.approx(0.9999, abs=1e-12)


def test_two_step_product():
    s = make_linear_schedule(2, 0.5, 0.5)
    np.testing.assert_allclose(s.alpha_bar, [0.5, 0.25])


def test_last_alpha_bar_is_tiny():
    # brute-force product, independent of the implementation
    ab = 1.0
    for b in np.linspace(1e-4, 0.02, 1000):
        ab *= 1 - b
    assert ab < 5e-5
    assert float(S.alpha_bar[-1]) == pytest.approx(ab, rel=1e-9)


def test_schedule_rejects_bad_betas():
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.0, 0.1)
    with pytest.raises(ValueError):
        make_linear_schedule(10, 0.2, 0.1)
    with pytest.raises(ValueError):
        make_linear_schedule(1, 0.1, 0.1)
    with pytest.raises(ValueError):
        NoiseSchedule.from_betas([0.1, 1.0])


def test_cosine_schedule_is_valid():
    s = make_cosine_schedule(1000)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 1e-3


def test_index_minus_one_is_clean():
    x = torch.zeros(3)
    assert float(S.alpha_bar_at(-1, x)) == 1.0
    with pytest.raises(IndexError):
        S.alpha_bar_at(1000, x)


# --- forward process and conversions ---------------------------------------

def test_forward_sample_special_cases():
    e = torch.randn(4, 4)
    x0 = torch.randn(4, 4)
    t = 321
    ab = float(S.alpha_bar[t])
    torch.testing.assert_close(forward_sample(torch.zeros(4, 4), t, e, S), math.sqrt(1 - ab) * e)
    torch.testing.assert_close(forward_sample(x0, t, torch.zeros(4, 4), S), math.sqrt(ab) * x0)


def test_forward_sample_hand_value():
    s = schedule_with(0.25)
    out = forward_sample(torch.ones(1), 0, torch.ones(1), s)
    assert float(out) == pytest.approx(0.5 + math.sqrt(0.75), abs=1e-6)


def test_predict_x0_hand_value():
    s = schedule_with(0.25)
    assert float(predict_x0_from_eps(torch.ones(1), torch.zeros(1), 0, s)) == pytest.approx(2.0)


def test_shape_mismatch_is_rejected():
    with pytest.raises(ValueError):
        forward_sample(torch.zeros(2, 3), 0, torch.zeros(3, 2), S)


def test_singular_inversion_raises():
    s = NoiseSchedule(np.array([0.5, 1 - 1e-14]), np.array([0.5, 0.5e-14]))
    with pytest.raises(ZeroDivisionError):
        predict_x0_from_eps(torch.ones(1), torch.ones(1), 1, s)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999), st.integers(0, 2**31 - 1))
def test_eps_round_trip(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 8, 8, generator=g)
    eps = torch.randn(2, 3, 8, 8, generator=g)
    x_t = forward_sample(x0, t, eps, S)
    # float32 rounding of x_t is amplified by 1/sqrt(alpha_bar) resp. 1/sqrt(1 - alpha_bar)
    ab = float(S.alpha_bar[t])
    torch.testing.assert_close(predict_x0_from_eps(x_t, eps, t, S), x0, atol=1e-5 / math.sqrt(ab), rtol=0)
    torch.testing.assert_close(predict_eps_from_x0(x_t, x0, t, S), eps, atol=1e-5 / math.sqrt(1 - ab), rtol=0)


@pytest.mark.parametrize("t", [0, 1, 500, 998, 999])
def test_round_trip_exact_in_float64(t):
    g = torch.Generator().manual_seed(t)
    x0 = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
    x_t = forward_sample(x0, t, eps, S)
    torch.testing.assert_close(predict_x0_from_eps(x_t, eps, t, S), x0, atol=1e-10, rtol=0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 999), st.integers(0, 2**31 - 1))
def test_v_round_trip(t, seed):
    g = torch.Generator().manual_seed(seed)
    x0 = torch.randn(2, 3, 8, 8, generator=g)
    eps = torch.randn(2, 3, 8, 8, generator=g)
    x_t = forward_sample(x0, t, eps, S)
    v = v_convert(x0, eps, t, S)
    x0_hat, eps_hat = x0_eps_from_v(x_t, v, t, S)
    torch.testing.assert_close(x0_hat, x0, atol=1e-5, rtol=0)
    torch.testing.assert_close(eps_hat, eps, atol=1e-5, rtol=0)


def test_v_endpoints():
    x0, eps = torch.randn(5), torch.randn(5)
    torch.testing.assert_close(v_convert(x0, eps, -1, S), eps)
    # alpha_bar -> 0 cannot be represented by a valid schedule; 5e-13 is close enough
    s0 = NoiseSchedule.from_betas([0.5, 1 - 1e-12])
    torch.testing.assert_close(v_convert(x0, eps, 1, s0), -x0, atol=1e-5, rtol=0)


@pytest.mark.parametrize("kind", list(Parameterization))
def test_to_x0_eps_consistent(kind):
    x0, eps = torch.randn(2, 4), torch.randn(2, 4)
    t = 500
    x_t = forward_sample(x0, t, eps, S)
    pred = {Parameterization.EPSILON: eps, Parameterization.X0: x0,
            Parameterization.V: v_convert(x0, eps, t, S)}[kind]
    a, b = to_x0_eps(pred, x_t, t, S, kind)
    torch.testing.assert_close(a, x0, atol=1e-5, rtol=0)
    torch.testing.assert_close(b, eps, atol=1e-5, rtol=0)


def test_per_batch_timesteps():
    x0, eps = torch.randn(3, 2), torch.randn(3, 2)
    t = torch.tensor([0, 10, 999])
    out = forward_sample(x0, t, eps, S)
    for i in range(3):
        torch.testing.assert_close(out[i], forward_sample(x0[i], int(t[i]), eps[i], S))


# --- DDIM --------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 999), st.data())
def test_ddim_oracle_noise_consistency(t, data):
    t_prev = data.draw(st.integers(-1, t - 1))
    g = torch.Generator().manual_seed(t)
    x0 = torch.randn(3, 8, 8, generator=g)
    eps = torch.randn(3, 8, 8, generator=g)
    x_t = forward_sample(x0, t, eps, S)
    out = ddim_step(x_t, eps, t, t_prev, S)
    expected = x0 if t_prev == -1 else forward_sample(x0, t_prev, eps, S)
    tol = 1e-5 / math.sqrt(float(S.alpha_bar[t]))
    torch.testing.assert_close(out, expected, atol=tol, rtol=0)


def test_ddim_to_clean_returns_x0_hat():
    x_t, eps_hat = torch.randn(10), torch.randn(10)
    out = ddim_step(x_t, eps_hat, 400, -1, S)
    torch.testing.assert_close(out, predict_x0_from_eps(x_t, eps_hat, 400, S))


def test_ddim_one_step_from_top():
    x0 = torch.rand(3, 4, 4, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, dtype=torch.float64)
    x_t = forward_sample(x0, 999, eps, S)
    torch.testing.assert_close(ddim_step(x_t, eps, 999, -1, S), x0)


def test_ddim_contract_errors():
    x = torch.zeros(2)
    with pytest.raises(ValueError):
        ddim_step(x, x, 5, 5, S)
    with pytest.raises(ValueError):
        ddim_step(x, x, 5, 7, S)
    with pytest.raises(ValueError):
        ddim_step(x, x, 5, 4, S, eta=0.5)


def test_ddim_deterministic():
    x, e = torch.randn(4, 4), torch.randn(4, 4)
    a = ddim_step(x, e, 700, 600, S)
    b = ddim_step(x, e, 700, 600, S)
    assert torch.equal(a, b)


def test_ddim_sigma_formula():
    t, tp = 600, 500
    ab, abp = float(S.alpha_bar[t]), float(S.alpha_bar[tp])
    expected = 0.7 * math.sqrt((1 - abp) / (1 - ab)) * math.sqrt(1 - ab / abp)
    got = float(ddim_sigma(t, tp, S, 0.7, torch.zeros((), dtype=torch.float64)))
    assert got == pytest.approx(expected, rel=1e-12)


def test_ddim_eta_one_matches_ancestral_ddpm():
    """Gaussian data N(0, s0^2) has the analytic optimal eps(x_t)."""
    s0 = 0.5
    n = 4000

    def eps_opt(x, t):
        ab = S.alpha_bar_at(t, x)
        return torch.sqrt(1 - ab) * x / (ab * s0**2 + 1 - ab)

    g = torch.Generator().manual_seed(0)
    xa = torch.randn(n, generator=g, dtype=torch.float64)
    xb = xa.clone()
    for t in range(999, -1, -1):
        za = torch.randn(n, generator=g, dtype=torch.float64)
        zb = torch.randn(n, generator=g, dtype=torch.float64)
        xa = ddim_step(xa, eps_opt(xa, t), t, t - 1, S, eta=1.0, noise=za)
        if t > 0:
            xb = ddpm_ancestral_step(xb, eps_opt(xb, t), t, S, zb)
        else:
            xb = predict_x0_from_eps(xb, eps_opt(xb, t), t, S) + 0 * zb
    # the final ancestral step has zero posterior variance, so both samplers agree
    assert stats.ks_2samp(xa.numpy(), xb.numpy()).pvalue > 0.01
    assert stats.kstest(xa.numpy(), "norm", args=(0, s0)).pvalue > 0.01


# --- timestep subsampling ---------------------------------------------------

def test_subsample_identity_and_endpoints():
    assert subsample_timesteps(1000, 1000) == list(range(999, -1, -1))
    assert subsample_timesteps(10, 2) == [9, 0]
    assert subsample_timesteps(1000, 1) == [999]


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 1000), st.data())
def test_subsample_properties(T, data):
    N = data.draw(st.integers(2, T))
    steps = subsample_timesteps(T, N)
    assert len(steps) == N
    assert steps[0] == T - 1 and steps[-1] == 0
    gaps = -np.diff(steps)
    assert np.all(gaps > 0)
    assert gaps.max() - gaps.min() <= 1


def test_subsample_rejects_bad_n():
    with pytest.raises(ValueError):
        subsample_timesteps(10, 11)
    with pytest.raises(ValueError):
        subsample_timesteps(10, 0)
