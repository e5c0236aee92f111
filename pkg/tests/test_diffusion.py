import math

import numpy as np
import pytest
from scipy import integrate

from ccfuse.conditions import BASIC, ConditionSet, ConditionSpec, combined_loss, default_condition_set, eval_condition
from ccfuse.diffusion import (
    GMMDenoiser,
    OracleDenoiser,
    estimate_x0,
    forward_marginal,
    from_engine,
    guided_correction,
    make_schedule,
    predict_noise,
    reverse_step,
    sample_fusion,
    to_engine,
)
from ccfuse.errors import NonFiniteError, ParamError, ShapeMismatch
from ccfuse.gate import init_gate
from ccfuse.synthetic import complementary_pair


def test_schedule_values():
    sched = make_schedule(100)
    assert sched.T == 100
    assert sched.beta[0] == 0.0 and sched.alpha_bar[0] == 1.0
    assert sched.beta[1] == pytest.approx(1e-4) and sched.beta[100] == pytest.approx(0.02)
    ab = 1.0
    for t in range(1, 101):
        ab *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 99)
    assert sched.alpha_bar[100] == pytest.approx(ab, rel=1e-12)
    assert 0.36 < sched.alpha_bar[100] < 0.37
    assert np.all(np.diff(sched.alpha_bar) < 0)
    t = 50
    expect = sched.beta[t] * (1 - sched.alpha_bar[t - 1]) / (1 - sched.alpha_bar[t])
    assert sched.posterior_var[t] == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ParamError):
        make_schedule(0)
    with pytest.raises(ParamError):
        make_schedule(10, 0.02, 0.01)


def test_estimate_inverts_forward(rng):
    sched = make_schedule(100)
    x0 = rng.uniform(-1, 1, (8, 8, 1))
    for t in (1, 37, 100):
        eps = rng.standard_normal(x0.shape)
        back = estimate_x0(forward_marginal(x0, t, eps, sched), t, eps, sched)
        np.testing.assert_allclose(back, x0, atol=1e-12)
    with pytest.raises(ParamError):
        forward_marginal(x0, 0, x0, sched)
    with pytest.raises(ShapeMismatch):
        forward_marginal(x0, 3, x0[:4], sched)


def test_reverse_step_matches_epsilon_form():
    rng = np.random.default_rng(0)
    sched = make_schedule(100)
    n = 10_000
    ts = rng.integers(2, 101, n)
    x_t, eps, z = rng.standard_normal((3, n))
    for t in np.unique(ts):
        m = ts == t
        ab, a, b = sched.alpha_bar[t], sched.alpha[t], sched.beta[t]
        x0_hat = estimate_x0(x_t[m], t, eps[m], sched)
        eps_form = (x_t[m] - b / math.sqrt(1 - ab) * eps[m]) / math.sqrt(a) + math.sqrt(sched.posterior_var[t]) * z[m]
        np.testing.assert_allclose(reverse_step(x_t[m], x0_hat, t, z[m], sched), eps_form, rtol=0, atol=1e-12)


def test_reverse_step_boundaries(rng):
    sched = make_schedule(10)
    x0_hat = rng.standard_normal((4, 4))
    out = reverse_step(rng.standard_normal((4, 4)), x0_hat, 1, rng.standard_normal((4, 4)), sched)
    assert np.array_equal(out, x0_hat)
    assert np.all(reverse_step(np.zeros(3), np.zeros(3), 5, None, sched) == 0)
    with pytest.raises(ShapeMismatch):
        reverse_step(np.zeros(3), np.zeros(4), 5, None, sched)


def test_stepwise_forward_matches_marginal():
    rng = np.random.default_rng(1)
    sched = make_schedule(100)
    n, x0, t_end = 200_000, 0.6, 60
    x = np.full(n, x0)
    for t in range(1, t_end + 1):
        x = math.sqrt(sched.alpha[t]) * x + math.sqrt(sched.beta[t]) * rng.standard_normal(n)
    mean, var = math.sqrt(sched.alpha_bar[t_end]) * x0, 1 - sched.alpha_bar[t_end]
    assert abs(x.mean() - mean) < 3 * math.sqrt(var / n)
    # variance of the sample variance is 2 var^2 / (n - 1) for Gaussians
    assert abs(x.var() - var) < 3 * var * math.sqrt(2 / (n - 1))


def test_reverse_step_contracts_towards_target():
    rng = np.random.default_rng(2)
    sched = make_schedule(100)
    n, x0 = 100_000, -0.3
    for t in (100, 50, 5):
        x_t = forward_marginal(np.full(n, x0), t, rng.standard_normal(n), sched)
        x_prev = reverse_step(x_t, np.full(n, x0), t, rng.standard_normal(n), sched)
        before = np.mean((x_t - math.sqrt(sched.alpha_bar[t]) * x0) ** 2)
        after = np.mean((x_prev - math.sqrt(sched.alpha_bar[t - 1]) * x0) ** 2)
        assert after < before


def test_oracle_denoiser_recovers_target(rng):
    sched = make_schedule(100)
    target = rng.uniform(-1, 1, (5, 5, 1))
    den = OracleDenoiser(target)
    x_t = rng.standard_normal(target.shape)
    for t in (1, 50, 100):
        eps = predict_noise(den, x_t, t, sched)
        np.testing.assert_allclose(estimate_x0(x_t, t, eps, sched), target, atol=1e-12)


@pytest.mark.parametrize("variance", [0.0, 0.01, 0.2])
def test_gmm_posterior_mean_matches_quadrature(variance):
    sched = make_schedule(100)
    mus, ws = np.array([-0.6, 0.4]), np.array([0.3, 0.7])
    den = GMMDenoiser([np.full((1, 1), m) for m in mus], weights=ws, variance=variance)
    for t in (3, 40, 100):
        ab = sched.alpha_bar[t]
        for x_t in (-1.3, 0.05, 0.9):
            got = den.posterior_mean(np.full((1, 1), x_t), t, sched)[0, 0]
            lik = lambda x0: math.exp(-((x_t - math.sqrt(ab) * x0) ** 2) / (2 * (1 - ab)))
            if variance == 0.0:
                num = sum(w * m * lik(m) for w, m in zip(ws, mus))
                den_ = sum(w * lik(m) for w, m in zip(ws, mus))
            else:
                s = math.sqrt(variance)
                prior = lambda x0: sum(w * math.exp(-((x0 - m) ** 2) / (2 * variance)) for w, m in zip(ws, mus)) / s
                lo, hi = mus.min() - 12 * s, mus.max() + 12 * s
                num = integrate.quad(lambda x0: x0 * prior(x0) * lik(x0), lo, hi, points=list(mus), epsabs=1e-14, limit=200)[0]
                den_ = integrate.quad(lambda x0: prior(x0) * lik(x0), lo, hi, points=list(mus), epsabs=1e-14, limit=200)[0]
            assert got == pytest.approx(num / den_, abs=1e-9)


def test_gmm_validation():
    with pytest.raises(ParamError):
        GMMDenoiser([np.zeros(2), np.zeros(2)], weights=[0.5, 0.6])
    with pytest.raises(ParamError):
        GMMDenoiser([np.zeros(2)], variance=-1.0)


# --------------------------------------------------------------------------
# guided correction
# --------------------------------------------------------------------------


def _mse_set(lam=1.0):
    return ConditionSet(basic=((ConditionSpec("mse", BASIC), 1.0),), guidance_scale=lam)


def test_guidance_lambda_zero_is_identity(rng):
    x = rng.uniform(-1, 1, (4, 4, 1))
    srcs = [rng.random((4, 4, 1)) for _ in range(2)]
    np.testing.assert_array_equal(guided_correction(x, _mse_set(0.0), [], srcs), x)


def test_single_gradient_step(rng):
    x = rng.uniform(-0.5, 0.5, (4, 4, 1))
    srcs = [rng.random((4, 4, 1)) for _ in range(2)]
    _, g01 = eval_condition(ConditionSpec("mse"), from_engine(x), srcs)
    expect = x - 0.1 * 0.5 * x.size * g01
    np.testing.assert_allclose(guided_correction(x, _mse_set(0.1), [], srcs, max_halvings=None), expect, atol=1e-15)
    # a descent step is accepted as is by the backtracking
    np.testing.assert_allclose(guided_correction(x, _mse_set(0.1), [], srcs), expect, atol=1e-15)


def test_unit_scale_lands_on_midpoint(rng):
    srcs = [rng.random((8, 8, 1)) for _ in range(2)]
    x = rng.uniform(-1, 1, (8, 8, 1))
    out = guided_correction(x, _mse_set(1.0), [], srcs)
    np.testing.assert_allclose(from_engine(out), (srcs[0] + srcs[1]) / 2, atol=1e-12)


def test_sequential_order_is_reversed_active_list(rng):
    srcs = [rng.random((16, 16, 1)) for _ in range(2)]
    x = rng.uniform(-0.5, 0.5, (16, 16, 1))
    cs = ConditionSet(
        basic=((ConditionSpec("mse", BASIC), 0.7),),
        enhanced=(ConditionSpec("lf"), ConditionSpec("hf")),
        guidance_scale=0.05,
    )
    y = x.copy()
    for cid, w in (("hf", 1.0), ("lf", 1.0), ("mse", 0.7)):
        _, g = eval_condition(ConditionSpec(cid), from_engine(y), srcs)
        y = y - 0.05 * w * 0.5 * y.size * g
    got = guided_correction(x, cs, [0, 1], srcs, max_halvings=None)
    np.testing.assert_allclose(got, np.clip(y, -1, 1), atol=1e-14)
    _, gsum = combined_loss(cs, [0, 1], from_engine(x), srcs)
    par = guided_correction(x, cs, [0, 1], srcs, parallel_grads=True, max_halvings=None)
    np.testing.assert_allclose(par, np.clip(x - 0.05 * 0.5 * x.size * gsum, -1, 1), atol=1e-14)


def test_guidance_monotone_for_small_enough_scale(rng):
    srcs = [rng.random((16, 16, 1)) for _ in range(2)]
    cs = default_condition_set("mff")
    for trial in range(5):
        x = rng.uniform(-0.8, 0.8, (16, 16, 1))
        before = combined_loss(cs, [0, 2, 5], from_engine(x), srcs)[0]
        lam, ok = 4.0, False
        for _ in range(21):
            after = combined_loss(cs, [0, 2, 5], from_engine(guided_correction(x, cs, [0, 2, 5], srcs, lam=lam, max_halvings=None)), srcs)[0]
            if after <= before:
                ok = True
                break
            lam /= 2
        assert ok, trial


@pytest.mark.parametrize("cid", ["edge", "ssim", "ei", "sd"])
def test_backtracking_never_increases_a_single_condition(rng, cid):
    srcs = [rng.random((16, 16, 1)) for _ in range(2)]
    cs = ConditionSet(basic=((ConditionSpec(cid, BASIC), 1.0),))
    x = rng.uniform(-0.5, 0.5, (16, 16, 1))
    before = eval_condition(ConditionSpec(cid), from_engine(x), srcs)[0]
    for lam in (0.01, 1.0, 100.0):
        out = guided_correction(x, cs, [], srcs, lam=lam)
        assert eval_condition(ConditionSpec(cid), from_engine(out), srcs)[0] <= before + 1e-15


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def _run(srcs, cs, den, T=20, seed=0, k=3, **kw):
    return sample_fusion(srcs, cs, init_gate(len(cs.enhanced), k=k), den, make_schedule(T), seed=seed, **kw)


def test_unguided_oracle_run_reconstructs_target():
    i, v = complementary_pair(32)
    target = (i + v) / 2
    res = _run([i, v], default_condition_set("vif", guidance_scale=0.0), OracleDenoiser(to_engine(target)), T=100)
    assert np.abs(res.fused - target).max() < 1e-6


def test_sampling_is_deterministic():
    i, v = complementary_pair(16)
    den = GMMDenoiser([to_engine(i), to_engine(v)], variance=0.01)
    a = _run([i, v], default_condition_set("vif"), den, seed=4)
    b = _run([i, v], default_condition_set("vif"), den, seed=4)
    assert np.array_equal(a.fused, b.fused)
    assert a.trace.to_csv() == b.trace.to_csv()
    # guided runs on this pair all settle on the midpoint, so seed sensitivity
    # is checked without guidance
    free = default_condition_set("vif", guidance_scale=0.0)
    assert not np.array_equal(_run([i, v], free, den, seed=4).fused, _run([i, v], free, den, seed=5).fused)


def test_single_step_run():
    i, v = complementary_pair(16)
    cs = default_condition_set("vif", guidance_scale=0.5)
    den = GMMDenoiser([to_engine(i), to_engine(v)], variance=0.01)
    sched = make_schedule(1)
    res = sample_fusion([i, v], cs, init_gate(8, k=3), den, sched, seed=9)
    assert len(res.trace) == 1
    rng = np.random.default_rng(9)
    x = rng.standard_normal(i.shape)
    x0 = estimate_x0(x, 1, predict_noise(den, x, 1, sched), sched)
    sel = list(res.trace.records[0].selected)
    expect = np.clip(from_engine(guided_correction(x0, cs, sel, [i, v])), 0, 1)
    np.testing.assert_array_equal(res.fused, expect)


@pytest.mark.parametrize("selection,count", [("scs", 3), ("all", 8), ("none", 0)])
def test_selection_modes(selection, count):
    i, v = complementary_pair(16)
    den = GMMDenoiser([to_engine(i), to_engine(v)], variance=0.01)
    res = _run([i, v], default_condition_set("vif"), den, T=10, selection=selection)
    assert all(len(r.selected) == count for r in res.trace.records)
    assert res.trace.selection_counts().sum() == count * 10
    assert set(res.final_losses) == {"basic", "enhanced", "task_specific", "basic_combined"}
    assert res.basic_loss == pytest.approx(res.final_losses["basic"]["mse"])


def test_sampling_errors():
    i, v = complementary_pair(16)
    den = OracleDenoiser(np.zeros_like(i))
    cs = default_condition_set("vif")
    with pytest.raises(ShapeMismatch):
        _run([i, v[:8]], cs, den)
    with pytest.raises(ParamError):
        sample_fusion([i, v], cs, init_gate(3, k=1), den, make_schedule(5), seed=0)
    with pytest.raises(ParamError):
        _run([i, v], cs, den, selection="some")


def test_non_finite_sample_reports_step():
    class Broken:
        def predict_noise(self, x_t, t, sched):
            return np.full_like(x_t, np.nan) if t == 7 else np.zeros_like(x_t)

    i, v = complementary_pair(16)
    cs = ConditionSet(basic=((ConditionSpec("mse", BASIC), 1.0),), guidance_scale=0.0)
    with pytest.raises(NonFiniteError) as info:
        sample_fusion([i, v], cs, init_gate(0, k=0), Broken(), make_schedule(10), seed=0)
    assert info.value.step == 3
