import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predmarket.errors import ValidationError
from predmarket.scenarios import (
    ImputationHistory,
    ScenarioConfig,
    SellerSpec,
    beta,
    draw_stream,
    estimate_weights,
    gen_missingness,
    gen_time_invariant,
    gen_time_varying,
    impute_last,
    impute_mean,
    missingness_sweep,
    normal_quantile,
    reward_trace_csv,
    run_monte_carlo,
    simulate_rewards,
    stats_csv,
    target_weights,
    trajectories_csv,
    weight_path,
)


def bisect_quantile(p, lo=-10.0, hi=10.0):
    cdf = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))  # noqa: E731
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if cdf(mid) < p else (lo, mid)
    return 0.5 * (lo + hi)


@pytest.mark.parametrize("tau", [0.01, 0.1, 0.5, 0.9, 0.975])
def test_normal_quantile_matches_bisection(tau):
    assert normal_quantile(tau) == pytest.approx(bisect_quantile(tau), abs=1e-9)


def test_median_submission_is_the_mean():
    config = ScenarioConfig(quantile_levels=(0.5,))
    s = gen_time_invariant(config, np.random.default_rng(0))
    np.testing.assert_array_equal(s.x_hat[0], s.mu)


def test_noiseless_sellers_submit_offset_quantiles():
    sellers = tuple(SellerSpec(c, 0.0, 2.0) for c in (0.0, 1.0, 2.0))
    config = ScenarioConfig(sellers=sellers, quantile_levels=(0.9,))
    s = gen_time_invariant(config, np.random.default_rng(0))
    np.testing.assert_allclose(s.x_hat[0], np.array([0.0, 1.0, 2.0]) + 2.0 * bisect_quantile(0.9),
                               atol=1e-9)


def test_degenerate_weights_center_on_first_seller():
    sellers = tuple(SellerSpec(c, 0.0, 1.0) for c in (0.0, 1.0, 2.0))
    config = ScenarioConfig(sellers=sellers, true_weights=(1.0, 0.0, 0.0), T=20000, burn_in=0)
    y = draw_stream(config).y
    assert abs(y.mean()) < 4 / math.sqrt(y.size)


def test_quantiles_nondecreasing():
    config = ScenarioConfig(quantile_levels=(0.05, 0.1, 0.5, 0.9, 0.95), T=500, burn_in=0)
    stream = draw_stream(config)
    x = np.stack([stream.forecasts(t) for t in config.quantile_levels], axis=1)
    assert np.all(np.diff(x, axis=1) >= 0)


@pytest.mark.parametrize("tau", [0.1, 0.5, 0.9])
def test_coverage_of_true_combined_quantile(tau):
    config = ScenarioConfig(T=100_000, burn_in=0, missing_rate=0.0)
    stream = draw_stream(config)
    w = np.asarray(config.true_weights)
    sigma = np.array([s.sigma for s in config.sellers])
    q = stream.mu @ w + (w @ sigma) * normal_quantile(tau)
    assert abs(np.mean(stream.y <= q) - tau) <= 0.01


def test_beta_and_schedule_examples():
    assert beta(0, 100) == 0.5
    same = ScenarioConfig(varying=True, w_start=(0.2, 0.5, 0.3), w_end=(0.2, 0.5, 0.3), T=300,
                          burn_in=0)
    np.testing.assert_allclose(weight_path(same), np.tile([0.2, 0.5, 0.3], (300, 1)), atol=1e-15)
    raw = ScenarioConfig(varying=True, smoothing=0.0, T=300, burn_in=0, period=50)
    expected = np.array([target_weights(raw, t) for t in range(300)])
    np.testing.assert_array_equal(weight_path(raw), expected)


def test_vectorised_path_matches_step_recursion():
    config = ScenarioConfig(varying=True, T=400, burn_in=0, period=100, smoothing=0.9)
    rng = np.random.default_rng(0)
    w, rows = None, []
    for t in range(400):
        s = gen_time_varying(config, rng, t, w)
        w = s.w_true
        rows.append(w)
    np.testing.assert_allclose(weight_path(config), np.array(rows), rtol=0, atol=1e-14)
    assert np.allclose(np.array(rows).sum(axis=1), 1.0)


def test_missingness_examples():
    rng = np.random.default_rng(0)
    assert not gen_missingness(0.0, 5, rng).any()
    for _ in range(100):
        assert gen_missingness(0.99, 1, rng).tolist() == [0.0]
    with pytest.raises(ValidationError):
        gen_missingness(1.0, 3, rng)


def test_missingness_marginal_with_forcing_rule():
    rng = np.random.default_rng(1)
    draws = np.array([gen_missingness(0.9, 3, rng) for _ in range(100_000)])
    assert not draws.all(axis=1).any()
    exact = 0.9 - 0.9**3 / 3
    freq = draws.mean(axis=0)
    sd = math.sqrt(exact * (1 - exact) / draws.shape[0])
    assert np.all(freq < 0.9)
    assert np.all(np.abs(freq - exact) <= 3 * sd)


def test_stream_never_all_missing():
    stream = draw_stream(ScenarioConfig(missing_rate=0.8, T=5000, burn_in=0))
    assert not stream.alpha.all(axis=1).any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 5), st.integers(1, 300), st.integers(1, 300),
       st.booleans())
def test_samples_are_pure_functions_of_seed_run_and_t(seed, run, t1, t2, varying):
    config = ScenarioConfig(seed=seed, T=300, burn_in=0, varying=varying, missing_rate=0.3)
    short, long_ = draw_stream(config, run, T=min(t1, t2)), draw_stream(config, run, T=max(t1, t2))
    k = min(t1, t2)
    np.testing.assert_array_equal(short.mu, long_.mu[:k])
    np.testing.assert_array_equal(short.y, long_.y[:k])
    np.testing.assert_array_equal(short.alpha, long_.alpha[:k])
    a, b = short.sample(k - 1), long_.sample(k - 1)
    np.testing.assert_array_equal(a.x_hat, b.x_hat)


def test_runs_use_independent_streams():
    config = ScenarioConfig(T=100, burn_in=0)
    assert not np.array_equal(draw_stream(config, 0).y, draw_stream(config, 1).y)


def test_imputation_examples():
    h = ImputationHistory.empty(2)
    out = impute_mean(h, [5.0, 7.0], [0, 0])
    np.testing.assert_array_equal(out.values, [5.0, 7.0])
    first = impute_last(h, [5.0, np.nan], [0, 1])
    assert first.values.tolist() == [5.0, 0.0] and first.flagged.tolist() == [False, True]
    for v in (1.0, 2.0, 3.0):
        h.observe([v, v], [0, 0])
    assert impute_mean(h, [0.0, np.nan], [0, 1]).values[1] == 2.0
    assert impute_last(h, [0.0, np.nan], [0, 1]).values[1] == 3.0


def test_zero_missingness_collapses_every_method_to_qr():
    config = ScenarioConfig(T=3000, burn_in=0, missing_rate=0.0)
    stream = draw_stream(config, 2)
    ref = estimate_weights(stream, "QR", 0.1)
    for method in ("RQR", "mean-impute", "last-impute"):
        np.testing.assert_array_equal(estimate_weights(stream, method, 0.1), ref)


def test_qr_rejects_missing_data():
    stream = draw_stream(ScenarioConfig(T=200, burn_in=0, missing_rate=0.3))
    with pytest.raises(ValidationError):
        estimate_weights(stream, "QR", 0.5)
    with pytest.raises(ValidationError):
        estimate_weights(stream, "ridge", 0.5)


def test_monte_carlo_is_deterministic_and_small_run_collapses():
    config = ScenarioConfig(T=600, runs=2, burn_in=100, missing_rate=0.0)
    a = run_monte_carlo(config, "QR")
    b = run_monte_carlo(config, "QR")
    np.testing.assert_array_equal(a.stats.bias, b.stats.bias)
    np.testing.assert_array_equal(a.stats.var, b.stats.var)
    np.testing.assert_array_equal(a.estimates, run_monte_carlo(config, "RQR").estimates)
    assert np.all(a.stats.var >= 0)


def test_error_stats_oracle():
    config = ScenarioConfig(T=300, runs=3, burn_in=50, missing_rate=0.1)
    res = run_monte_carlo(config, "RQR", tau=0.3)
    err = res.estimates[:, 50:, :] - res.truths[:, 50:, :]
    for i in range(3):
        per_run = [float(np.mean(err[r, :, i])) for r in range(3)]
        assert res.stats.bias[i] == pytest.approx(np.mean(per_run), abs=1e-15)
        assert res.stats.bias_sd[i] == pytest.approx(np.std(per_run, ddof=1), abs=1e-15)
        var_runs = [float(np.var(res.estimates[r, 50:, i])) for r in range(3)]
        assert res.stats.var[i] == pytest.approx(np.mean(var_runs), abs=1e-15)


def test_sweep_single_rate_matches_monte_carlo():
    config = ScenarioConfig(T=500, runs=2, burn_in=100)
    [swept] = missingness_sweep(config, [0.05], "RQR", tau=0.1)
    direct = run_monte_carlo(config.replace(missing_rate=0.05), "RQR", tau=0.1)
    np.testing.assert_array_equal(swept.stats.bias, direct.stats.bias)
    np.testing.assert_array_equal(swept.stats.var, direct.stats.var)


def test_csv_outputs():
    config = ScenarioConfig(T=20, runs=2, burn_in=5)
    res = run_monte_carlo(config, "RQR")
    lines = trajectories_csv(res, stride=5).splitlines()
    assert lines[0] == "run,t,seller,w_true,w_est,alpha"
    assert len(lines) == 1 + 2 * 4 * 3
    row = lines[1].split(",")
    assert float(row[4]) == res.estimates[0, 0, 0]
    stats = stats_csv([res]).splitlines()
    assert stats[0] == "method,rate,seller,bias,bias_sd,var,var_sd"
    assert stats[1].startswith("RQR,0.05,1,")


def test_reward_simulation_balances_budget_and_zeroes_absentees():
    config = ScenarioConfig(T=300, burn_in=0, missing_rate=0.2)
    trace = simulate_rewards(config, 0, utility=50.0)
    np.testing.assert_allclose(trace.totals.sum(axis=1), 50.0, rtol=1e-12)
    assert np.all(trace.totals[trace.alpha == 1] == 0)
    assert np.all(trace.totals >= 0)
    text = reward_trace_csv(trace).splitlines()
    assert text[0] == "t,seller_1,seller_2,seller_3" and len(text) == 301


def test_reward_simulation_matches_market_engine():
    from predmarket.market import Market, MarketTask

    config = ScenarioConfig(T=60, burn_in=0, missing_rate=0.2)
    trace = simulate_rewards(config, 0, utility=10.0)
    mk = Market(MarketTask("sim", config.quantile_levels), ["1", "2", "3"])
    for t in range(60):
        subs = {str(i + 1): trace.forecasts[t, :, i] for i in range(3) if not trace.alpha[t, i]}
        y = draw_stream(config, 0).y[t]
        rec = mk.run_round(t, subs, [y], 10.0)
        np.testing.assert_array_equal(rec.rewards.totals, trace.totals[t])
        np.testing.assert_array_equal(rec.combined[0], trace.combined[t])


def test_rqr_error_scale_at_defaults():
    # reference scale for RQR at 5% missingness: variance about 1.7e-3, |bias| within 1e-2
    res = run_monte_carlo(ScenarioConfig(missing_rate=0.05), "RQR", tau=0.1,
                          keep_trajectories=False)
    assert np.all(np.abs(res.stats.bias) <= 1e-2)
    assert np.all((res.stats.var >= 0.5 * 1.7e-3) & (res.stats.var <= 2 * 1.7e-3))
