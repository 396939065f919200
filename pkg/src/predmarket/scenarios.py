"""Synthetic market scenarios and the Monte Carlo harness.

Sellers are Gaussian forecasters: at time ``t`` seller ``i`` believes
``N(mu_it, sigma_i)`` with ``mu_it = C_i + nu * eps_it`` and submits the
normal quantiles ``mu_it + sigma_i * z_tau``. The realisation is drawn from
``N(sum_i w_it mu_it, sum_i w_it sigma_i)`` with fixed weights (time
invariant) or weights drifting along a smoothed sine schedule between two
endpoints (time varying).

Random draws come from independent child streams of one ``SeedSequence``
(seller noise, realisation noise, missingness, forced presence), each filled
sequentially, so the sample at step ``t`` depends only on the seed, the run
index, ``t`` and the configuration.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from statistics import NormalDist

import numpy as np

from .allocation import AllocationConfig, ShapleyState, allocate_level, settle_rewards
from .combination import (
    DEFAULT_ETA,
    QuantileModel,
    check_tau,
    qr_update,
    rqr_predict,
    rqr_update,
)
from .errors import ValidationError

METHODS = ("QR", "RQR", "mean-impute", "last-impute")

DEFAULT_OFFSETS = (0.0, 1.0, 2.0)
DEFAULT_WEIGHTS = (0.1, 0.6, 0.3)


def normal_quantile(tau):
    """Standard normal quantile ``z_tau``."""
    return NormalDist().inv_cdf(check_tau(tau))


@dataclass(frozen=True)
class SellerSpec:
    C: float
    nu: float = 0.5
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"seller sigma must be positive, got {self.sigma!r}")


def _simplex(w, name):
    w = tuple(float(v) for v in w)
    if any(v < 0 for v in w) or abs(math.fsum(w) - 1.0) > 1e-9:
        raise ValidationError(f"{name} must be nonnegative and sum to 1")
    return w


@dataclass(frozen=True)
class ScenarioConfig:
    sellers: tuple = tuple(SellerSpec(c) for c in DEFAULT_OFFSETS)
    true_weights: tuple = DEFAULT_WEIGHTS
    varying: bool = False
    w_start: tuple = (0.7, 0.2, 0.1)
    w_end: tuple = (0.1, 0.2, 0.7)
    smoothing: float = 0.999
    period: int | None = None
    T: int = 20000
    runs: int = 20
    missing_rate: float = 0.05
    quantile_levels: tuple = (0.1, 0.5, 0.9)
    seed: int = 0
    burn_in: int = 5000

    def __post_init__(self):
        n = len(self.sellers)
        if n < 1:
            raise ValidationError("a scenario needs at least one seller")
        for name in ("true_weights", "w_start", "w_end"):
            w = _simplex(getattr(self, name), name)
            if len(w) != n:
                raise ValidationError(f"{name} has {len(w)} entries for {n} sellers")
            object.__setattr__(self, name, w)
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValidationError(f"missing_rate must lie in [0, 1), got {self.missing_rate!r}")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValidationError("smoothing must lie in [0, 1)")
        if self.T < 1 or self.runs < 1:
            raise ValidationError("T and runs must be >= 1")
        if not 0 <= self.burn_in < self.T:
            raise ValidationError("burn_in must lie in [0, T)")
        if self.period is not None and self.period <= 0:
            raise ValidationError("period must be positive")
        levels = tuple(check_tau(t) for t in self.quantile_levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError("quantile levels must be strictly increasing")
        object.__setattr__(self, "quantile_levels", levels)

    @property
    def n(self):
        return len(self.sellers)

    @property
    def sine_period(self):
        return self.period or self.T

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class RoundSample:
    x_hat: np.ndarray  # (m, n) quantile submissions, row per level
    y: float
    alpha: np.ndarray
    w_true: np.ndarray
    mu: np.ndarray


def beta(t, period):
    return 0.5 * (1.0 + math.sin(2.0 * math.pi * t / period))


def target_weights(config, t):
    b = beta(t, config.sine_period)
    return (1.0 - b) * np.asarray(config.w_start) + b * np.asarray(config.w_end)


def weight_path(config, T=None):
    """True weights for every step, shape (T, n)."""
    T = config.T if T is None else T
    if not config.varying:
        return np.tile(np.asarray(config.true_weights), (T, 1))
    lam = config.smoothing
    out = np.empty((T, config.n))
    prev = target_weights(config, 0)
    for t in range(T):
        prev = lam * prev + (1.0 - lam) * target_weights(config, t)
        out[t] = prev
    return out


def gen_missingness(missing_rate, n, rng):
    """Independent Bernoulli(rate) absences; never everybody missing."""
    if not 0.0 <= missing_rate < 1.0:
        raise ValidationError("missing_rate must lie in [0, 1)")
    alpha = (rng.random(n) < missing_rate).astype(float)
    if alpha.all():
        alpha[rng.integers(n)] = 0.0
    return alpha


def _quantile_offsets(config):
    sigma = np.array([s.sigma for s in config.sellers])
    z = np.array([normal_quantile(t) for t in config.quantile_levels])
    return z[:, None] * sigma[None, :]


def _round(config, rng, w):
    C = np.array([s.C for s in config.sellers])
    nu = np.array([s.nu for s in config.sellers])
    sigma = np.array([s.sigma for s in config.sellers])
    mu = C + nu * rng.standard_normal(config.n)
    y = float(w @ mu + (w @ sigma) * rng.standard_normal())
    x = mu[None, :] + _quantile_offsets(config)
    alpha = gen_missingness(config.missing_rate, config.n, rng)
    return RoundSample(x, y, alpha, np.asarray(w, dtype=float), mu)


def gen_time_invariant(config, rng, t=None):
    """One round of the stationary scenario drawn from ``rng``."""
    return _round(config, rng, np.asarray(config.true_weights))


def gen_time_varying(config, rng, t, w_prev=None):
    """One round of the drifting scenario.

    ``w_prev`` is the previous step's true weight vector; by default the
    recursion starts from the target at ``t = 0``.
    """
    if w_prev is None:
        w_prev = target_weights(config, 0)
    lam = config.smoothing
    w = lam * np.asarray(w_prev) + (1.0 - lam) * target_weights(config, t)
    return _round(config, rng, w)


@dataclass
class ScenarioStream:
    """All draws of one Monte Carlo run, vectorised over time."""

    config: ScenarioConfig
    mu: np.ndarray
    w: np.ndarray
    y: np.ndarray
    alpha: np.ndarray

    @property
    def T(self):
        return self.y.size

    def forecasts(self, tau):
        """Submissions for level ``tau``, shape (T, n)."""
        sigma = np.array([s.sigma for s in self.config.sellers])
        return self.mu + sigma * normal_quantile(tau)

    def sample(self, t):
        x = self.mu[t][None, :] + _quantile_offsets(self.config)
        return RoundSample(x, float(self.y[t]), self.alpha[t].copy(), self.w[t].copy(), self.mu[t])


def run_seed(config, run):
    return np.random.SeedSequence(config.seed, spawn_key=(run,))


def draw_stream(config, run=0, T=None):
    T = config.T if T is None else T
    n = config.n
    g_eps, g_noise, g_miss, g_pick = (np.random.default_rng(s) for s in run_seed(config, run).spawn(4))
    C = np.array([s.C for s in config.sellers])
    nu = np.array([s.nu for s in config.sellers])
    sigma = np.array([s.sigma for s in config.sellers])
    mu = C + nu * g_eps.standard_normal((T, n))
    w = weight_path(config, T)
    y = (w * mu).sum(axis=1) + (w @ sigma) * g_noise.standard_normal(T)
    alpha = (g_miss.random((T, n)) < config.missing_rate).astype(float)
    pick = g_pick.integers(0, n, T)
    full = np.flatnonzero(alpha.all(axis=1))
    alpha[full, pick[full]] = 0.0
    return ScenarioStream(config, mu, w, y, alpha)


@dataclass
class ImputationHistory:
    """Running per-seller statistics of observed submissions."""

    sums: np.ndarray
    counts: np.ndarray
    last: np.ndarray

    @classmethod
    def empty(cls, n):
        return cls(np.zeros(n), np.zeros(n, dtype=int), np.zeros(n))

    def observe(self, x_hat, alpha):
        present = np.asarray(alpha) == 0
        x = np.asarray(x_hat, dtype=float)
        self.sums[present] += x[present]
        self.counts[present] += 1
        self.last[present] = x[present]


@dataclass
class Imputed:
    values: np.ndarray
    flagged: np.ndarray  # sellers imputed with 0 for lack of history


def _impute(history, x_hat, alpha, fill):
    x = np.array(x_hat, dtype=float)
    missing = np.asarray(alpha) != 0
    no_history = missing & (history.counts == 0)
    use = missing & ~no_history
    x[use] = fill[use]
    x[no_history] = 0.0
    return Imputed(x, no_history)


def impute_mean(history, x_hat, alpha):
    """Replace missing forecasts by the seller's running mean."""
    fill = history.sums / np.maximum(history.counts, 1)
    return _impute(history, x_hat, alpha, fill)


def impute_last(history, x_hat, alpha):
    """Replace missing forecasts by the seller's most recent submission."""
    return _impute(history, x_hat, alpha, history.last)


def estimate_weights(stream, method, tau, eta=DEFAULT_ETA):
    """Online weight trajectory of one run, shape (T, n)."""
    if method not in METHODS:
        raise ValidationError(f"unknown method {method!r}; choose from {METHODS}")
    x_all = stream.forecasts(tau)
    alpha_all = stream.alpha
    if method == "QR" and alpha_all.any():
        raise ValidationError("QR needs complete submissions; use a zero missing rate")
    n = stream.config.n
    model = QuantileModel.initial(tau, n, eta)
    history = ImputationHistory.empty(n)
    est = np.empty((stream.T, n))
    impute = {"mean-impute": impute_mean, "last-impute": impute_last}.get(method)
    for t in range(stream.T):
        x, a, y = x_all[t], alpha_all[t], stream.y[t]
        if method == "RQR":
            rqr_update(model, x, a, y)
        elif method == "QR":
            qr_update(model, x, y)
        else:
            filled = impute(history, x, a).values
            history.observe(x, a)
            qr_update(model, filled, y)
        est[t] = model.w
    return est


@dataclass
class WeightErrorStats:
    """Post-burn-in bias and variance of the estimated weights.

    ``bias`` is the run-average of the time-mean signed error, ``var`` the
    run-average of the within-run temporal variance; the ``_sd`` fields are
    across-run standard deviations.
    """

    bias: np.ndarray
    bias_sd: np.ndarray
    var: np.ndarray
    var_sd: np.ndarray
    runs: int
    burn_in: int


def weight_error_stats(estimates, truths, burn_in):
    est = np.asarray(estimates, dtype=float)[:, burn_in:, :]
    tru = np.asarray(truths, dtype=float)[:, burn_in:, :]
    run_bias = (est - tru).mean(axis=1)
    run_var = est.var(axis=1)
    ddof = 1 if est.shape[0] > 1 else 0
    return WeightErrorStats(
        bias=run_bias.mean(axis=0),
        bias_sd=run_bias.std(axis=0, ddof=ddof),
        var=run_var.mean(axis=0),
        var_sd=run_var.std(axis=0, ddof=ddof),
        runs=est.shape[0],
        burn_in=burn_in,
    )


@dataclass
class MonteCarloResult:
    method: str
    missing_rate: float
    tau: float
    eta: float
    stats: WeightErrorStats
    estimates: np.ndarray  # (runs, T, n)
    truths: np.ndarray
    alphas: np.ndarray


def run_monte_carlo(config, method, tau=0.5, eta=DEFAULT_ETA, keep_trajectories=True):
    """Run ``config.runs`` independent seeded simulations of one method."""
    runs = []
    for r in range(config.runs):
        stream = draw_stream(config, r)
        runs.append((estimate_weights(stream, method, tau, eta), stream.w, stream.alpha))
    est = np.stack([e for e, _, _ in runs])
    tru = np.stack([w for _, w, _ in runs])
    alp = np.stack([a for _, _, a in runs])
    stats = weight_error_stats(est, tru, config.burn_in)
    if not keep_trajectories:
        est = tru = alp = None
    return MonteCarloResult(method, config.missing_rate, tau, eta, stats, est, tru, alp)


def missingness_sweep(config, rates, method="RQR", tau=0.1, eta=DEFAULT_ETA):
    """Monte Carlo statistics for each missing rate, in the order given."""
    out = []
    for rate in rates:
        res = run_monte_carlo(config.replace(missing_rate=float(rate)), method, tau, eta,
                              keep_trajectories=False)
        out.append(res)
    return out


@dataclass
class RewardTrace:
    """Per-step monetary rewards of a simulated market run."""

    in_sample: np.ndarray  # (T, n)
    oos: np.ndarray
    totals: np.ndarray
    alpha: np.ndarray
    weights: np.ndarray  # (T, m, n) post-update w per level
    combined: np.ndarray  # (T, m)
    forecasts: np.ndarray = field(repr=False, default=None)  # (T, m, n) as submitted


def simulate_rewards(
    config,
    run=0,
    T=None,
    eta=DEFAULT_ETA,
    allocation=None,
    utility=100.0,
    method="RQR",
    bias=None,
):
    """Drive the allocation mechanism over one generated run.

    ``bias`` is an optional ``(seller_index, amount)``: that seller reports
    every quantile shifted by ``amount`` instead of its true belief. The
    random stream is unaffected, so a biased run and its truthful twin see the
    same world.
    """
    allocation = allocation or AllocationConfig()
    stream = draw_stream(config, run, T)
    T, n = stream.T, config.n
    levels = config.quantile_levels
    if method not in ("QR", "RQR"):
        raise ValidationError("reward simulation supports QR and RQR only")
    alpha_all = stream.alpha if method == "RQR" else np.zeros_like(stream.alpha)
    x_levels = np.stack([stream.forecasts(tau) for tau in levels], axis=1)  # (T, m, n)
    if bias is not None:
        seller, amount = bias
        x_levels[:, :, seller] += amount
    models = [QuantileModel.initial(tau, n, eta) for tau in levels]
    states = [ShapleyState.initial(n, allocation.lam) for _ in levels]
    seeds = np.random.SeedSequence(config.seed, spawn_key=(run, 1))
    rng = np.random.default_rng(seeds)
    ins = np.empty((T, n))
    oos = np.empty((T, n))
    tot = np.empty((T, n))
    weights = np.empty((T, len(levels), n))
    combined = np.empty((T, len(levels)))
    for t in range(T):
        a, y = alpha_all[t], stream.y[t]
        r_is, r_oos = [], []
        for k, model in enumerate(models):
            x = x_levels[t, k]
            combined[t, k] = rqr_predict(model, x, a)
            alloc = allocate_level(model, x, a, y, states[k], allocation, rng)
            states[k] = alloc.state
            r_is.append(alloc.r_is)
            r_oos.append(alloc.r_oos)
            rqr_update(model, x, a, y)
            weights[t, k] = model.w
        rewards = settle_rewards(utility, allocation, r_is, r_oos)
        ins[t] = rewards.in_sample_money
        oos[t] = rewards.oos_money
        tot[t] = rewards.totals
    return RewardTrace(ins, oos, tot, alpha_all, weights, combined, x_levels)


def _fmt(v):
    return repr(float(v))


def trajectories_csv(result, stride=1):
    """Text of the trajectory CSV: run, t, seller, w_true, w_est, alpha."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["run", "t", "seller", "w_true", "w_est", "alpha"])
    runs, T, n = result.estimates.shape
    for r in range(runs):
        for t in range(0, T, stride):
            for i in range(n):
                wr.writerow(
                    [r, t, i + 1, _fmt(result.truths[r, t, i]), _fmt(result.estimates[r, t, i]),
                     int(result.alphas[r, t, i])]
                )
    return buf.getvalue()


def stats_csv(results):
    """Text of the stats CSV: method, rate, seller, bias, bias_sd, var, var_sd."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["method", "rate", "seller", "bias", "bias_sd", "var", "var_sd"])
    for res in results:
        s = res.stats
        for i in range(s.bias.size):
            wr.writerow([res.method, _fmt(res.missing_rate), i + 1, _fmt(s.bias[i]),
                         _fmt(s.bias_sd[i]), _fmt(s.var[i]), _fmt(s.var_sd[i])])
    return buf.getvalue()


def reward_trace_csv(trace):
    """Cumulative per-seller rewards per step."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    n = trace.totals.shape[1]
    wr.writerow(["t"] + [f"seller_{i + 1}" for i in range(n)])
    cum = np.cumsum(trace.totals, axis=0)
    for t in range(cum.shape[0]):
        wr.writerow([t] + [_fmt(v) for v in cum[t]])
    return buf.getvalue()
