"""Pay-off allocation: Shapley-based in-sample and score-based out-of-sample shares.

For every quantile level the client utility share ``U / m`` is split as

    r_i = U_level * (delta * r_is_i + (1 - delta) * r_oos_i)

where ``r_is`` comes from an exponentially smoothed Shapley value of the
seller's contribution to the robust combination, and ``r_oos`` from a
normalised pinball-loss score of the seller's own forecast.

The cooperative game behind the Shapley value is
``v(S) = -pinball(y, y_hat_S)``, with ``y_hat_S`` the robust prediction of the
current model when every seller outside ``S`` is treated as missing.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .combination import _masked, quantile_loss
from .errors import ValidationError

MAX_EXACT_PLAYERS = 20
SHAPLEY_METHODS = ("exact", "permutation")


@dataclass(frozen=True)
class AllocationConfig:
    delta: float = 0.5
    lam: float = 0.99
    shapley_method: str = "exact"
    shapley_samples: int = 1000

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValidationError(f"delta must lie in [0, 1], got {self.delta!r}")
        if not 0.0 <= self.lam < 1.0:
            raise ValidationError(f"lambda must lie in [0, 1), got {self.lam!r}")
        if self.shapley_method not in SHAPLEY_METHODS:
            raise ValidationError(f"unknown shapley method {self.shapley_method!r}")
        if self.shapley_samples < 1:
            raise ValidationError("shapley_samples must be >= 1")


@dataclass
class ShapleyState:
    """Instantaneous and recursive Shapley values for one quantile model."""

    phi_s: np.ndarray
    phi_c: np.ndarray
    lam: float = 0.99

    @classmethod
    def initial(cls, n, lam=0.99):
        return cls(np.zeros(n), np.zeros(n), lam)

    def copy(self):
        return ShapleyState(self.phi_s.copy(), self.phi_c.copy(), self.lam)

    def add_seller(self):
        self.phi_s = np.append(self.phi_s, 0.0)
        self.phi_c = np.append(self.phi_c, 0.0)
        return self


def _available(alpha):
    return [i for i, a in enumerate(np.asarray(alpha, dtype=float).reshape(-1).tolist()) if a == 0.0]


class _Game:
    """Coalition values over the available sellers, memoised by bitmask."""

    def __init__(self, model, x_hat, alpha, y):
        self.tau = model.tau
        self.y = float(y)
        self.w = model.w.tolist()
        self.D = model.D.tolist()
        self.n = model.n
        self.x = _masked(x_hat, np.asarray(alpha, dtype=float).reshape(-1).tolist())
        self.players = _available(alpha)
        self._cache = {}

    def members(self, bits):
        return [p for k, p in enumerate(self.players) if bits >> k & 1]

    def value_of(self, members):
        inside = set(members)
        outside = [j for j in range(self.n) if j not in inside]
        w, D, x = self.w, self.D, self.x
        if outside:
            pred = math.fsum(
                [math.fsum([w[i]] + [D[i][j] for j in outside]) * x[i] for i in members]
            )
        else:
            pred = math.fsum([w[i] * x[i] for i in members])
        return -quantile_loss(self.tau, self.y, pred)

    def value(self, bits):
        v = self._cache.get(bits)
        if v is None:
            v = self._cache[bits] = self.value_of(self.members(bits))
        return v


@functools.lru_cache(maxsize=None)
def _shapley_terms(na):
    """Per player: (weight, S, S + player) over subsets S without the player."""
    fact = math.factorial
    weight = [fact(s) * fact(na - s - 1) / fact(na) for s in range(na)]
    terms = []
    for k in range(na):
        bit = 1 << k
        terms.append(
            tuple(
                (weight[bin(bits).count("1")], bits, bits | bit)
                for bits in range(1 << na)
                if not bits & bit
            )
        )
    return tuple(terms)


def coalition_value(model, x_hat, alpha, y, coalition):
    """Characteristic function ``v(S) = -pinball(y, rqr prediction using S only)``."""
    avail = set(_available(alpha))
    coalition = sorted(set(int(i) for i in coalition))
    if not avail.issuperset(coalition):
        raise ValidationError("coalition contains sellers that are missing this round")
    return _Game(model, x_hat, alpha, y).value_of(coalition)


def shapley_exact(model, x_hat, alpha, y):
    """Exact Shapley values of the available sellers by subset enumeration.

    Missing sellers get 0. Limited to ``MAX_EXACT_PLAYERS`` available sellers.
    """
    game = _Game(model, x_hat, alpha, y)
    na = len(game.players)
    phi = np.zeros(game.n)
    if na == 0:
        return phi
    if na > MAX_EXACT_PLAYERS:
        raise ValidationError(
            f"{na} available sellers exceed the exact-enumeration limit of "
            f"{MAX_EXACT_PLAYERS}; use shapley_sampled instead"
        )
    values = [game.value_of(game.members(bits)) for bits in range(1 << na)]
    for player, terms in zip(game.players, _shapley_terms(na)):
        phi[player] = math.fsum([c * (values[b] - values[a]) for c, a, b in terms])
    return phi


def shapley_sampled(model, x_hat, alpha, y, num_permutations, rng=None, return_stderr=False):
    """Monte Carlo Shapley estimate from random seller orderings.

    When ``num_permutations`` reaches ``n_a!`` every ordering is visited exactly
    once instead, which reproduces the exact values.
    """
    if num_permutations < 1:
        raise ValidationError("num_permutations must be >= 1")
    game = _Game(model, x_hat, alpha, y)
    na = len(game.players)
    phi = np.zeros(game.n)
    stderr = np.zeros(game.n)
    if na == 0:
        return (phi, stderr) if return_stderr else phi
    if na <= 12 and num_permutations >= math.factorial(na):
        orders = list(itertools.permutations(range(na)))
    else:
        rng = np.random.default_rng(rng)
        orders = [rng.permutation(na) for _ in range(num_permutations)]
    samples = np.empty((len(orders), na))
    for r, order in enumerate(orders):
        bits = 0
        prev = game.value(0)
        for k in order:
            bits |= 1 << int(k)
            cur = game.value(bits)
            samples[r, k] = cur - prev
            prev = cur
    for k, player in enumerate(game.players):
        phi[player] = math.fsum(samples[:, k]) / len(orders)
        if len(orders) > 1:
            stderr[player] = samples[:, k].std(ddof=1) / math.sqrt(len(orders))
    return (phi, stderr) if return_stderr else phi


def shapley_recursive_update(state, phi_s):
    """Exponential forgetting: ``phi_c <- lam * phi_c + (1 - lam) * phi_s``.

    Applies to every seller; absent sellers have ``phi_s = 0`` and decay.
    """
    phi_s = np.asarray(phi_s, dtype=float).reshape(-1)
    lam = state.lam
    return ShapleyState(phi_s.copy(), lam * state.phi_c + (1.0 - lam) * phi_s, lam)


def in_sample_rewards(phi_c, alpha):
    """Shares proportional to the positive part of ``phi_c`` over available sellers.

    Falls back to an equal split when no available seller has a positive
    value; returns all zeros when nobody is available.
    """
    phi_c = np.asarray(phi_c, dtype=float).reshape(-1)
    avail = _available(alpha)
    shares = np.zeros(phi_c.size)
    if not avail:
        return shares
    pos = [max(0.0, phi_c[i]) for i in avail]
    total = math.fsum(pos)
    if total > 0.0:
        for i, p in zip(avail, pos):
            shares[i] = p / total
    else:
        shares[avail] = 1.0 / len(avail)
    return shares


def scores_from_losses(losses, alpha):
    """Score ``1 - L_i / sum_j L_j`` over available sellers.

    A lone available seller scores 1; if every available loss is zero the
    scores are all ``1 / n_avail``.
    """
    losses = np.asarray(losses, dtype=float).reshape(-1)
    avail = _available(alpha)
    sc = np.zeros(losses.size)
    if not avail:
        return sc
    if len(avail) == 1:
        sc[avail[0]] = 1.0
        return sc
    total = math.fsum(losses[i] for i in avail)
    if total == 0.0:
        sc[avail] = 1.0 / len(avail)
        return sc
    for i in avail:
        sc[i] = 1.0 - losses[i] / total
    return sc


def oos_scores(tau, y, x_hat, alpha):
    x = np.asarray(x_hat, dtype=float).reshape(-1)
    avail = _available(alpha)
    losses = np.zeros(x.size)
    for i in avail:
        losses[i] = quantile_loss(tau, y, x[i])
    return scores_from_losses(losses, alpha)


def oos_rewards(sc, alpha):
    """Normalise scores to shares over the available sellers."""
    sc = np.asarray(sc, dtype=float).reshape(-1)
    avail = _available(alpha)
    shares = np.zeros(sc.size)
    total = math.fsum(sc[i] for i in avail)
    if total > 0.0:
        for i in avail:
            shares[i] = sc[i] / total
    return shares


@dataclass
class RewardBreakdown:
    """Monetary outcome of one settlement.

    Row ``k`` of the per-level arrays belongs to the ``k``-th model instance
    (quantile level, or level and lead time).
    """

    utility: float
    level_utility: float
    delta: float
    r_is: np.ndarray
    r_oos: np.ndarray
    r_level: np.ndarray
    totals: np.ndarray = field(default=None)

    @property
    def in_sample_money(self):
        return np.array(
            [math.fsum(col) for col in (self.level_utility * self.delta * self.r_is).T]
        )

    @property
    def oos_money(self):
        return np.array(
            [math.fsum(col) for col in (self.level_utility * (1.0 - self.delta) * self.r_oos).T]
        )


def settle_rewards(utility, config, r_is, r_oos):
    """Turn per-level shares into money; ``utility`` is split evenly over levels."""
    if utility < 0:
        raise ValidationError(f"utility must be non-negative, got {utility!r}")
    r_is = np.atleast_2d(np.asarray(r_is, dtype=float))
    r_oos = np.atleast_2d(np.asarray(r_oos, dtype=float))
    if r_is.shape != r_oos.shape:
        raise ValidationError("in-sample and out-of-sample shares differ in shape")
    m = r_is.shape[0]
    level_utility = float(utility) / m
    delta = config.delta
    r_level = level_utility * (delta * r_is + (1.0 - delta) * r_oos)
    totals = np.array([math.fsum(col) for col in r_level.T])
    return RewardBreakdown(float(utility), level_utility, delta, r_is, r_oos, r_level, totals)


@dataclass
class LevelAllocation:
    phi_s: np.ndarray
    state: ShapleyState
    r_is: np.ndarray
    scores: np.ndarray
    r_oos: np.ndarray


def allocate_level(model, x_hat, alpha, y, state, config, rng=None):
    """Shares for one model instance, computed from the pre-update model."""
    if config.shapley_method == "exact":
        phi_s = shapley_exact(model, x_hat, alpha, y)
    else:
        phi_s = shapley_sampled(model, x_hat, alpha, y, config.shapley_samples, rng)
    new_state = shapley_recursive_update(state, phi_s)
    r_is = in_sample_rewards(new_state.phi_c, alpha)
    sc = oos_scores(model.tau, y, x_hat, alpha)
    return LevelAllocation(phi_s, new_state, r_is, sc, oos_rewards(sc, alpha))


__all__ = [
    "AllocationConfig",
    "LevelAllocation",
    "RewardBreakdown",
    "ShapleyState",
    "allocate_level",
    "coalition_value",
    "in_sample_rewards",
    "oos_rewards",
    "oos_scores",
    "scores_from_losses",
    "settle_rewards",
    "shapley_exact",
    "shapley_recursive_update",
    "shapley_sampled",
]
