"""Shared builders for the test suite and the golden-file generator."""

import numpy as np

from predmarket.allocation import AllocationConfig
from predmarket.market import Market, MarketTask
from predmarket.scenarios import ScenarioConfig, SellerSpec, draw_stream
from predmarket.tables import table_from_stream

LEVELS = (0.1, 0.5, 0.9)

# 3 sellers with interior true weights, 200 rounds, 5% missing
FIXTURE_CONFIG = ScenarioConfig(
    sellers=tuple(SellerSpec(c, 2.0, 1.0) for c in (0.0, 1.0, 2.0)),
    true_weights=(0.3, 0.4, 0.3),
    T=200,
    runs=1,
    burn_in=0,
    missing_rate=0.05,
    quantile_levels=LEVELS,
    seed=2024,
)


def fixture_table():
    return table_from_stream(draw_stream(FIXTURE_CONFIG, 0))


def ten_round_market(ledger_path=None, rounds=10, seed=7):
    """Three sellers, seeded forecasts, one seller skipping every third round."""
    rng = np.random.default_rng(seed)
    task = MarketTask("golden", LEVELS, description="10-round fixture")
    market = Market(task, ["a", "b", "c"], eta=0.05, allocation=AllocationConfig(),
                    seed=seed, ledger_path=ledger_path)
    for t in range(rounds):
        mu = rng.normal([0.0, 1.0, 2.0], 0.5)
        y = float(rng.normal(1.2, 1.0))
        subs = {s: np.sort(mu[i] + np.array([-1.28, 0.0, 1.28])) for i, s in enumerate("abc")}
        if t % 3 == 2:
            del subs["b"]
        market.run_round(t, subs, [y], 100.0)
    return market
