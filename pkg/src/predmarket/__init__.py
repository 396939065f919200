"""Prediction-market engine for probabilistic forecasts.

Sellers submit quantile forecasts; the market combines them online with a
robust quantile-regression model that tolerates missing submissions, and
splits the client's payment between sellers by their in-sample (Shapley)
contribution and out-of-sample forecast skill.
"""

from .allocation import (
    AllocationConfig,
    RewardBreakdown,
    ShapleyState,
    allocate_level,
    coalition_value,
    in_sample_rewards,
    oos_rewards,
    oos_scores,
    settle_rewards,
    shapley_exact,
    shapley_recursive_update,
    shapley_sampled,
)
from .combination import (
    QuantileModel,
    loss_subgradient_pred,
    project_to_simplex,
    qr_predict,
    qr_update,
    quantile_loss,
    rqr_effective_weights,
    rqr_predict,
    rqr_update,
)
from .errors import (
    ConfigError,
    ConflictError,
    LateSubmissionError,
    MarketError,
    ReplayError,
    StateError,
    ValidationError,
)
from .market import Market, MarketTask, read_ledger, replay_ledger

__version__ = "0.1.0"
