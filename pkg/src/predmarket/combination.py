"""Online quantile-regression forecast combination.

Two combiners are provided, both learned one observation at a time with
projected online (sub)gradient descent on the pinball loss:

* QR, a convex combination ``y_hat = w . x`` of the sellers' quantile
  forecasts, valid only when every seller submitted;
* RQR, the robust variant ``y_hat = (w + D alpha) . x(alpha)`` where
  ``alpha`` flags missing sellers and ``D`` learns how the remaining
  weights should compensate for each absent seller.

Each quantile level (and each lead time) owns its own ``QuantileModel``.
Predictions are accumulated with ``math.fsum`` so that the result does not
depend on seller ordering; duplicated sellers therefore get bit-identical
treatment everywhere downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

DEFAULT_ETA = 0.01


def quantile_loss(tau, y, y_hat):
    """Pinball loss of forecast ``y_hat`` for the ``tau`` quantile of ``y``.

    Works on scalars or broadcastable arrays.
    """
    if isinstance(y, (np.ndarray, list, tuple)) or isinstance(y_hat, (np.ndarray, list, tuple)):
        diff = np.asarray(y, dtype=float) - np.asarray(y_hat, dtype=float)
        return np.where(diff >= 0, diff * tau, -diff * (1.0 - tau))
    diff = float(y) - float(y_hat)
    return diff * tau if diff >= 0 else -diff * (1.0 - tau)


def loss_subgradient_pred(tau, y, y_hat):
    """Subgradient of the pinball loss with respect to the prediction.

    At the kink ``y == y_hat`` this returns 0, which lies in the
    subdifferential ``[-tau, 1 - tau]``.
    """
    if y > y_hat:
        return -tau
    if y_hat > y:
        return 1.0 - tau
    return 0.0


def _project_list(v):
    if len(v) == 1:
        return [1.0]
    u = sorted(v, reverse=True)
    css = 0.0
    theta = 0.0
    for k, uk in enumerate(u, start=1):
        css += uk
        cand = (css - 1.0) / k
        if uk - cand > 0:
            theta = cand
    return [vi - theta if vi > theta else 0.0 for vi in v]


def project_to_simplex(v):
    """Euclidean projection of ``v`` onto the probability simplex.

    Sort-and-threshold algorithm, O(n log n).
    """
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError("project_to_simplex needs a non-empty 1-d vector")
    if not np.all(np.isfinite(v)):
        raise ValidationError("project_to_simplex needs finite entries")
    if v.size == 1:
        return np.ones(1)
    return np.array(_project_list(v.tolist()))


def check_tau(tau):
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValidationError(f"quantile level must lie in (0, 1), got {tau!r}")
    return tau


def _mask(alpha, n):
    """Validated availability mask as a list of 0.0/1.0 floats."""
    a = np.asarray(alpha, dtype=float).reshape(-1).tolist()
    if len(a) != n:
        raise ValidationError(f"availability mask has length {len(a)}, expected {n}")
    if not set(a) <= {0.0, 1.0}:
        raise ValidationError("availability mask entries must be 0 or 1")
    return a


def _masked(x_hat, a):
    x = np.asarray(x_hat, dtype=float).reshape(-1).tolist()
    if len(x) != len(a):
        raise ValidationError(f"expected {len(a)} forecasts, got {len(x)}")
    return [0.0 if ai else xi for xi, ai in zip(x, a)]


def masked_forecasts(x_hat, alpha):
    """Zero the forecasts of missing sellers (NaN placeholders included)."""
    a = np.asarray(alpha, dtype=float).reshape(-1).tolist()
    return np.array(_masked(x_hat, a))


@dataclass
class QuantileModel:
    """Learning state of one combiner for a single quantile level.

    ``w`` lives on the probability simplex; ``D[i, j]`` is the correction
    added to seller ``i``'s weight when seller ``j`` is missing.
    """

    tau: float
    w: np.ndarray
    D: np.ndarray
    eta: float = DEFAULT_ETA

    def __post_init__(self):
        self.tau = check_tau(self.tau)
        self.w = np.array(self.w, dtype=float).reshape(-1)
        n = self.w.size
        if n == 0:
            raise ValidationError("a model needs at least one seller")
        self.D = np.array(self.D, dtype=float).reshape(n, n)
        if not self.eta > 0:
            raise ValidationError(f"learning rate must be positive, got {self.eta!r}")
        self.eta = float(self.eta)

    @classmethod
    def initial(cls, tau, n, eta=DEFAULT_ETA):
        """Uniform weights, zero correction."""
        return cls(tau, np.full(n, 1.0 / n), np.zeros((n, n)), eta)

    @property
    def n(self):
        return self.w.size

    def copy(self):
        return QuantileModel(self.tau, self.w.copy(), self.D.copy(), self.eta)

    def add_seller(self):
        """Extend by one seller with zero weight and zero corrections."""
        n = self.n
        self.w = project_to_simplex(np.append(self.w, 0.0))
        D = np.zeros((n + 1, n + 1))
        D[:n, :n] = self.D
        self.D = D
        return self

    # thin method aliases so callers can stay object-oriented
    def predict(self, x_hat, alpha=None):
        if alpha is None:
            return qr_predict(self, x_hat)
        return rqr_predict(self, x_hat, alpha)

    def update(self, x_hat, y, alpha=None):
        if alpha is None:
            return qr_update(self, x_hat, y)
        return rqr_update(self, x_hat, alpha, y)


def _dot(a, b):
    return math.fsum([p * q for p, q in zip(a, b)])


def _theta(w, D, a):
    missing = [j for j, aj in enumerate(a) if aj]
    if not missing:
        return w
    return [math.fsum([wi] + [D[i][j] for j in missing]) for i, wi in enumerate(w)]


def _step(model, x, y_hat, y):
    """Raw gradient step ``eta * g * x`` or None when nothing moves."""
    g = loss_subgradient_pred(model.tau, y, y_hat)
    if g == 0.0:
        return None
    eg = model.eta * g
    step = [eg * xi for xi in x]
    return step if any(step) else None


def qr_predict(model, x_hat):
    """Convex combination ``w . x`` of complete submissions."""
    x = np.asarray(x_hat, dtype=float).reshape(-1)
    if x.size != model.n:
        raise ValidationError(f"expected {model.n} forecasts, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("QR needs every forecast present; use rqr_predict")
    return _dot(model.w.tolist(), x.tolist())


def qr_update(model, x_hat, y):
    """One projected subgradient step of QR; updates ``model`` in place."""
    y_hat = qr_predict(model, x_hat)
    x = np.asarray(x_hat, dtype=float).reshape(-1).tolist()
    step = _step(model, x, y_hat, y)
    if step is not None:
        w = model.w.tolist()
        model.w = np.array(_project_list([wi - si for wi, si in zip(w, step)]))
    return model


def rqr_effective_weights(model, alpha):
    """Corrected weights ``theta = w + D alpha`` (not re-projected)."""
    a = _mask(alpha, model.n)
    return np.array(_theta(model.w.tolist(), model.D.tolist(), a))


def rqr_predict(model, x_hat, alpha):
    """Robust combination ``theta(alpha) . x(alpha)``.

    Missing sellers contribute nothing; an all-missing round yields 0.
    """
    a = _mask(alpha, model.n)
    x = _masked(x_hat, a)
    return _dot(_theta(model.w.tolist(), model.D.tolist(), a), x)


def rqr_update(model, x_hat, alpha, y):
    """One projected subgradient step of RQR on ``w`` and ``D``, in place.

    The raw gradient is ``g * x(alpha)`` for ``w`` and
    ``g * outer(x(alpha), alpha)`` for ``D``: weights of missing sellers get
    no gradient and ``D`` only moves when someone is missing.
    """
    a = _mask(alpha, model.n)
    x = _masked(x_hat, a)
    w = model.w.tolist()
    y_hat = _dot(_theta(w, model.D.tolist(), a), x)
    step = _step(model, x, y_hat, y)
    if step is None:
        return model
    model.w = np.array(_project_list([wi - si for wi, si in zip(w, step)]))
    if any(a):
        model.D = model.D - np.outer(step, a)
    return model
