"""Market lifecycle: sessions, settlement and the append-only ledger.

A :class:`Market` owns one :class:`QuantileModel` and one
:class:`ShapleyState` per (lead time, quantile level) instance. Each round
goes through ``open_session -> submit_forecast* -> close_and_aggregate ->
settle_session``. Settlement computes the allocation from the pre-update
models, then applies the RQR update, and commits both atomically together
with a ledger record.

The ledger is JSON lines. The first line is a ``market`` header carrying
everything needed to rebuild an empty market; later lines are ``join`` and
``settlement`` events numbered by ``seq``. :func:`replay_ledger` rebuilds the
market by re-running every settlement and checks the recomputed model and
Shapley snapshots against the recorded ones.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .allocation import AllocationConfig, ShapleyState, allocate_level, settle_rewards
from .combination import DEFAULT_ETA, QuantileModel, check_tau, rqr_predict, rqr_update
from .errors import (
    ConflictError,
    LateSubmissionError,
    MarketError,
    ReplayError,
    StateError,
    ValidationError,
)

LEDGER_FORMAT = 1


@dataclass(frozen=True)
class MarketTask:
    task_id: str
    quantile_levels: tuple
    horizon_steps: int = 1
    description: str = ""
    submission_deadline: str | None = None

    def __post_init__(self):
        levels = tuple(check_tau(t) for t in self.quantile_levels)
        if not levels:
            raise ValidationError("a task needs at least one quantile level")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValidationError("quantile levels must be strictly increasing")
        object.__setattr__(self, "quantile_levels", levels)
        if int(self.horizon_steps) < 1:
            raise ValidationError("horizon_steps must be >= 1")
        object.__setattr__(self, "horizon_steps", int(self.horizon_steps))

    @property
    def m(self):
        return len(self.quantile_levels)

    @property
    def instances(self):
        """(horizon, tau) pairs in ledger order, horizon-major."""
        return [(h, tau) for h in range(1, self.horizon_steps + 1) for tau in self.quantile_levels]

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "quantile_levels": list(self.quantile_levels),
            "horizon_steps": self.horizon_steps,
            "description": self.description,
            "submission_deadline": self.submission_deadline,
        }


class SessionState(str, Enum):
    OPEN = "open"
    CLOSED = "closed"
    SETTLED = "settled"


@dataclass
class Session:
    session_id: str
    task: MarketTask
    t: int
    sellers: tuple
    state: SessionState = SessionState.OPEN
    submissions: dict = field(default_factory=dict)
    late: list = field(default_factory=list)
    alpha: np.ndarray | None = None
    combined: np.ndarray | None = None
    degenerate: bool = False

    def forecast_matrix(self):
        """Submissions as an array (k, m, n); NaN where a seller is missing."""
        k, m = self.task.horizon_steps, self.task.m
        x = np.full((k, m, len(self.sellers)), np.nan)
        for i, s in enumerate(self.sellers):
            if s in self.submissions:
                x[:, :, i] = self.submissions[s]
        return x


@dataclass
class SellerRecord:
    seller_id: str
    joined_at: int | None = None
    sessions: int = 0
    missed: int = 0

    @property
    def missing_rate(self):
        return self.missed / self.sessions if self.sessions else 0.0


class SellerRegistry:
    """Ordered sellers; a seller's index never changes once registered."""

    def __init__(self):
        self._records = {}

    def __len__(self):
        return len(self._records)

    def __contains__(self, seller_id):
        return seller_id in self._records

    @property
    def ids(self):
        return tuple(self._records)

    def register(self, seller_id, joined_at=None):
        seller_id = str(seller_id)
        if seller_id in self._records:
            raise ConflictError(f"seller {seller_id!r} already registered")
        self._records[seller_id] = SellerRecord(seller_id, joined_at)
        return len(self._records) - 1

    def index(self, seller_id):
        try:
            return self.ids.index(seller_id)
        except ValueError:
            raise ValidationError(f"unknown seller {seller_id!r}") from None

    def record(self, seller_id):
        return self._records[seller_id]

    def record_session(self, sellers, alpha):
        for s, a in zip(sellers, alpha):
            rec = self._records[s]
            rec.sessions += 1
            rec.missed += int(a)

    def missing_rate(self, seller_id):
        return self._records[seller_id].missing_rate


@dataclass
class SettlementRecord:
    seq: int
    t: int
    session_id: str
    sellers: tuple
    alpha: np.ndarray
    y: np.ndarray
    utility: float
    combined: np.ndarray
    forecasts: np.ndarray
    rewards: object
    phi_s: list
    phi_c: list
    scores: list
    models: list
    degenerate: bool
    late: list

    def to_json(self, task):
        levels = []
        for idx, (h, tau) in enumerate(task.instances):
            hk = h - 1
            l = idx % task.m
            x = self.forecasts[hk, l]
            levels.append(
                {
                    "h": h,
                    "tau": tau,
                    "x": [None if np.isnan(v) else float(v) for v in x],
                    "combined": float(self.combined[hk, l]),
                    "phi_s": self.phi_s[idx].tolist(),
                    "phi_c": self.phi_c[idx].tolist(),
                    "r_is": self.rewards.r_is[idx].tolist(),
                    "scores": self.scores[idx].tolist(),
                    "r_oos": self.rewards.r_oos[idx].tolist(),
                    "reward": self.rewards.r_level[idx].tolist(),
                    "w": self.models[idx].w.tolist(),
                    "D": self.models[idx].D.reshape(-1).tolist(),
                }
            )
        return {
            "kind": "settlement",
            "seq": self.seq,
            "t": self.t,
            "session_id": self.session_id,
            "alpha": [int(a) for a in self.alpha],
            "y": self.y.tolist(),
            "utility": self.utility,
            "level_utility": self.rewards.level_utility,
            "degenerate": self.degenerate,
            "late": list(self.late),
            "levels": levels,
            "in_sample": self.rewards.in_sample_money.tolist(),
            "oos": self.rewards.oos_money.tolist(),
            "totals": self.rewards.totals.tolist(),
        }


@dataclass
class MarketState:
    sellers: tuple
    w: list
    D: list
    phi_c: list
    in_sample: np.ndarray
    oos: np.ndarray
    totals: np.ndarray
    utility: float

    def max_abs_diff(self, other):
        """Largest absolute discrepancy against another state (inf if shapes differ)."""
        if self.sellers != other.sellers:
            return float("inf")
        pairs = list(zip(self.w, other.w)) + list(zip(self.D, other.D))
        pairs += list(zip(self.phi_c, other.phi_c))
        pairs += [(self.in_sample, other.in_sample), (self.oos, other.oos)]
        pairs += [(self.totals, other.totals)]
        diffs = [float(np.max(np.abs(a - b))) if a.size else 0.0 for a, b in pairs]
        return max(diffs + [abs(self.utility - other.utility)])


def _parse_values(values, task):
    k, m = task.horizon_steps, task.m
    arr = np.asarray(values, dtype=float)
    if arr.size != k * m:
        raise ValidationError(f"expected {k * m} values (k={k}, m={m}), got {arr.size}")
    arr = arr.reshape(k, m)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("forecast values must be finite")
    if np.any(np.diff(arr, axis=1) < 0):
        raise ValidationError("quantile forecasts cross: values must be nondecreasing in tau")
    return arr


class Market:
    """Single-client prediction market for one forecasting task."""

    def __init__(
        self, task, sellers=(), eta=DEFAULT_ETA, allocation=None, seed=0, ledger_path=None
    ):
        self.task = task
        self.eta = float(eta)
        self.allocation = allocation or AllocationConfig()
        self.seed = int(seed)
        self.registry = SellerRegistry()
        self.sessions = {}
        self.models = []
        self.shapley = []
        self._seq = 0
        self._last_settled_t = None
        self.ledger_path = ledger_path
        initial = [str(s) for s in sellers]
        for s in initial:
            self.registry.register(s, joined_at=None)
        n = len(initial)
        if n:
            self.models = [QuantileModel.initial(tau, n, self.eta) for _, tau in task.instances]
            self.shapley = [ShapleyState.initial(n, self.allocation.lam) for _ in task.instances]
        self.in_sample = np.zeros(n)
        self.oos = np.zeros(n)
        self.totals = np.zeros(n)
        self.utility_paid_in = 0.0
        self.ledger = [self._header(initial)]
        if ledger_path is not None:
            with open(ledger_path, "w") as fh:
                fh.write(json.dumps(self.ledger[0]) + "\n")

    def _header(self, sellers):
        a = self.allocation
        return {
            "kind": "market",
            "format": LEDGER_FORMAT,
            "task": self.task.to_dict(),
            "sellers": list(sellers),
            "eta": self.eta,
            "allocation": {
                "delta": a.delta,
                "lambda": a.lam,
                "shapley_method": a.shapley_method,
                "shapley_samples": a.shapley_samples,
            },
            "seed": self.seed,
        }

    @property
    def sellers(self):
        return self.registry.ids

    @property
    def n(self):
        return len(self.registry)

    def _append(self, record):
        self.ledger.append(record)
        if self.ledger_path is not None:
            with open(self.ledger_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def register_seller(self, seller_id, t=None):
        """Add a seller mid-market with zero weight and zero corrections."""
        pending = [s for s in self.sessions.values() if s.state is not SessionState.SETTLED]
        if pending:
            raise StateError("sellers can only join while no session is in progress")
        seller_id = str(seller_id)
        self.registry.register(seller_id, joined_at=t)
        if not self.models:
            self.models = [QuantileModel.initial(tau, 1, self.eta) for _, tau in self.task.instances]
            self.shapley = [ShapleyState.initial(1, self.allocation.lam) for _ in self.task.instances]
        else:
            for model, state in zip(self.models, self.shapley):
                model.add_seller()
                state.add_seller()
        self.in_sample = np.append(self.in_sample, 0.0)
        self.oos = np.append(self.oos, 0.0)
        self.totals = np.append(self.totals, 0.0)
        self._append({"kind": "join", "seq": self._seq, "t": t, "seller": seller_id})
        self._seq += 1

    def open_session(self, t):
        t = int(t)
        if t in self.sessions:
            raise ConflictError(f"a session for task {self.task.task_id!r} at t={t} already exists")
        session = Session(f"{self.task.task_id}-{t}", self.task, t, self.sellers)
        self.sessions[t] = session
        return session

    def submit_forecast(self, session, seller_id, values):
        """Store a seller's (k, m) quantile forecasts, replacing earlier ones."""
        seller_id = str(seller_id)
        if seller_id not in session.sellers:
            raise ValidationError(f"seller {seller_id!r} is not registered for this session")
        if session.state is not SessionState.OPEN:
            if seller_id not in session.submissions and seller_id not in session.late:
                session.late.append(seller_id)
            raise LateSubmissionError(
                f"session {session.session_id} is {session.state.value}; "
                f"submission from {seller_id!r} counts as missing"
            )
        session.submissions[seller_id] = _parse_values(values, session.task)
        return {"session_id": session.session_id, "seller": seller_id, "accepted": True}

    def close_and_aggregate(self, session):
        """Close the session, derive the availability mask and combine forecasts."""
        if session.state is not SessionState.OPEN:
            raise StateError(f"session {session.session_id} is already {session.state.value}")
        if not session.sellers:
            raise MarketError("market has no registered sellers")
        alpha = np.array([0.0 if s in session.submissions else 1.0 for s in session.sellers])
        x = session.forecast_matrix()
        combined = np.zeros((session.task.horizon_steps, session.task.m))
        for idx, (h, _) in enumerate(session.task.instances):
            l = idx % session.task.m
            combined[h - 1, l] = rqr_predict(self.models[idx], x[h - 1, l], alpha)
        session.alpha = alpha
        session.combined = combined
        session.degenerate = bool(alpha.all())
        session.state = SessionState.CLOSED
        self.registry.record_session(session.sellers, alpha)
        return combined

    def settle_session(self, session, y, utility):
        """Allocate ``utility`` and update the models with the realisation ``y``."""
        if session.state is SessionState.OPEN:
            raise StateError(f"session {session.session_id} must be closed before settlement")
        if session.state is SessionState.SETTLED:
            raise ConflictError(f"session {session.session_id} is already settled")
        if self._last_settled_t is not None and session.t <= self._last_settled_t:
            raise StateError("sessions must be settled in time order")
        if session.sellers != self.sellers:
            raise StateError("seller set changed since the session opened")
        utility = float(utility)
        if not utility >= 0:
            raise ValidationError(f"utility must be non-negative, got {utility!r}")
        task = session.task
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.size != task.horizon_steps or not np.all(np.isfinite(y)):
            raise ValidationError(f"expected {task.horizon_steps} finite realisation(s)")

        alpha = session.alpha
        x = session.forecast_matrix()
        rng = np.random.default_rng([self.seed, self._seq])
        new_models, new_states, phi_s, r_is, r_oos, scores = [], [], [], [], [], []
        for idx, (h, _) in enumerate(task.instances):
            l = idx % task.m
            xi, yi = x[h - 1, l], y[h - 1]
            model = self.models[idx]
            alloc = allocate_level(model, xi, alpha, yi, self.shapley[idx], self.allocation, rng)
            updated = rqr_update(model.copy(), xi, alpha, yi)
            new_models.append(updated)
            new_states.append(alloc.state)
            phi_s.append(alloc.phi_s)
            r_is.append(alloc.r_is)
            r_oos.append(alloc.r_oos)
            scores.append(alloc.scores)
        rewards = settle_rewards(utility, self.allocation, r_is, r_oos)

        record = SettlementRecord(
            seq=self._seq,
            t=session.t,
            session_id=session.session_id,
            sellers=session.sellers,
            alpha=alpha,
            y=y,
            utility=utility,
            combined=session.combined,
            forecasts=x,
            rewards=rewards,
            phi_s=phi_s,
            phi_c=[s.phi_c for s in new_states],
            scores=scores,
            models=new_models,
            degenerate=session.degenerate,
            late=list(session.late),
        )
        entry = record.to_json(task)

        # commit
        self.models = new_models
        self.shapley = new_states
        self.in_sample = self.in_sample + rewards.in_sample_money
        self.oos = self.oos + rewards.oos_money
        self.totals = self.totals + rewards.totals
        self.utility_paid_in += utility
        self._append(entry)
        self._seq += 1
        self._last_settled_t = session.t
        session.state = SessionState.SETTLED
        return record

    def run_round(self, t, submissions, y, utility):
        """Convenience: open, submit ``{seller: values}``, close and settle."""
        session = self.open_session(t)
        for seller, values in submissions.items():
            self.submit_forecast(session, seller, values)
        self.close_and_aggregate(session)
        return self.settle_session(session, y, utility)

    def state(self):
        return MarketState(
            sellers=self.sellers,
            w=[m.w.copy() for m in self.models],
            D=[m.D.copy() for m in self.models],
            phi_c=[s.phi_c.copy() for s in self.shapley],
            in_sample=self.in_sample.copy(),
            oos=self.oos.copy(),
            totals=self.totals.copy(),
            utility=self.utility_paid_in,
        )

    def write_ledger(self, path):
        write_ledger(self.ledger, path)


def dumps_ledger(records):
    return "".join(json.dumps(r) + "\n" for r in records)


def write_ledger(records, path):
    """Write JSON lines atomically (temp file, then rename)."""
    atomic_write_text(path, dumps_ledger(records))


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_ledger(lines):
    """Decode JSON lines; an unparseable final line is treated as a torn write."""
    lines = [ln for ln in lines if ln.strip()]
    records = []
    for i, line in enumerate(lines):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise ReplayError(i, "malformed ledger line") from None
    return records


def read_ledger(path):
    with open(path) as fh:
        return parse_ledger(fh.read().splitlines())


def market_from_header(header):
    if header.get("kind") != "market":
        raise ReplayError(0, "ledger must start with a market header")
    if header.get("format") != LEDGER_FORMAT:
        raise ReplayError(0, f"unsupported ledger format {header.get('format')!r}")
    t = header["task"]
    task = MarketTask(
        t["task_id"],
        tuple(t["quantile_levels"]),
        t["horizon_steps"],
        t.get("description", ""),
        t.get("submission_deadline"),
    )
    a = header["allocation"]
    alloc = AllocationConfig(a["delta"], a["lambda"], a["shapley_method"], a["shapley_samples"])
    return Market(task, header["sellers"], header["eta"], alloc, header["seed"])


def replay_ledger(records):
    """Rebuild a market from its ledger by re-running every event.

    ``records`` may be decoded dicts or raw JSON lines. Raises
    :class:`ReplayError` on gaps, reordering or snapshot mismatches.
    """
    records = list(records)
    if records and isinstance(records[0], str):
        records = parse_ledger(records)
    if not records:
        raise ReplayError(0, "empty ledger has no market header")
    market = market_from_header(records[0])
    last_t = None
    for pos, rec in enumerate(records[1:], start=1):
        kind = rec.get("kind")
        if rec.get("seq") != market._seq:
            raise ReplayError(pos, f"expected seq {market._seq}, found {rec.get('seq')!r}")
        if kind == "join":
            market.register_seller(rec["seller"], rec.get("t"))
            continue
        if kind != "settlement":
            raise ReplayError(pos, f"unknown record kind {kind!r}")
        t = rec["t"]
        if last_t is not None and t <= last_t:
            raise ReplayError(pos, f"time index {t} does not follow {last_t}")
        last_t = t
        k, m = market.task.horizon_steps, market.task.m
        n = market.n
        if len(rec["alpha"]) != n or len(rec["levels"]) != k * m:
            raise ReplayError(pos, "record shape does not match the market")
        values = np.full((n, k, m), np.nan)
        for idx, level in enumerate(rec["levels"]):
            for i, v in enumerate(level["x"]):
                if v is not None:
                    values[i, idx // m, idx % m] = v
        session = market.open_session(t)
        for i, seller in enumerate(market.sellers):
            if rec["alpha"][i] == 0:
                market.submit_forecast(session, seller, values[i])
        market.close_and_aggregate(session)
        session.late.extend(rec.get("late", []))
        market.settle_session(session, rec["y"], rec["utility"])
        if market.ledger[-1]["levels"] != rec["levels"]:
            raise ReplayError(pos, "recomputed settlement differs from the recorded one")
    return market


__all__ = [
    "Market",
    "MarketState",
    "MarketTask",
    "SellerRegistry",
    "Session",
    "SessionState",
    "SettlementRecord",
    "atomic_write_text",
    "parse_ledger",
    "read_ledger",
    "replay_ledger",
    "write_ledger",
]
