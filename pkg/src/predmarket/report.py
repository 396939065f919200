"""Market replay over CSV tables and report emission from ledgers.

``run_replay`` drives a :class:`Market` through every timestamp of a
forecast table and returns the ledger plus two summaries: cumulative
pinball loss per level for each seller and for the combined forecast, and
per-seller in-sample / out-of-sample / total rewards.

``emit_report`` turns any ledger into three per-settlement CSV files:
``weights.csv``, ``rewards.csv`` (cumulative) and ``losses.csv``
(cumulative). Output depends only on the ledger, so re-emitting gives the
same bytes.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np

from .combination import quantile_loss
from .errors import ValidationError
from .market import Market, MarketTask, atomic_write_text, dumps_ledger, write_ledger

REPORT_FILES = ("weights.csv", "rewards.csv", "losses.csv")


def _fmt(v):
    return repr(float(v))


def _csv(rows):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerows(rows)
    return buf.getvalue()


@dataclass
class LossSummary:
    """Cumulative pinball losses keyed by (horizon, tau).

    ``seller[key][i]`` sums over the rounds seller ``i`` submitted;
    ``combined_matched[key][i]`` sums the combined forecast's loss over the
    same rounds, which makes the two directly comparable.
    """

    sellers: tuple
    seller: dict
    seller_rounds: dict
    combined: dict
    combined_matched: dict
    rounds: int


@dataclass
class RewardSummary:
    sellers: tuple
    in_sample: np.ndarray
    oos: np.ndarray
    totals: np.ndarray
    utility: float


@dataclass
class ReplayResult:
    ledger: list
    losses: LossSummary
    rewards: RewardSummary
    market: Market


def summarize_losses(ledger):
    header, settlements = _split(ledger)
    sellers = tuple(_sellers_at_end(ledger))
    n = len(sellers)
    seller, rounds, combined, matched = {}, {}, {}, {}
    for rec in settlements:
        k = len(rec["alpha"])
        for lv in rec["levels"]:
            key = (lv["h"], lv["tau"])
            y = rec["y"][lv["h"] - 1]
            c_loss = quantile_loss(lv["tau"], y, lv["combined"])
            seller.setdefault(key, [[] for _ in range(n)])
            matched.setdefault(key, [[] for _ in range(n)])
            rounds.setdefault(key, [0] * n)
            combined.setdefault(key, []).append(c_loss)
            for i in range(k):
                x = lv["x"][i]
                if x is None:
                    continue
                seller[key][i].append(quantile_loss(lv["tau"], y, x))
                matched[key][i].append(c_loss)
                rounds[key][i] += 1
    return LossSummary(
        sellers=sellers,
        seller={k: [math.fsum(v) for v in vs] for k, vs in seller.items()},
        seller_rounds=rounds,
        combined={k: math.fsum(v) for k, v in combined.items()},
        combined_matched={k: [math.fsum(v) for v in vs] for k, vs in matched.items()},
        rounds=len(settlements),
    )


def summarize_rewards(ledger):
    _, settlements = _split(ledger)
    sellers = tuple(_sellers_at_end(ledger))
    n = len(sellers)
    cols = {"in_sample": [[] for _ in range(n)], "oos": [[] for _ in range(n)],
            "totals": [[] for _ in range(n)]}
    utility = []
    for rec in settlements:
        utility.append(rec["utility"])
        for name, acc in cols.items():
            for i, v in enumerate(rec[name]):
                acc[i].append(v)
    agg = {name: np.array([math.fsum(v) for v in acc]) for name, acc in cols.items()}
    return RewardSummary(sellers, agg["in_sample"], agg["oos"], agg["totals"], math.fsum(utility))


def loss_summary_text(summary):
    """Rows per (horizon, tau, statistic); one column per seller plus combined.

    ``cumulative`` rows hold each seller's total loss over its own rounds
    and the combined forecast's total over all rounds; ``mean`` rows divide
    by the matching round counts.
    """
    rows = [["horizon", "tau", "statistic", *summary.sellers, "combined"]]
    for key in sorted(summary.seller):
        h, tau = key
        cum = summary.seller[key]
        cnt = summary.seller_rounds[key]
        rows.append([h, _fmt(tau), "cumulative", *map(_fmt, cum), _fmt(summary.combined[key])])
        means = [_fmt(c / r) if r else "" for c, r in zip(cum, cnt)]
        rows.append([h, _fmt(tau), "mean", *means, _fmt(summary.combined[key] / summary.rounds)])
    return _csv(rows)


def reward_summary_text(summary):
    rows = [["seller", "in_sample", "out_of_sample", "total"]]
    for i, s in enumerate(summary.sellers):
        rows.append([s, _fmt(summary.in_sample[i]), _fmt(summary.oos[i]), _fmt(summary.totals[i])])
    rows.append([
        "all",
        _fmt(math.fsum(summary.in_sample)),
        _fmt(math.fsum(summary.oos)),
        _fmt(math.fsum(summary.totals)),
    ])
    return _csv(rows)


def run_replay(table, utility=100.0, eta=None, allocation=None, task_id="task", seed=0):
    """Drive a market through every timestamp of ``table``.

    Every timestamp needs a realisation. All sellers are registered up front
    and each horizon/level pair learns its own model. ``utility`` is paid in
    at every settlement.
    """
    if not table.values:
        raise ValidationError("forecast table is empty")
    if not table.sellers:
        raise ValidationError("forecast table has no sellers")
    forecast_ts = sorted({t for t, _, _ in table.values})
    lacking = [t for t in forecast_ts if t not in table.realizations]
    if lacking:
        raise ValidationError(f"no realisation for timestamp(s) {lacking[:5]}")
    task = MarketTask(task_id, table.levels, table.horizons)
    kwargs = {} if eta is None else {"eta": eta}
    market = Market(task, table.sellers, allocation=allocation, seed=seed, **kwargs)
    for t in table.timestamps:
        y = [table.realizations[t]] * table.horizons
        subs = {s: v for s, v in table.submissions(t).items()}
        market.run_round(t, subs, y, utility)
    ledger = market.ledger
    return ReplayResult(ledger, summarize_losses(ledger), summarize_rewards(ledger), market)


def write_replay(result, output_dir):
    """Ledger, both summaries and the per-settlement report files."""
    os.makedirs(output_dir, exist_ok=True)
    write_ledger(result.ledger, os.path.join(output_dir, "ledger.jsonl"))
    atomic_write_text(os.path.join(output_dir, "summary_losses.csv"),
                      loss_summary_text(result.losses))
    atomic_write_text(os.path.join(output_dir, "summary_rewards.csv"),
                      reward_summary_text(result.rewards))
    emit_report(result.ledger, output_dir)


# --- per-settlement report -------------------------------------------------


def _split(ledger):
    ledger = list(ledger)
    if not ledger or ledger[0].get("kind") != "market":
        raise ValidationError("ledger must start with a market header")
    return ledger[0], [r for r in ledger[1:] if r.get("kind") == "settlement"]


def _sellers_at_end(ledger):
    sellers = list(ledger[0]["sellers"])
    for rec in ledger[1:]:
        if rec.get("kind") == "join":
            sellers.append(rec["seller"])
    return sellers


def _instance_label(lv):
    return f"h{lv['h']}_q{_fmt(lv['tau'])}"


def report_texts(ledger):
    """``{file name: CSV text}`` for the three report files."""
    header, settlements = _split(ledger)
    if not settlements:
        raise ValidationError("ledger has no settlements to report")
    sellers = _sellers_at_end(ledger)
    n = len(sellers)
    instances = [_instance_label(lv) for lv in settlements[0]["levels"]]

    weights = [["t"] + [f"{lab}_{s}" for lab in instances for s in sellers]]
    rewards = [["t"] + list(sellers) + ["utility"]]
    losses = [["t"] + [f"{lab}_{s}" for lab in instances for s in sellers + ["combined"]]]
    cum_r = [[] for _ in range(n)]
    cum_u = []
    cum_l = {}
    for rec in settlements:
        k = len(rec["alpha"])
        row_w, row_l = [rec["t"]], [rec["t"]]
        for lv in rec["levels"]:
            w = list(lv["w"]) + [""] * (n - k)
            row_w += [v if v == "" else _fmt(v) for v in w]
            y = rec["y"][lv["h"] - 1]
            lab = _instance_label(lv)
            for i in range(n):
                acc = cum_l.setdefault((lab, i), [])
                x = lv["x"][i] if i < k else None
                if x is not None:
                    acc.append(quantile_loss(lv["tau"], y, x))
                row_l.append(_fmt(math.fsum(acc)))
            acc = cum_l.setdefault((lab, "combined"), [])
            acc.append(quantile_loss(lv["tau"], y, lv["combined"]))
            row_l.append(_fmt(math.fsum(acc)))
        for i in range(n):
            if i < k:
                cum_r[i].append(rec["totals"][i])
        cum_u.append(rec["utility"])
        rewards.append([rec["t"]] + [_fmt(math.fsum(v)) for v in cum_r] + [_fmt(math.fsum(cum_u))])
        weights.append(row_w)
        losses.append(row_l)
    return {"weights.csv": _csv(weights), "rewards.csv": _csv(rewards), "losses.csv": _csv(losses)}


def emit_report(ledger, output_dir):
    """Write ``weights.csv``, ``rewards.csv`` and ``losses.csv`` atomically."""
    texts = report_texts(ledger)
    try:
        os.makedirs(output_dir, exist_ok=True)
        for name, text in texts.items():
            atomic_write_text(os.path.join(output_dir, name), text)
    except OSError as exc:
        raise OSError(f"cannot write report to {output_dir}: {exc}") from exc
    return [os.path.join(output_dir, name) for name in REPORT_FILES]


__all__ = [
    "LossSummary",
    "ReplayResult",
    "RewardSummary",
    "dumps_ledger",
    "emit_report",
    "loss_summary_text",
    "report_texts",
    "reward_summary_text",
    "run_replay",
    "summarize_losses",
    "summarize_rewards",
    "write_replay",
]
