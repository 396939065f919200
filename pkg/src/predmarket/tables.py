"""CSV interchange for external forecasts and realisations.

Forecast file columns: ``timestamp, seller, horizon, q<tau>...``, one row per
(delivery period, seller, lead time). Realisation file columns:
``timestamp, y``. Timestamps are integer delivery-period indices. A seller
without rows at a timestamp is missing there.

Numbers are written with the shortest repr that round-trips, so reading a
written table yields identical binary values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConflictError, ValidationError
from .market import atomic_write_text
from .scenarios import ScenarioStream, normal_quantile


@dataclass
class ForecastTable:
    levels: tuple
    sellers: tuple
    horizons: int
    values: dict  # (timestamp, seller, horizon) -> tuple of m floats
    realizations: dict = field(default_factory=dict)  # timestamp -> y

    @property
    def timestamps(self):
        ts = {t for t, _, _ in self.values} | set(self.realizations)
        return sorted(ts)

    def alpha(self, t):
        """Availability mask at ``t``: 1 where the seller submitted nothing."""
        return np.array(
            [0.0 if (t, s, 1) in self.values else 1.0 for s in self.sellers]
        )

    def submissions(self, t):
        """``{seller: (k, m) array}`` of the sellers present at ``t``."""
        out = {}
        for s in self.sellers:
            if (t, s, 1) in self.values:
                out[s] = np.array([self.values[(t, s, h)] for h in range(1, self.horizons + 1)])
        return out


class CSVRowError(ValidationError):
    def __init__(self, path, line, message):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def _level_columns(header, path):
    cols = header[3:]
    levels = []
    for c in cols:
        if not c.startswith("q"):
            raise CSVRowError(path, 1, f"unexpected column {c!r}; quantile columns look like q0.5")
        try:
            levels.append(float(c[1:]))
        except ValueError:
            raise CSVRowError(path, 1, f"bad quantile column {c!r}") from None
    if not levels:
        raise CSVRowError(path, 1, "no quantile columns")
    if any(not 0.0 < v < 1.0 for v in levels):
        raise CSVRowError(path, 1, "quantile levels must lie in (0, 1)")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise CSVRowError(path, 1, "quantile columns must be strictly increasing")
    return tuple(levels)


def _float(text, path, line, what):
    try:
        v = float(text)
    except ValueError:
        raise CSVRowError(path, line, f"{what} is not a number: {text!r}") from None
    if not math.isfinite(v):
        raise CSVRowError(path, line, f"{what} must be finite")
    return v


def _int(text, path, line, what):
    try:
        return int(text)
    except ValueError:
        raise CSVRowError(path, line, f"{what} is not an integer: {text!r}") from None


def parse_forecasts(text, path="<forecasts>", levels=None):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CSVRowError(path, 1, "missing header row")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["timestamp", "seller", "horizon"]:
        raise CSVRowError(path, 1, "header must start with timestamp,seller,horizon")
    file_levels = _level_columns(header, path)
    if levels is not None and tuple(float(v) for v in levels) != file_levels:
        raise CSVRowError(path, 1, f"quantile columns {file_levels} differ from {tuple(levels)}")
    m = len(file_levels)
    values, sellers, last_t = {}, [], {}
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3 + m:
            raise CSVRowError(path, line, f"expected {3 + m} fields, got {len(row)}")
        t = _int(row[0], path, line, "timestamp")
        seller = row[1].strip()
        if not seller:
            raise CSVRowError(path, line, "empty seller id")
        h = _int(row[2], path, line, "horizon")
        if h < 1:
            raise CSVRowError(path, line, "horizon must be >= 1")
        q = tuple(_float(v, path, line, f"column {header[3 + j]}") for j, v in enumerate(row[3:]))
        if any(b < a for a, b in zip(q, q[1:])):
            raise CSVRowError(path, line, "quantile forecasts cross (must be nondecreasing)")
        key = (t, seller, h)
        if key in values:
            raise ConflictError(f"{path}:{line}: duplicate row for timestamp {t}, seller {seller!r}, horizon {h}")
        if seller in last_t and t < last_t[seller]:
            raise CSVRowError(path, line, f"timestamp {t} goes backwards for seller {seller!r}")
        if seller not in last_t:
            sellers.append(seller)
        last_t[seller] = t
        values[key] = q
    if not values:
        raise ValidationError(f"{path}: no forecast rows")
    k = max(h for _, _, h in values)
    present = {(t, s) for t, s, _ in values}
    for t, s in sorted(present):
        missing = [h for h in range(1, k + 1) if (t, s, h) not in values]
        if missing:
            raise ValidationError(
                f"{path}: seller {s!r} at timestamp {t} lacks horizon(s) {missing}"
            )
    return ForecastTable(file_levels, tuple(sellers), k, values)


def parse_realizations(text, path="<realizations>"):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise CSVRowError(path, 1, "missing header row")
    if [h.strip() for h in rows[0]] != ["timestamp", "y"]:
        raise CSVRowError(path, 1, "header must be timestamp,y")
    out = {}
    prev = None
    for line, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 2:
            raise CSVRowError(path, line, f"expected 2 fields, got {len(row)}")
        t = _int(row[0], path, line, "timestamp")
        if t in out:
            raise ConflictError(f"{path}:{line}: duplicate realisation for timestamp {t}")
        if prev is not None and t < prev:
            raise CSVRowError(path, line, "timestamps must be increasing")
        prev = t
        out[t] = _float(row[1], path, line, "y")
    return out


def load_forecast_csv(forecasts_path, realizations_path=None, levels=None):
    """Read forecast (and optionally realisation) CSV files into a table."""
    with open(forecasts_path, newline="") as fh:
        table = parse_forecasts(fh.read(), forecasts_path, levels)
    if realizations_path is not None:
        with open(realizations_path, newline="") as fh:
            table.realizations = parse_realizations(fh.read(), realizations_path)
    return table


def _fmt(v):
    return repr(float(v))


def forecasts_text(table):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["timestamp", "seller", "horizon"] + [f"q{_fmt(t)}" for t in table.levels])
    order = {s: i for i, s in enumerate(table.sellers)}
    for t, s, h in sorted(table.values, key=lambda k: (k[0], order[k[1]], k[2])):
        wr.writerow([t, s, h] + [_fmt(v) for v in table.values[(t, s, h)]])
    return buf.getvalue()


def realizations_text(table):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["timestamp", "y"])
    for t in sorted(table.realizations):
        wr.writerow([t, _fmt(table.realizations[t])])
    return buf.getvalue()


def write_forecast_csv(table, forecasts_path, realizations_path=None):
    atomic_write_text(forecasts_path, forecasts_text(table))
    if realizations_path is not None:
        atomic_write_text(realizations_path, realizations_text(table))


def table_from_stream(stream: ScenarioStream, start=0):
    """Turn a simulated run into a one-horizon forecast table.

    Seller ids are ``s1..sn``; timestamps count from ``start``.
    """
    config = stream.config
    levels = config.quantile_levels
    sellers = tuple(f"s{i + 1}" for i in range(config.n))
    sigma = np.array([s.sigma for s in config.sellers])
    z = np.array([normal_quantile(t) for t in levels])
    values, real = {}, {}
    for t in range(stream.T):
        ts = start + t
        real[ts] = float(stream.y[t])
        for i, s in enumerate(sellers):
            if stream.alpha[t, i]:
                continue
            q = stream.mu[t, i] + sigma[i] * z
            values[(ts, s, 1)] = tuple(float(v) for v in q)
    return ForecastTable(levels, sellers, 1, values, real)


__all__ = [
    "CSVRowError",
    "ForecastTable",
    "forecasts_text",
    "load_forecast_csv",
    "parse_forecasts",
    "parse_realizations",
    "realizations_text",
    "table_from_stream",
    "write_forecast_csv",
]
