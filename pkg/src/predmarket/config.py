"""Run configuration: YAML text in, validated :class:`RunConfig` out.

Every key has a default except ``mode``. Unknown keys, wrong types and
out-of-range values raise :class:`ConfigError` naming the dotted key path,
e.g. ``allocation.delta``. :func:`manifest` renders the fully resolved
configuration, which parses back to the same run.
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass

import yaml

from .allocation import SHAPLEY_METHODS, AllocationConfig
from .combination import DEFAULT_ETA
from .errors import ConfigError, ValidationError
from .scenarios import METHODS, DEFAULT_OFFSETS, DEFAULT_WEIGHTS, ScenarioConfig, SellerSpec

MODES = ("simulate-invariant", "simulate-varying", "sweep", "replay")

REQUIRED = object()


# --- leaf validators -------------------------------------------------------


def _num(lo=None, hi=None, lo_open=False, hi_open=False):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(key, f"expected a number, got {v!r}")
        v = float(v)
        if not math.isfinite(v):
            raise ConfigError(key, "must be finite")
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ConfigError(key, f"{v!r} is out of range")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ConfigError(key, f"{v!r} is out of range")
        return v

    return check


def _int(lo=None):
    def check(key, v):
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(key, f"expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(key, f"must be >= {lo}, got {v}")
        return v

    return check


def _opt(inner):
    def check(key, v):
        return None if v is None else inner(key, v)

    return check


def _choice(options):
    def check(key, v):
        if v not in options:
            raise ConfigError(key, f"{v!r} is not one of {list(options)}")
        return v

    return check


def _text(key, v):
    if not isinstance(v, str) or not v:
        raise ConfigError(key, f"expected a non-empty string, got {v!r}")
    return v


def _bool(key, v):
    if not isinstance(v, bool):
        raise ConfigError(key, f"expected true or false, got {v!r}")
    return v


def _list(inner, min_len=1):
    def check(key, v):
        if not isinstance(v, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {v!r}")
        if len(v) < min_len:
            raise ConfigError(key, f"needs at least {min_len} entries")
        return [inner(f"{key}[{i}]", x) for i, x in enumerate(v)]

    return check


def _scalar_or_list(inner):
    def check(key, v):
        if isinstance(v, (list, tuple)):
            return _list(inner)(key, v)
        return inner(key, v)

    return check


def _levels(key, v):
    levels = _list(_num(0.0, 1.0, lo_open=True, hi_open=True))(key, v)
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ConfigError(key, "quantile levels must be strictly increasing")
    return levels


def _weights(key, v):
    w = _list(_num(0.0))(key, v)
    if abs(math.fsum(w) - 1.0) > 1e-9:
        raise ConfigError(key, "weights must sum to 1")
    return w


def _methods(key, v):
    methods = _list(_choice(METHODS))(key, v)
    if len(set(methods)) != len(methods):
        raise ConfigError(key, "methods must not repeat")
    return methods


SCHEMA = {
    "mode": (REQUIRED, _choice(MODES)),
    "output_dir": ("out", _text),
    "engine": {
        "methods": (["RQR"], _methods),
        "eta": (DEFAULT_ETA, _num(0.0, lo_open=True)),
        "tau": (0.5, _num(0.0, 1.0, lo_open=True, hi_open=True)),
        "rewards": (False, _bool),
        "stride": (1, _int(1)),
    },
    "scenario": {
        "offsets": (list(DEFAULT_OFFSETS), _list(_num())),
        "nu": (0.5, _scalar_or_list(_num())),
        "sigma": (1.0, _scalar_or_list(_num(0.0, lo_open=True))),
        "true_weights": (list(DEFAULT_WEIGHTS), _weights),
        "w_start": ([0.7, 0.2, 0.1], _weights),
        "w_end": ([0.1, 0.2, 0.7], _weights),
        "smoothing": (0.999, _num(0.0, 1.0, hi_open=True)),
        "period": (None, _opt(_int(1))),
        "T": (20000, _int(1)),
        "runs": (20, _int(1)),
        "missing_rate": (0.05, _num(0.0, 1.0, hi_open=True)),
        "rates": ([0.05, 0.3, 0.6, 0.9], _list(_num(0.0, 1.0, hi_open=True))),
        "quantile_levels": ([0.1, 0.5, 0.9], _levels),
        "seed": (0, _int(0)),
        "burn_in": (5000, _int(0)),
    },
    "allocation": {
        "delta": (0.5, _num(0.0, 1.0)),
        "lambda": (0.99, _num(0.0, 1.0, hi_open=True)),
        "shapley_method": ("exact", _choice(SHAPLEY_METHODS)),
        "shapley_samples": (1000, _int(1)),
    },
    "market": {
        "utility": (100.0, _num(0.0)),
        "task_id": ("task", _text),
        "seed": (0, _int(0)),
    },
    "replay": {
        "forecasts": (None, _opt(_text)),
        "realizations": (None, _opt(_text)),
    },
}


def flat_keys(schema=SCHEMA, prefix=""):
    """Dotted paths of every leaf key, in schema order."""
    out = []
    for name, spec in schema.items():
        path = f"{prefix}{name}"
        if isinstance(spec, dict):
            out.extend(flat_keys(spec, path + "."))
        else:
            out.append(path)
    return out


def _resolve(schema, data, prefix=""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", "expected a mapping")
    for key in data:
        if key not in schema:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    out = {}
    for name, spec in schema.items():
        path = f"{prefix}{name}"
        if isinstance(spec, dict):
            out[name] = _resolve(spec, data.get(name), path + ".")
            continue
        default, check = spec
        if name in data:
            out[name] = check(path, data[name])
        elif default is REQUIRED:
            raise ConfigError(path, "missing required key")
        else:
            out[name] = copy.deepcopy(default)
    return out


@dataclass(frozen=True)
class EngineConfig:
    methods: tuple
    eta: float
    tau: float
    rewards: bool
    stride: int


@dataclass(frozen=True)
class RunConfig:
    mode: str
    output_dir: str
    engine: EngineConfig
    scenario: ScenarioConfig
    rates: tuple
    allocation: AllocationConfig
    utility: float
    task_id: str
    market_seed: int
    forecasts: str | None
    realizations: str | None
    resolved: dict

    def manifest(self):
        return manifest(self)


def _per_seller(key, value, n):
    if isinstance(value, list):
        if len(value) != n:
            raise ConfigError(key, f"has {len(value)} entries for {n} sellers")
        return value
    return [value] * n


def _build(d):
    sc = d["scenario"]
    n = len(sc["offsets"])
    for key in ("true_weights", "w_start", "w_end"):
        if len(sc[key]) != n:
            raise ConfigError(f"scenario.{key}", f"has {len(sc[key])} entries for {n} sellers")
    if sc["burn_in"] >= sc["T"]:
        raise ConfigError("scenario.burn_in", f"must be below scenario.T = {sc['T']}")
    nus = _per_seller("scenario.nu", sc["nu"], n)
    sigmas = _per_seller("scenario.sigma", sc["sigma"], n)
    sellers = tuple(SellerSpec(c, nu, s) for c, nu, s in zip(sc["offsets"], nus, sigmas))
    eng = d["engine"]
    mode = d["mode"]
    if "QR" in eng["methods"] and mode != "replay":
        rates = sc["rates"] if mode == "sweep" else [sc["missing_rate"]]
        if any(r > 0 for r in rates):
            raise ConfigError(
                "engine.methods", "QR needs complete submissions (missing rate 0)"
            )
    if eng["rewards"] and any(m not in ("QR", "RQR") for m in eng["methods"]):
        raise ConfigError("engine.rewards", "reward simulation supports QR and RQR only")
    rp = d["replay"]
    if mode == "replay":
        for key in ("forecasts", "realizations"):
            path = rp[key]
            if path is None:
                raise ConfigError(f"replay.{key}", "missing required key in replay mode")
            if not os.path.isfile(path):
                raise ConfigError(f"replay.{key}", f"file not found: {path}")
    try:
        scenario = ScenarioConfig(
            sellers=sellers,
            true_weights=tuple(sc["true_weights"]),
            varying=mode == "simulate-varying",
            w_start=tuple(sc["w_start"]),
            w_end=tuple(sc["w_end"]),
            smoothing=sc["smoothing"],
            period=sc["period"],
            T=sc["T"],
            runs=sc["runs"],
            missing_rate=sc["missing_rate"],
            quantile_levels=tuple(sc["quantile_levels"]),
            seed=sc["seed"],
            burn_in=sc["burn_in"],
        )
    except ValidationError as exc:
        raise ConfigError("scenario", str(exc)) from None
    al = d["allocation"]
    allocation = AllocationConfig(
        al["delta"], al["lambda"], al["shapley_method"], al["shapley_samples"]
    )
    mk = d["market"]
    return RunConfig(
        mode=mode,
        output_dir=d["output_dir"],
        engine=EngineConfig(tuple(eng["methods"]), eng["eta"], eng["tau"], eng["rewards"],
                            eng["stride"]),
        scenario=scenario,
        rates=tuple(sc["rates"]),
        allocation=allocation,
        utility=mk["utility"],
        task_id=mk["task_id"],
        market_seed=mk["seed"],
        forecasts=rp["forecasts"],
        realizations=rp["realizations"],
        resolved=d,
    )


def load_data(text):
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<root>", f"malformed configuration text: {exc}") from None
    return {} if data is None else data


def config_from_dict(data, overrides=None):
    """Validate a nested mapping, applying ``{dotted.key: value}`` overrides."""
    data = copy.deepcopy(data) if data else {}
    if not isinstance(data, dict):
        raise ConfigError("<root>", "expected a mapping")
    for path, value in (overrides or {}).items():
        set_path(data, path, value)
    return _build(_resolve(SCHEMA, data))


def parse_config(text, overrides=None):
    """Parse YAML (or JSON) configuration text into a :class:`RunConfig`."""
    return config_from_dict(load_data(text), overrides)


def set_path(data, path, value):
    parts = path.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        nxt = node.get(part)
        if nxt is None:
            nxt = node[part] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(".".join(parts[: i + 1]), "expected a mapping")
        node = nxt
    node[parts[-1]] = value


def manifest(config):
    """Fully resolved configuration as deterministic JSON text."""
    return json.dumps(config.resolved, indent=2, sort_keys=False) + "\n"


__all__ = [
    "MODES",
    "SCHEMA",
    "EngineConfig",
    "RunConfig",
    "config_from_dict",
    "flat_keys",
    "manifest",
    "parse_config",
]
