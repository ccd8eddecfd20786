"""Experiment configuration: TOML or JSON files validated into typed dataclasses.

Every validation failure raises :class:`ConfigError` naming the offending
field path, e.g. ``traffic.n`` or ``budget.delta``.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on older interpreters
    import tomli as tomllib

# sensitivity bounds tried by the LMI sweep, as multiples of the Kalman filter gain
GAMMA_FACTORS = [round(4.0 ** (k / 30), 6) for k in range(31)]

KINDS = ("aggregate", "traffic", "events", "synth", "norms")


@dataclass(frozen=True)
class BudgetConfig:
    epsilon: float = math.log(3.0)
    delta: float = 0.05


@dataclass(frozen=True)
class AggregateConfig:
    channels: list = field(default_factory=lambda: [{"moving_average": 5}] * 10)
    bounds: object = 1.0
    orders: object = 2
    placement: str = "both"  # input | output | both
    noise: str = "gaussian"
    input_level: float = 1.0


@dataclass(frozen=True)
class TrafficConfig:
    n: int = 200
    Ts: float = 1.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    rho: float = 100.0
    v0_mean: float = 45.0
    v0_std: float = 10.0
    kf_init: float = 75.0
    form: str = "filter"
    placements: list = field(default_factory=lambda: ["input", "input-compensated", "output", "lmi"])
    gamma_factors: list = field(default_factory=lambda: GAMMA_FACTORS)
    burn_in: int = 200


@dataclass(frozen=True)
class EventsConfig:
    filter: dict = field(default_factory=lambda: {"continuous": {"num": [1.0], "den": [1.0, 0.05]}})
    mechanisms: list = field(default_factory=lambda: ["input", "input+detector", "zfe", "mmse"])
    detector_noise: list = field(default_factory=lambda: ["gaussian", "laplace"])
    factor_order: int = 12
    fir_order: int = 100
    p_on: float = 0.08
    p_off: float = 0.08
    statistics: str = "empirical"  # empirical | analytic
    calibration_steps: int = 1_000_000
    max_lag: int = 200


@dataclass(frozen=True)
class SynthConfig:
    model: object = "traffic"  # "traffic" or a model dictionary
    n_replicas: int = 200
    strategy: str = "constrain-hinf"
    gamma_max: list = field(default_factory=list)  # empty: multiples of the Kalman filter gain
    gamma_factors: list = field(default_factory=lambda: GAMMA_FACTORS)
    path: str = ""  # "" picks stable/unstable automatically
    traffic: TrafficConfig = field(default_factory=TrafficConfig)


@dataclass(frozen=True)
class NormsConfig:
    ma_lengths: list = field(default_factory=lambda: [2, 5, 10, 50])
    kappa_points: list = field(default_factory=lambda: [[math.log(2.0), 0.05], [math.log(3.0), 0.05]])
    grid_n: list = field(default_factory=lambda: list(range(1, 11)))
    grid_l: list = field(default_factory=lambda: list(range(1, 11)))


SECTION_TYPES = {"aggregate": AggregateConfig, "traffic": TrafficConfig, "events": EventsConfig,
                 "synth": SynthConfig, "norms": NormsConfig}

DEFAULTS = {"aggregate": (500, 1000), "traffic": (200, 600), "events": (200, 2000), "synth": (200, 600),
            "norms": (1, 1)}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    params: object
    budget: BudgetConfig
    trials: int
    horizon: int
    seed: int
    out: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_type(path: str, value, expected):
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is int and isinstance(value, bool):
        raise ConfigError(path, "expected an integer")
    if expected in (int, float, str, bool, list, dict) and not isinstance(value, expected):
        raise ConfigError(path, f"expected {expected.__name__}, got {type(value).__name__}")
    return value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(prefix, "expected a table")
    fields = cls.__dataclass_fields__
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{prefix}.{sorted(unknown)[0]}", "unknown field")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        path = f"{prefix}.{name}"
        val = data[name]
        if f.type in ("int", "float", "str", "bool", "list", "dict"):
            val = _check_type(path, val, {"int": int, "float": float, "str": str, "bool": bool,
                                          "list": list, "dict": dict}[f.type])
        elif f.type == "TrafficConfig":
            val = _build(TrafficConfig, val, path)
        kwargs[name] = val
    return cls(**kwargs)


def _validate(cfg: ExperimentConfig):
    b = cfg.budget
    if not b.epsilon > 0 or not math.isfinite(b.epsilon):
        raise ConfigError("budget.epsilon", "must be positive and finite")
    if not 0 <= b.delta < 1:
        raise ConfigError("budget.delta", "must lie in [0, 1)")
    if cfg.trials < 1:
        raise ConfigError("trials", "must be at least 1")
    if cfg.horizon < 1:
        raise ConfigError("horizon", "must be at least 1")
    p, k = cfg.params, cfg.kind
    if k == "aggregate":
        if p.placement not in ("input", "output", "both"):
            raise ConfigError("aggregate.placement", "must be input, output or both")
        if p.noise not in ("gaussian", "laplace"):
            raise ConfigError("aggregate.noise", "must be gaussian or laplace")
        if not p.channels:
            raise ConfigError("aggregate.channels", "needs at least one channel")
    elif k == "traffic":
        _validate_traffic(p, "traffic")
        if p.burn_in >= cfg.horizon:
            raise ConfigError("traffic.burn_in", "must be shorter than the horizon")
    elif k == "events":
        bad = set(p.mechanisms) - {"input", "input+detector", "output", "zfe", "mmse"}
        if bad:
            raise ConfigError("events.mechanisms", f"unknown mechanism {sorted(bad)[0]!r}")
        if p.statistics not in ("empirical", "analytic"):
            raise ConfigError("events.statistics", "must be empirical or analytic")
        if p.factor_order < 0:
            raise ConfigError("events.factor_order", "must be nonnegative")
        if not (0 < p.p_on <= 1 and 0 < p.p_off <= 1):
            raise ConfigError("events.p_on", "switching probabilities must lie in (0, 1]")
    elif k == "synth":
        if p.strategy not in ("constrain-hinf", "bisect-lambda"):
            raise ConfigError("synth.strategy", "must be constrain-hinf or bisect-lambda")
        if p.path not in ("", "stable", "unstable"):
            raise ConfigError("synth.path", "must be stable, unstable or empty")
        if p.n_replicas < 1:
            raise ConfigError("synth.n_replicas", "must be positive")
        _validate_traffic(p.traffic, "synth.traffic")


def _validate_traffic(p: TrafficConfig, prefix: str):
    if p.n < 1:
        raise ConfigError(f"{prefix}.n", "must be positive")
    if p.rho < 0:
        raise ConfigError(f"{prefix}.rho", "must be nonnegative")
    if p.form not in ("filter", "predictor"):
        raise ConfigError(f"{prefix}.form", "must be filter or predictor")
    bad = set(p.placements) - {"input", "input-compensated", "output", "lmi"}
    if bad:
        raise ConfigError(f"{prefix}.placements", f"unknown placement {sorted(bad)[0]!r}")
    if not p.gamma_factors or any(not f > 0 for f in p.gamma_factors):
        raise ConfigError(f"{prefix}.gamma_factors", "needs positive entries")


def config_from_dict(data: dict, kind: str | None = None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "configuration must be a table")
    kind = data.get("kind", kind)
    if kind not in KINDS:
        raise ConfigError("kind", f"must be one of {', '.join(KINDS)}")
    unknown = set(data) - {"kind", "budget", "trials", "horizon", "seed", "out", kind}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    if "seed" not in data:
        raise ConfigError("seed", "a seed is required")
    seed = _check_type("seed", data["seed"], int)
    trials, horizon = DEFAULTS[kind]
    trials = _check_type("trials", data.get("trials", trials), int)
    horizon = _check_type("horizon", data.get("horizon", horizon), int)
    bd = data.get("budget", {})
    if not isinstance(bd, dict):
        raise ConfigError("budget", "expected a table")
    budget = BudgetConfig(**{k: _check_type(f"budget.{k}", v, float) for k, v in bd.items()
                             if k in ("epsilon", "delta")})
    if set(bd) - {"epsilon", "delta"}:
        raise ConfigError(f"budget.{sorted(set(bd) - {'epsilon', 'delta'})[0]}", "unknown field")
    params = _build(SECTION_TYPES[kind], data.get(kind, {}), kind)
    out = data.get("out")
    cfg = ExperimentConfig(kind, params, budget, trials, horizon, seed, out)
    _validate(cfg)
    return cfg


def load_config(path: str | Path, kind: str | None = None) -> ExperimentConfig:
    """Read a ``.toml`` or ``.json`` configuration."""
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(path.read_text())
        else:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
    except FileNotFoundError as e:
        raise ConfigError("<file>", f"cannot read {path}") from e
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError("<file>", f"parse error: {e}") from e
    return config_from_dict(data, kind)


def default_config(kind: str, seed: int = 0, **overrides) -> ExperimentConfig:
    data = {"kind": kind, "seed": seed}
    data.update(overrides)
    return config_from_dict(data)
