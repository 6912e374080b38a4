"""Run configuration from a flat ``key = value`` file.

Blank lines and ``#`` comments are ignored. Every key maps to a
:class:`RunConfig` field; unknown keys are rejected. Command-line flags
override file values.
"""

import dataclasses
from dataclasses import dataclass, fields

from .activations import CONVEX_NONDECREASING, parse_activation_string
from .errors import ConfigurationError

HORIZONS = (24, 48, 72, 96)
WEIGHT_MODES = ("dcl", "coef", "id")
MODEL_KINDS = ("lstm-picnn", "mlp-qr")


@dataclass
class RunConfig:
    # inputs and outputs
    sessions: str = "sessions.csv"
    weather: str = "weather.csv"
    holidays: str = ""
    out_dir: str = "out"
    clock_start: str = ""
    clock_end: str = ""
    # model
    model_kind: str = "lstm-picnn"
    context: int = 168
    horizon: int = 24
    lstm_layers: int = 2
    lstm_hidden: int = 100
    picnn_hidden: int = 40
    activations: str = "rg"
    u_activation: str = "tanh"
    use_future_calendar: bool = True
    # training
    batch_size: int = 64
    lr: float = 0.001
    max_epochs: int = 200
    patience: int = 20
    train_samples: int = 64
    val_samples: int = 64
    train_stride: int = 1
    beta: float = 1.0
    seed: int = 0
    # scenarios and splits
    scenarios: int = 1000
    train_end: str = "0.6"
    val_end: str = "0.8"
    reconciler_fraction: float = 0.8
    origin_stride: int = 24
    val_origin_stride: int = 24  # denser validation origins give the reconciler more data
    # reconciler
    weight_mode: str = "dcl"
    pairing: str = "index"
    dcl_lr: float = 0.01
    dcl_epochs: int = 30
    dcl_batch_origins: int = 4
    dcl_train_scenarios: int = 64
    dcl_val_scenarios: int = 200
    # activation sweep
    sweep_depths: str = "2,3,4"
    sweep_max_epochs: int = 3
    sweep_series: str = "total"
    workers: int = 1

    def validate(self):
        if self.horizon not in HORIZONS:
            raise ConfigurationError(f"horizon must be one of {HORIZONS}, got {self.horizon}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigurationError(f"weight_mode must be one of {WEIGHT_MODES}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"model_kind must be one of {MODEL_KINDS}")
        if self.pairing not in ("index", "random"):
            raise ConfigurationError("pairing must be 'index' or 'random'")
        if not set(parse_activation_string(self.activations)) <= CONVEX_NONDECREASING:
            raise ConfigurationError(f"activations {self.activations!r}: only 'r' and 'g' keep the network convex")
        if self.scenarios < 1:
            raise ConfigurationError("scenario count must be >= 1")
        if self.context < 1:
            raise ConfigurationError("context length must be >= 1")
        if not 0.0 < self.beta < 2.0:
            raise ConfigurationError("beta must lie in (0, 2)")
        for name in ("batch_size", "max_epochs", "train_samples", "val_samples", "origin_stride", "val_origin_stride",
                     "train_stride"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        return self

    def snapshot(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


def _coerce(name, typ, raw):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key {name!r}: cannot parse {raw!r} as {typ.__name__}") from None
    return raw


def parse_config(text, source="config"):
    types = {f.name: f.type for f in fields(RunConfig)}
    py = {"int": int, "float": float, "bool": bool, "str": str}
    values = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigurationError(f"{source}:{line_no}: expected key = value")
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in types:
            raise ConfigurationError(f"{source}:{line_no}: unknown key {key!r}")
        typ = types[key]
        values[key] = _coerce(key, py.get(typ, typ) if isinstance(typ, str) else typ, raw)
    return RunConfig(**values)


def load_config(path, overrides=None):
    with open(path) as fh:
        cfg = parse_config(fh.read(), path)
    if overrides:
        cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg.validate()


def write_config(cfg, path):
    with open(path, "w") as fh:
        for f in fields(RunConfig):
            v = getattr(cfg, f.name)
            fh.write(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}\n")
