"""Experiment configuration and strict JSON parsing."""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

from .data import KINDS
from .model import ModelConfig
from .privacy import DpConfig

SCHEMES = ("fedavg", "feddma", "fedlol")
MODES = ("fedsfr", "baseline")
PARTITIONS = ("iid-equal", "size-skewed")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSpec:
    kind: str = "gaussians"
    n_train: int = 400
    partition: str = "iid-equal"
    public_fraction: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    K: int = 10
    K_m: int = 2
    K_o: int = 2
    frac_m: float = 0.2
    frac_o: float = 0.1
    qsgd_bits: int = 4
    feature_bits: int = 4
    feature_count: int = 20
    batch_size: int = 16
    E_c: int = 10
    E_s: int = 100
    T: int = 30
    eta_c0: float = 2.0
    eta_s0: float = 1.0
    decay_factor: float = 0.9
    decay_interval: int = 10
    snr_db: float = 20.0
    alpha_c: float = 1.0
    alpha_s: float = 1.0
    scheme: str = "fedavg"
    mode: str = "fedsfr"
    dp: DpConfig = field(default_factory=DpConfig)
    seed: int = 0
    data: DataSpec = field(default_factory=DataSpec)
    eval_count: int = 64

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg: ExperimentConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.K >= 1, "K must be >= 1")
    need(cfg.K_m >= 1, "K_m must be >= 1")
    need(cfg.K_o >= 0, "K_o must be >= 0")
    need(cfg.K_m + cfg.K_o <= cfg.K, f"K_m + K_o = {cfg.K_m + cfg.K_o} exceeds K = {cfg.K}")
    need(0 < cfg.frac_m <= 1 and 0 < cfg.frac_o <= 1, "sparsification fractions must be in (0, 1]")
    need(1 <= cfg.qsgd_bits <= 52, "qsgd_bits must be in [1, 52]")
    need(1 <= cfg.feature_bits <= 52, "feature_bits must be in [1, 52]")
    need(cfg.feature_count >= 1, "feature_count must be >= 1")
    need(cfg.batch_size >= 1, "batch_size must be >= 1")
    need(min(cfg.E_c, cfg.E_s, cfg.T) >= 0, "E_c, E_s and T must be non-negative")
    need(cfg.eta_c0 >= 0 and cfg.eta_s0 >= 0, "learning rates must be non-negative")
    need(0 < cfg.decay_factor <= 1 and cfg.decay_interval >= 1, "bad learning-rate decay")
    need(cfg.alpha_c >= 0 and cfg.alpha_s >= 0, "alpha_c and alpha_s must be non-negative")
    need(cfg.scheme in SCHEMES, f"scheme must be one of {SCHEMES}")
    need(cfg.mode in MODES, f"mode must be one of {MODES}")
    need(cfg.data.kind in KINDS, f"data.kind must be one of {KINDS}")
    need(cfg.data.partition in PARTITIONS, f"data.partition must be one of {PARTITIONS}")
    need(0 < cfg.data.public_fraction <= 1, "data.public_fraction must be in (0, 1]")
    need(cfg.data.n_train >= cfg.K, "data.n_train must give every client at least one image")
    need(cfg.eval_count >= 1, "eval_count must be >= 1")
    if cfg.mode == "fedsfr" and cfg.eta_s0 >= cfg.eta_c0:
        warnings.warn("eta_s0 >= eta_c0: the server step may dominate refinement", stacklevel=3)


def _strict(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    names = [f.name for f in dataclasses.fields(cls)]
    for key in obj:
        if key not in names:
            raise ConfigError(f"unknown field {where}{key}")
    for name in names:
        if name not in obj:
            raise ConfigError(f"missing field {where}{name}")
    return obj


def from_dict(obj: dict) -> ExperimentConfig:
    obj = _strict(ExperimentConfig, obj, "")
    kw = dict(obj)
    m = _strict(ModelConfig, obj["model"], "model.")
    kw["model"] = ModelConfig(tuple(m["image_shape"]), m["N"], m["d"], tuple(m["hidden_widths"]), m["M"])
    kw["dp"] = DpConfig(**_strict(DpConfig, obj["dp"], "dp."))
    kw["data"] = DataSpec(**_strict(DataSpec, obj["data"], "data."))
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["model"]["image_shape"] = list(cfg.model.image_shape)
    out["model"]["hidden_widths"] = list(cfg.model.hidden_widths)
    return out


def parse_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(obj)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2)
        fh.write("\n")
