"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .geo import Mapping
from .graph import SplitSpec
from .model import ModelConfig, Variant
from .training import TrainConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ks(text):
    ks = tuple(int(k) for k in str(text).replace(" ", "").split(",") if k)
    if not ks or min(ks) < 1:
        raise ValueError(f"bad K list {text!r}")
    return ks


def _parse_optional_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


@dataclass
class RunConfig:
    # model
    c: int = 128
    c_t: int = 128
    layers: int = 2
    neighbors: int = 20
    tau: float = 1.0
    mapping: str = "identity"
    use_residual: bool = False
    variant: str = "full"
    radius_km: float = 5.0
    time_unit_s: float = 3600.0
    # training
    lr: float = 1e-4
    lambda_l2: float = 1e-6
    epochs: int = 10
    batch_size: int = 200
    neg_per_pos: int = 1
    seed: int = 0
    patience: int = 5
    val_queries: int = 0          # 0: validate on the whole validation split
    # data
    k_core: int = 10
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    # evaluation
    ks: tuple = (10, 20)
    eval_radius_km: object = None  # None: the variant's own recall radius
    threads: int = 1
    # paths
    graph: str = ""
    checkpoint: str = ""
    log: str = ""
    report: str = ""

    _PARSERS = {
        "use_residual": _parse_bool,
        "ks": _parse_ks,
        "eval_radius_km": _parse_optional_float,
    }

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_value(cls, key, text):
        if key not in cls.keys():
            raise ConfigError(f"unknown config key {key!r}")
        parser = cls._PARSERS.get(key)
        if parser is None:
            default = next(f.default for f in fields(cls) if f.name == key)
            parser = type(default)
        try:
            return parser(text)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from None

    @classmethod
    def from_file(cls, path, overrides=None):
        """Read ``key = value`` lines ('#' starts a comment), then apply ``overrides``."""
        values = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, text = (part.strip() for part in line.split("=", 1))
                if key not in cls.keys():
                    raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
                values[key] = cls.parse_value(key, text)
        return cls.build(values, overrides)

    @classmethod
    def build(cls, values=None, overrides=None):
        merged = dict(values or {})
        for k, v in (overrides or {}).items():
            if k not in cls.keys():
                raise ConfigError(f"unknown config key {k!r}")
            if v is not None:
                merged[k] = v
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self):
        try:
            self.model_config()
            self.train_config()
            self.split_spec()
            Mapping(self.mapping)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.threads < 1 or self.k_core < 0 or self.val_queries < 0:
            raise ConfigError("threads must be >= 1, k_core and val_queries >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(c=self.c, c_t=self.c_t, layers=self.layers, neighbors=self.neighbors, tau=self.tau,
                           mapping=Mapping(self.mapping), use_residual=self.use_residual,
                           variant=Variant(self.variant), radius_km=self.radius_km,
                           time_unit_s=self.time_unit_s)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lambda_l2=self.lambda_l2, epochs=self.epochs, batch_size=self.batch_size,
                           neg_per_pos=self.neg_per_pos, seed=self.seed, patience=self.patience)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac)

    def to_text(self) -> str:
        lines = []
        for k, v in dataclasses.asdict(self).items():
            if k == "ks":
                v = ",".join(str(x) for x in v)
            lines.append(f"{k} = {'' if v is None else v}")
        return os.linesep.join(lines) + os.linesep


def defaults_help() -> str:
    d = RunConfig()
    return ", ".join(f"{k}={getattr(d, k)}" for k in RunConfig.keys())
