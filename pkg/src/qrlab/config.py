"""Run configuration: parsing, validation and overrides.

A run config is a flat JSON object plus a nested ``strategy`` object. Unknown
keys are rejected everywhere. Overrides use ``key=value`` with dotted keys
for strategy fields (``strategy.kind=sqr``); values are parsed as JSON when
possible and kept as strings otherwise.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .datagen import SceneParams
from .decoder import ModelConfig
from .errors import ConfigError
from .recollection import StrategyConfig

OUTPUT_ROOT_ENV = "QRLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


@dataclass(frozen=True)
class RunConfig:
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    num_stages: int = 6
    num_queries: int = 20
    dim: int = 32
    num_classes: int = 4
    ffn_mult: int = 2
    spatial_prior: bool = True
    lr: float = 1e-3
    lr_drop_epoch: int | None = 16
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float | None = 1.0
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    data_seed: int = 0
    train_size: int = 2000
    val_size: int = 200
    grid: int = 16
    noise_sigma: float = 0.1
    eval_depth: int | None = None
    output_dir: str | None = None

    def validate(self) -> RunConfig:
        positive = ("num_stages", "num_queries", "dim", "num_classes", "ffn_mult", "epochs", "batch_size", "train_size", "grid")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.val_size < 0:
            raise ConfigError("val_size must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigError("betas must lie in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive or null")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.eval_depth is not None and self.eval_depth < 1:
            raise ConfigError("eval_depth must be >= 1")
        self.strategy.validate(self.num_stages)
        return self

    # -- derived configs --------------------------------------------------

    def model(self) -> ModelConfig:
        strat = self.strategy.effective()
        return ModelConfig(
            num_stages=self.num_stages,
            num_queries=self.num_queries,
            dim=self.dim,
            num_classes=self.num_classes,
            in_channels=self.num_classes + 4,
            ffn_mult=self.ffn_mult,
            shared_stages=strat.shared_stages,
            num_query_groups=strat.num_query_groups,
            spatial_prior=self.spatial_prior,
        )

    def scene(self) -> SceneParams:
        return SceneParams(num_classes=self.num_classes, grid=self.grid, noise_sigma=self.noise_sigma)

    def run_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
        return root / f"{self.strategy.label()}-seed{self.seed}"

    # -- (de)serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = strategy_to_dict(self.strategy)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = dict(data)
        if "strategy" in kwargs:
            kwargs["strategy"] = strategy_from_dict(kwargs["strategy"])
        try:
            cfg = cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from None
        _check_types(cfg)
        return cfg.validate()


def strategy_to_dict(s: StrategyConfig) -> dict:
    d = asdict(s)
    for k in ("weights", "removal_probs"):
        if d[k] is not None:
            d[k] = list(d[k])
    return d


def strategy_from_dict(data) -> StrategyConfig:
    if isinstance(data, str):
        data = {"kind": data}
    if not isinstance(data, dict):
        raise ConfigError("strategy must be an object or a kind name")
    known = {f.name for f in fields(StrategyConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown strategy keys: {', '.join(unknown)}")
    kwargs = dict(data)
    for k in ("weights", "removal_probs"):
        if kwargs.get(k) is not None:
            kwargs[k] = tuple(float(v) for v in kwargs[k])
    return StrategyConfig(**kwargs)


_TYPES = {
    int: (int,),
    float: (int, float),
    bool: (bool,),
    str: (str,),
}


def _check_types(cfg: RunConfig) -> None:
    for f in fields(cfg):
        if f.name == "strategy":
            continue
        v = getattr(cfg, f.name)
        default = getattr(RunConfig(), f.name)
        if v is None:
            if f.type.endswith("None"):
                continue
            raise ConfigError(f"{f.name} may not be null")
        want = type(default) if default is not None else (int if f.type.startswith("int") else float if f.type.startswith("float") else str)
        ok = isinstance(v, _TYPES[want]) and not (want is not bool and isinstance(v, bool))
        if not ok:
            raise ConfigError(f"{f.name} expects {want.__name__}, got {v!r}")


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides:
        path, value = parse_override(text)
        target = data
        for part in path[:-1]:
            sub = target.get(part)
            if isinstance(sub, str):
                sub = {"kind": sub}
            if sub is None:
                sub = {}
            if not isinstance(sub, dict):
                raise ConfigError(f"cannot override inside {part!r}")
            target[part] = sub
            target = sub
        target[path[-1]] = value
    return data


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
    return RunConfig.from_dict(apply_overrides(data, overrides or []))


def with_strategy(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, strategy=replace(cfg.strategy, **kw)).validate()
