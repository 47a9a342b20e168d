"""Run configuration: ``[section]`` headers with ``key = value`` lines.

Example::

    [meta]
    version = 1

    [model]
    network = family=vgg,x=32,small=true,classes=10

    [data]
    dataset = cifar10
    path = data/cifar-10-batches-bin

    [optim]
    kind = adam
    lr = 5e-3

    [distloss]
    lam = 2

    [train]
    epochs = 30
    seed = 1

Every key has a default, so an empty file is a valid configuration. Unknown
sections or keys are rejected. Command-line overrides use dotted keys such as
``optim.lr=1e-3`` and take precedence over the file.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..distloss import DistLossConfig
from ..errors import ConfigError
from ..models import NetworkSpec
from .optim import OptimizerConfig

CONFIG_VERSION = 1


@dataclass
class ModelConfig:
    network: str = "family=vgg,x=32,small=true,classes=10"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    tap: str = "post_pool"
    windowed_weight_ste: bool = False
    dtype: str = "float32"

    def spec(self) -> NetworkSpec:
        return NetworkSpec.parse(self.network)


@dataclass
class DataConfig:
    dataset: str = "cifar10"
    path: str = "data/cifar-10-batches-bin"
    augment: bool = True
    batch_size: int = 100
    train_limit: int = 0
    test_limit: int = 0
    n_train: int = 1000
    n_test: int = 500


@dataclass
class TrainSection:
    epochs: int = 30
    seed: int = 1
    eval_every: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    distloss: DistLossConfig = field(default_factory=DistLossConfig)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> "RunConfig":
        self.model.spec()
        if self.model.dtype not in ("float32", "float64"):
            raise ConfigError(f"model.dtype must be float32 or float64, got {self.model.dtype!r}")
        if self.model.tap not in ("post_pool", "pre_pool"):
            raise ConfigError(f"model.tap must be post_pool or pre_pool, got {self.model.tap!r}")
        if self.data.batch_size < 1 or self.train.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        # re-run dataclass validation after overrides
        self.optim.__post_init__()
        self.distloss.__post_init__()
        return self


SECTIONS = ("model", "data", "optim", "distloss", "train")


def _coerce(raw: str, current, where: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.replace(";", ",").split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {where}") from None
    return raw


def apply_override(cfg: RunConfig, key: str, value: str) -> None:
    if "." not in key:
        raise ConfigError(f"override {key!r} must look like section.key=value")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    if name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {section}.{name}")
    setattr(obj, name, _coerce(value, getattr(obj, name), f"{section}.{name}"))


def parse_config(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}".splitlines()[0]) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section == "meta":
            version = parser.get(section, "version", fallback=str(CONFIG_VERSION))
            if version.strip() != str(CONFIG_VERSION):
                raise ConfigError(f"unsupported config version {version}")
            extra = set(parser[section]) - {"version"}
            if extra:
                raise ConfigError(f"unknown config key meta.{sorted(extra)[0]}")
            continue
        for key, value in parser[section].items():
            apply_override(cfg, f"{section}.{key}", value)
    for key, value in (overrides or {}).items():
        apply_override(cfg, key, value)
    return cfg.validate()


def load_config(path, overrides: dict[str, str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    """Fully resolved configuration in the same grammar."""
    lines = ["[meta]", f"version = {CONFIG_VERSION}", ""]
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)
