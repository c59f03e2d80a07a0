"""Run configuration: INI sections mapped onto small dataclasses.

Example::

    [run]
    seed = 0

    [a2m]
    steps = 6000
    lambda_sync = 0.05

Unknown sections or keys are rejected so typos fail loudly.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class DataSection:
    n_speakers: int = 32
    clips_per: int = 8
    frames: int = 256
    n_identities: int = 56
    identity_frames: int = 100


@dataclass
class ModelSection:
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    head_size: int = 16
    mlp_layers: int = 2
    window_before: int = 8
    window_after: int = 8
    lora_rank: int = 4


@dataclass
class SyncSection:
    epochs: int = 30
    per_clip: int = 8
    batch: int = 128
    lr: float = 3e-3


@dataclass
class A2MSection:
    steps: int = 7000
    batch: int = 8
    window: int = 128
    lr: float = 1e-3
    lambda_sync: float = 0.05
    p_drop: float = 0.2
    log_every: int = 10
    warmup: int = 200


@dataclass
class SampleSection:
    cfg_w: float = 2.0
    ode_steps: int = 5
    ode_method: str = "midpoint"
    prompt_frames: int = 64


@dataclass
class AdaptSection:
    pretrain_steps: int = 3000
    pretrain_batch: int = 16
    pretrain_identities: int = 50
    identity: int = 50
    iters: int = 2000
    lr: float = 1e-3
    components: str = "inversion,lora"


@dataclass
class EvalSection:
    seeds: str = "0,1,2"
    trials: int = 100
    cfg_sweep: str = "0,1,2,4"
    adapt_iters: int = 2000


@dataclass
class RunConfig:
    seed: int | None = None
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    sync: SyncSection = field(default_factory=SyncSection)
    a2m: A2MSection = field(default_factory=A2MSection)
    sample: SampleSection = field(default_factory=SampleSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self) -> "RunConfig":
        if self.seed is None:
            raise ConfigError("a seed is required (set [run] seed or pass --seed)")
        if self.sample.ode_method not in ("euler", "midpoint"):
            raise ConfigError(f"unknown ODE method {self.sample.ode_method!r}")
        if self.sample.ode_steps < 1:
            raise ConfigError("ode_steps must be >= 1")
        if self.model.hidden != self.model.heads * self.model.head_size:
            raise ConfigError("hidden must equal heads * head_size")
        if not 0.0 <= self.a2m.p_drop <= 1.0:
            raise ConfigError("p_drop must lie in [0, 1]")
        if self.a2m.lambda_sync < 0:
            raise ConfigError("lambda_sync must be >= 0")
        if self.a2m.window > self.data.frames:
            raise ConfigError("a2m window longer than the clips")
        int_list(self.eval.seeds, "eval.seeds")
        float_list(self.eval.cfg_sweep, "eval.cfg_sweep")
        return self


def int_list(text: str, what: str = "value") -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def float_list(text: str, what: str = "value") -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from None


def _coerce(value: str, typ, where: str):
    typ = {"int": int, "float": float, "str": str}.get(typ, typ) if isinstance(typ, str) else typ
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {typ.__name__}") from None


def load_config(path: str | Path | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for section in parser.sections():
        if section == "run":
            for key, value in parser[section].items():
                if key != "seed":
                    raise ConfigError(f"[run] has no key {key!r}")
                cfg.seed = _coerce(value, int, "[run] seed")
            continue
        target = getattr(cfg, section, None)
        if not dataclasses.is_dataclass(target):
            raise ConfigError(f"unknown config section [{section}]")
        types = {f.name: f.type for f in fields(target)}
        for key, value in parser[section].items():
            if key not in types:
                raise ConfigError(f"[{section}] has no key {key!r}")
            setattr(target, key, _coerce(value, types[key], f"[{section}] {key}"))
    return cfg
