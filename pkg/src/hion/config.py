"""Strict TOML run configuration.

Each ``[section]`` maps onto a dataclass; unknown keys, wrong types and
missing required keys raise :class:`ConfigError` naming the dotted field.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .simulator import Scenario
from .slmpc import SlmpcConfig
from .systems import CostSpec, StateDistribution
from .training import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

_MISSING = object()


@dataclass
class SystemSection:
    id: str
    t_f: float
    distribution: dict = field(default_factory=dict)


@dataclass
class CostSection:
    id: str
    kappa: float = 1.0


@dataclass
class ModelSection:
    state_hidden: list = field(default_factory=lambda: [64, 64, 64])
    costate_hidden: list = field(default_factory=lambda: [64, 64, 64])


@dataclass
class CheckpointSection:
    path: str


@dataclass
class TpbvpSection:
    x_o: list
    x_r: list
    n_points: int = 101


@dataclass
class ScenarioSection:
    duration: float
    reference_schedule: list
    initial_state: list
    sampling_periods: list = field(default_factory=lambda: [0.5])
    integrator_step: float = 0.01
    system: str | None = None
    cost: str | None = None
    kappa: float = 1.0


@dataclass
class SlmpcSection:
    horizon: float = 2.5
    n_steps: int = 25
    sampling_period: float = 0.5
    u_bound: float | None = None
    control_blocks: str = "sampling"
    system: str | None = None
    cost: str | None = None
    kappa: float = 1.0


@dataclass
class CompareSection:
    hion_sampling_periods: list = field(default_factory=lambda: ["realtime", 0.5, "tf"])


@dataclass
class TrainSection:
    n_epochs: int = 20000
    batch_size: int = 256
    n_transient: int = 8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss_weights: dict = field(default_factory=dict)
    finetune_from: str | None = None
    cosine_decay: bool = False
    lr_min: float = 0.0
    n_shards: int = 1


SECTIONS = {
    "system": SystemSection,
    "cost": CostSection,
    "model": ModelSection,
    "train": TrainSection,
    "checkpoint": CheckpointSection,
    "tpbvp": TpbvpSection,
    "scenario": ScenarioSection,
    "slmpc": SlmpcSection,
    "compare": CompareSection,
}


def _type_ok(value, annotation: str) -> bool:
    ann = annotation.replace(" ", "")
    if value is None:
        return "None" in ann
    if isinstance(value, bool):
        return ann.startswith("bool")
    if ann.startswith("int"):
        return isinstance(value, int)
    if ann.startswith("float"):
        return isinstance(value, (int, float))
    if ann.startswith("str"):
        return isinstance(value, str)
    if ann.startswith("list"):
        return isinstance(value, list)
    if ann.startswith("dict"):
        return isinstance(value, dict)
    return True


def _build(cls, data: Any, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table", section)
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}", f"{section}.{key}")
    kwargs = {}
    for name, f in known.items():
        dotted = f"{section}.{name}"
        if name in data:
            value = data[name]
            if not _type_ok(value, str(f.type)):
                raise ConfigError(f"{dotted} has the wrong type ({type(value).__name__}, expected {f.type})", dotted)
            if str(f.type).startswith("float") and isinstance(value, int):
                value = float(value)
            kwargs[name] = value
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"missing required key {dotted}", dotted)
    return cls(**kwargs)


@dataclass
class RunConfig:
    sections: dict
    raw: dict
    path: str | None = None

    def has(self, name: str) -> bool:
        return name in self.sections

    def get(self, name: str):
        try:
            return self.sections[name]
        except KeyError:
            raise ConfigError(f"missing required section [{name}]", name) from None

    def get_or_default(self, name: str):
        if name in self.sections:
            return self.sections[name]
        return _build(SECTIONS[name], {}, name)

    # typed views ------------------------------------------------------------

    def cost_spec(self) -> CostSpec:
        c = self.get("cost")
        return _wrap(lambda: CostSpec(c.id, c.kappa), "cost")

    def distribution(self) -> StateDistribution:
        d = self.get("system").distribution
        allowed = {f.name for f in fields(StateDistribution)}
        for key in d:
            if key not in allowed:
                raise ConfigError(f"unknown key system.distribution.{key}", f"system.distribution.{key}")
        return StateDistribution(**{k: float(v) for k, v in d.items()})

    def train_config(self, seed: int | None = None, threads: int = 1) -> TrainConfig:
        t = self.get_or_default("train")
        kwargs = dataclasses.asdict(t)
        if seed is not None:
            kwargs["seed"] = seed
        kwargs["threads"] = threads
        return _wrap(lambda: TrainConfig(**kwargs), "train")

    def scenario(self, sampling_period, system: str, cost: CostSpec, t_f: float | None = None) -> Scenario:
        s = self.get("scenario")
        sched = s.reference_schedule
        if not all(isinstance(p, list) and len(p) == 2 for p in sched):
            raise ConfigError("scenario.reference_schedule must be a list of [time, value] pairs", "scenario.reference_schedule")
        return _wrap(
            lambda: Scenario(
                system=s.system or system,
                cost_id=s.cost or cost.cost_id,
                kappa=s.kappa if s.cost else cost.kappa,
                sampling_period=sampling_period,
                duration=s.duration,
                reference_schedule=tuple(tuple(p) for p in sched),
                initial_state=tuple(s.initial_state),
                integrator_step=s.integrator_step,
                t_f=t_f,
            ),
            "scenario",
        )

    def slmpc_config(self, system: str, cost: CostSpec) -> SlmpcConfig:
        s = self.get("slmpc")
        return _wrap(
            lambda: SlmpcConfig(
                system=s.system or system,
                horizon=s.horizon,
                n_steps=s.n_steps,
                sampling_period=s.sampling_period,
                cost=CostSpec(s.cost, s.kappa) if s.cost else cost,
                u_bound=s.u_bound,
                control_blocks=s.control_blocks,
            ),
            "slmpc",
        )


def _wrap(build, section: str):
    try:
        return build()
    except ConfigError as exc:
        dotted = f"{section}.{exc.field}" if exc.field and "." not in exc.field else (exc.field or section)
        raise ConfigError(str(exc), dotted) from None


def parse_sampling(value):
    if isinstance(value, str):
        if value not in ("realtime", "tf"):
            raise ConfigError(f"sampling period must be a number, 'realtime' or 'tf', got {value!r}", "sampling_period")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"invalid sampling period {value!r}", "sampling_period")
    return float(value)


def loads(text: str, path: str | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"could not parse config: {exc}") from None
    sections = {}
    for name, data in raw.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{name}]", name)
        sections[name] = _build(SECTIONS[name], data, name)
    return RunConfig(sections=sections, raw=raw, path=path)


def load(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return loads(text, str(path))
