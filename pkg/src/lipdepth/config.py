"""Experiment configuration: a JSON document validated section by section."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .attacks import AttackConfig, fgsm_config
from .model import ViTConfig
from .schedule import DropSchedule, make_schedule
from .train import TrainConfig


class ConfigValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSection:
    kind: str = "custom"
    kappa_target: float | None = 0.7
    p_max: float | None = None

    def build(self, depth: int) -> DropSchedule:
        return make_schedule(self.kind, depth, self.kappa_target, self.p_max)


@dataclass(frozen=True)
class DataSection:
    train_size: int = 2000
    test_size: int = 1000
    strict_counts: bool = True


@dataclass(frozen=True)
class AttackSection:
    epsilon: float = 8 / 255
    pgd_steps: int = 20
    step_size: float = 2 / 255
    random_start: bool = True
    eot_samples: int = 0
    eval_size: int | None = None

    def fgsm(self) -> AttackConfig:
        return replace(fgsm_config(self.epsilon), eot_samples=self.eot_samples)

    def pgd(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.pgd_steps, self.step_size, "Linf", self.random_start,
                            self.eot_samples)


@dataclass(frozen=True)
class LipschitzSection:
    epsilon: float = 1 / 255
    directions: str = "random"
    eval_size: int | None = None


@dataclass(frozen=True)
class FlopsSection:
    flops_per_mac: int = 2
    nonlinear_cost: float = 5.0
    measure_samples: int = 0


@dataclass(frozen=True)
class PathsSection:
    data_dir: str | None = None
    out_dir: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    model: ViTConfig = field(default_factory=ViTConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    lipschitz: LipschitzSection = field(default_factory=LipschitzSection)
    flops: FlopsSection = field(default_factory=FlopsSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        # the top-level seed drives everything; keep the train section in sync
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d

    def hash(self) -> str:
        """sha256 over everything except output/input locations."""
        d = self.to_dict()
        d.pop("paths")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **sections) -> ExperimentConfig:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(sections)
        return ExperimentConfig(**d)


_SECTIONS = {
    "model": ViTConfig, "schedule": ScheduleSection, "data": DataSection, "train": TrainConfig,
    "attack": AttackSection, "lipschitz": LipschitzSection, "flops": FlopsSection, "paths": PathsSection,
}


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigValidationError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigValidationError(f"unknown keys in {name!r}: {unknown}")
    for key, value in raw.items():
        default = getattr(cls(), key) if key in known else None
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigValidationError(f"{name}.{key} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool) and value is not None:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigValidationError(f"{name}.{key} must be a number")
            if isinstance(default, int) and isinstance(value, float):
                raise ConfigValidationError(f"{name}.{key} must be an integer")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigValidationError(f"invalid {name!r} section: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigValidationError("config must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigValidationError(f"unknown top-level keys: {unknown}")
    kw = {}
    if "seed" in raw:
        if isinstance(raw["seed"], bool) or not isinstance(raw["seed"], int):
            raise ConfigValidationError("seed must be an integer")
        kw["seed"] = raw["seed"]
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _build_section(name, cls, raw[name])
    if "train" in raw and "seed" in raw["train"] and raw["train"]["seed"] != kw.get("seed", 0):
        raise ConfigValidationError("train.seed conflicts with the top-level seed; set only 'seed'")
    cfg = ExperimentConfig(**kw)
    try:
        cfg.schedule.build(cfg.model.depth)
    except ValueError as exc:
        raise ConfigValidationError(f"invalid schedule: {exc}") from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(raw)
