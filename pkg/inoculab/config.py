"""Декларативный конфиг эксперимента: YAML-дерево с версией схемы и вложенные dataclass."""
import logging
from dataclasses import dataclass, fields, asdict, replace
from pathlib import Path
from typing import Optional

import yaml

from inoculab.attacks import AttackTrainConfig
from inoculab.deploy import DeployConfig
from inoculab.errors import ConfigError, InoculabError
from inoculab.nncore import ARCHITECTURES, stable_hash
from inoculab.postdeploy import RepairConfig, StreamSegment
from inoculab.predeploy import GridSearchConfig
from inoculab.reveng import CycleGanTrainConfig
from inoculab.triggers import PRESETS, PoisonSpec, poison_preset

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Поля, которые не влияют на результаты и не входят в хеш конфига
UNHASHED = ("out", "run_name", "data_root")


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic-fixture"
    # Бюджет на класс: (train, valid, stream+test)
    counts: tuple = (100, 40, 60)
    split_seed: int = 0
    stream_test_mode: str = "disjoint"
    valid_fraction: float = 1.0
    arch_id: str = "mnist-cnn"

    def __post_init__(self):
        if len(self.counts) != 3:
            raise ConfigError(f"dataset.counts must hold three integers, got {self.counts}")
        if self.arch_id not in ARCHITECTURES:
            raise ConfigError(f"dataset.arch_id '{self.arch_id}' is not one of {sorted(ARCHITECTURES)}")


@dataclass(frozen=True)
class AttackConfig:
    preset: str = "fixture-patch"
    # Явная спецификация отравления вместо пресета
    poison: Optional[dict] = None
    train: AttackTrainConfig = AttackTrainConfig()
    train_clean_baseline: bool = False
    # > 0: атакующий сам применяет шумовую аугментацию, дальше идет адаптивная BadNet
    adaptive_gamma: float = 0.0

    def __post_init__(self):
        if self.poison is None and self.preset not in PRESETS:
            raise ConfigError(f"attack.preset '{self.preset}' is not one of {PRESETS}")

    def poison_spec(self, image_shape, num_classes: int) -> PoisonSpec:
        if self.poison is not None:
            return PoisonSpec.from_dict(self.poison)
        return poison_preset(self.preset, image_shape, num_classes)


@dataclass(frozen=True)
class EvalConfig:
    per_trigger: bool = False
    # ASR каждой части комбинированного триггера отдельно
    per_part: bool = False
    seed: int = 0
    # Внешние FAR/FRR детектора STRIP в процентах: {"far": ..., "frr": ...}
    strip: Optional[dict] = None

    def __post_init__(self):
        if self.strip is not None and set(self.strip) != {"far", "frr"}:
            raise ConfigError(f"eval.strip needs exactly 'far' and 'frr', got {sorted(self.strip)}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    attack: AttackConfig = AttackConfig()
    grid: GridSearchConfig = GridSearchConfig()
    deploy: DeployConfig = DeployConfig()
    cyclegan: CycleGanTrainConfig = CycleGanTrainConfig.desk()
    repair: RepairConfig = RepairConfig()
    # Сегменты потока для раундов после первого ремонта
    schedule: tuple = ()
    eval: EvalConfig = EvalConfig()
    seed: int = 0
    out: Optional[str] = None
    run_name: Optional[str] = None
    data_root: Optional[str] = None

    @property
    def alpha0(self) -> float:
        # Начальный lr рецепта атаки с учетом расписания
        return self.attack.train.train_config().initial_learning_rate

    def repair_config(self) -> RepairConfig:
        return self.repair.resolved(self.alpha0)


SECTIONS = {
    "dataset": DatasetConfig,
    "grid": GridSearchConfig,
    "deploy": DeployConfig,
    "cyclegan": CycleGanTrainConfig,
    "repair": RepairConfig,
    "eval": EvalConfig,
}


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    if isinstance(value, dict):
        return {k: _tuplify(v) for k, v in value.items()}
    return value


def _listify(value):
    if isinstance(value, (list, tuple)):
        return [_listify(v) for v in value]
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    return value


def _build(cls, data, section: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {sorted(unknown)}")
    try:
        return cls(**{k: _tuplify(v) if k not in ("poison", "strip") else v for k, v in data.items()})
    except ConfigError:
        raise
    except (InoculabError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version}, expected {SCHEMA_VERSION}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    kwargs = {name: _build(cls, data.get(name), name) for name, cls in SECTIONS.items() if name in data}
    if "attack" in data:
        attack = dict(data["attack"] or {})
        train = _build(AttackTrainConfig, attack.pop("train", None), "attack.train")
        kwargs["attack"] = replace(_build(AttackConfig, attack, "attack"), train=train)
    if "schedule" in data:
        segments = data["schedule"] or []
        if not isinstance(segments, list):
            raise ConfigError("schedule must be a list of stream segments")
        kwargs["schedule"] = tuple(_build(StreamSegment, s, f"schedule[{i}]") for i, s in enumerate(segments))
    for key in ("seed", "out", "run_name", "data_root"):
        if key in data:
            kwargs[key] = data[key]
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    logger.info(f"Loaded config {path}")
    return config_from_dict(data or {})


def config_to_dict(cfg: ExperimentConfig) -> dict:
    data = {"schema_version": SCHEMA_VERSION}
    data.update(_listify(asdict(cfg)))
    return data


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = yaml.safe_dump(config_to_dict(cfg), sort_keys=False, allow_unicode=True)
    if path is not None:
        Path(path).write_text(text)
    return text


def config_hash(cfg: ExperimentConfig) -> str:
    data = {k: v for k, v in config_to_dict(cfg).items() if k not in UNHASHED}
    return stable_hash(data)


# Этап -> секции, от которых зависит его результат
STAGE_SECTIONS = {
    "attack": ("dataset", "attack"),
    "predeploy": ("grid",),
    "deploy": ("deploy",),
    "treat": ("cyclegan",),
    "repair": ("repair", "schedule"),
    "eval": ("eval",),
}
STAGE_ORDER = ("attack", "predeploy", "deploy", "treat", "repair", "eval")


def stage_hash(cfg: ExperimentConfig, stage: str) -> str:
    """Хеш этапа: его секции плюс хеш предыдущего этапа по цепочке."""
    if stage not in STAGE_SECTIONS:
        raise ConfigError(f"unknown stage '{stage}'")
    data = config_to_dict(cfg)
    body = {name: data[name] for name in STAGE_SECTIONS[stage]}
    index = STAGE_ORDER.index(stage)
    if index > 0:
        body["previous"] = stage_hash(cfg, STAGE_ORDER[index - 1])
    return stable_hash(body)


def with_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out=None, data_root=None) -> ExperimentConfig:
    """Флаги CLI поверх файла; --seed расходится по всем секциям."""
    if seed is not None:
        cfg = replace(
            cfg,
            seed=seed,
            dataset=replace(cfg.dataset, split_seed=seed),
            attack=replace(cfg.attack, train=replace(cfg.attack.train, seed=seed)),
            grid=replace(cfg.grid, seed=seed),
            cyclegan=replace(cfg.cyclegan, seed=seed),
            repair=replace(cfg.repair, seed=seed),
            eval=replace(cfg.eval, seed=seed),
            schedule=tuple(replace(s, seed=seed + k + 1) for k, s in enumerate(cfg.schedule)),
        )
    if out is not None:
        cfg = replace(cfg, out=str(out))
    if data_root is not None:
        cfg = replace(cfg, data_root=str(data_root))
    return cfg


def run_id(cfg: ExperimentConfig) -> str:
    return cfg.run_name or f"{cfg.dataset.name}-{config_hash(cfg)[:12]}"
