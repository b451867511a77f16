"""Лечение после развертывания: дообучение на D_treat + D_valid и многораундовый цикл."""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from inoculab.data import LabeledDataset, build_stream, resample
from inoculab.deploy import EnsembleState, StreamReport, run_stream, should_trigger_repair
from inoculab.errors import PreconditionError, TrainingError
from inoculab.nncore import ModelCheckpoint, TrainConfig, checkpoint_from_model, fit_arrays, save_checkpoint, stable_hash
from inoculab.reveng import CycleGanTrainConfig, PoisonGenerator, TreatmentSet, generate_treatment, save_generator, train_cyclegan
from inoculab.triggers import PoisonSpec

logger = logging.getLogger(__name__)

PROMOTION = {
    "badnet": "repaired-badnet",
    "goodnet": "repaired-goodnet",
    "repaired-badnet": "repaired-badnet",
    "repaired-goodnet": "repaired-goodnet",
}


@dataclass(frozen=True)
class RepairConfig:
    epochs: int = 10
    # None: α₀/10 от рецепта атаки, подставляется при сборке конфига
    learning_rate: Optional[float] = None
    optimizer_id: str = "adam"
    batch_size: int = 32
    seed: int = 0
    rounds: int = 1
    # Ремонт в фоновом потоке, пока ансамбль продолжает обслуживать поток
    background: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"fine-tune epochs must be >= 1, got {self.epochs}")

    def resolved(self, alpha0: float) -> "RepairConfig":
        return self if self.learning_rate is not None else replace(self, learning_rate=alpha0 / 10)

    def to_dict(self) -> dict:
        return asdict(self)


def fine_tune(ckpt: ModelCheckpoint, treat: Optional[TreatmentSet], valid: LabeledDataset, cfg: RepairConfig,
              tag: str = None) -> ModelCheckpoint:
    if cfg.learning_rate is None:
        raise TrainingError("fine-tune learning rate is not resolved", tag=tag)
    train_ds = valid if treat is None else treat.dataset.concat(valid, name=f"{valid.name}+treat")
    if train_ds.image_shape != tuple(ckpt.arch.input_shape):
        raise PreconditionError(f"treatment shape {train_ds.image_shape} does not match model input {ckpt.arch.input_shape}")
    pre = ckpt.meta.preprocessing
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        optimizer_id=cfg.optimizer_id,
        preprocessing_id=pre["kind"],
        norm_mean=tuple(pre.get("mean", ())),
        norm_std=tuple(pre.get("std", ())),
        seed=cfg.seed,
    )
    model = ckpt.fresh_model()
    losses = fit_arrays(model, train_ds.images, train_ds.labels, train_cfg, tag=tag or f"fine-tune {ckpt.meta.role}")
    extra = {"treatment_generator": treat.generator_id if treat is not None else None}
    return checkpoint_from_model(
        model,
        role=PROMOTION.get(ckpt.meta.role, ckpt.meta.role),
        seed=cfg.seed,
        config_hash=stable_hash({"repair": cfg.to_dict(), "train": train_cfg.to_dict()}),
        parent=ckpt.id,
        losses=losses,
        extra=extra,
    )


@dataclass
class DefenseContext:
    """Все, что нужно раунду ремонта помимо ансамбля."""
    valid: LabeledDataset
    gan_clean: LabeledDataset
    gan_cfg: CycleGanTrainConfig
    repair_cfg: RepairConfig
    # (bd, gd) -> {"bd": MetricsRecord, "gd": ..., "ensemble": ...}; только для оценки
    evaluator: Optional[Callable] = None
    out_dir: Optional[Path] = None
    # Пул чистых изображений для потока многораундового сценария
    stream_pool: Optional[LabeledDataset] = None


@dataclass
class RoundRecord:
    round: int
    generator_id: str
    bd_id: str
    gd_id: str
    quarantine_used: int
    metrics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "generator_id": self.generator_id,
            "bd_id": self.bd_id,
            "gd_id": self.gd_id,
            "quarantine_used": self.quarantine_used,
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
        }


@dataclass
class DefenseRunState:
    round_index: int
    ensemble: EnsembleState
    context: DefenseContext
    history: list = field(default_factory=list)
    stream_reports: list = field(default_factory=list)


@dataclass
class RepairResult:
    round: int
    generator: PoisonGenerator
    bd: ModelCheckpoint
    gd: ModelCheckpoint
    quarantine_used: int


def prepare_repair(state: DefenseRunState, bd: ModelCheckpoint, gd: ModelCheckpoint, quarantine_images: np.ndarray,
                   quarantine_used: int) -> RepairResult:
    """Тяжелая часть раунда: CycleGAN, D_treat, дообучение обеих сетей."""
    ctx = state.context
    round_no = state.round_index + 1
    tag = f"round {round_no}"
    gan_cfg = replace(ctx.gan_cfg, seed=ctx.gan_cfg.seed + state.round_index)
    repair_cfg = replace(ctx.repair_cfg, seed=ctx.repair_cfg.seed + state.round_index)
    try:
        generator = train_cyclegan(ctx.gan_clean.images, quarantine_images, gan_cfg, parent=bd.id)
        treat = generate_treatment(generator, ctx.valid)
        new_bd = fine_tune(bd, treat, ctx.valid, repair_cfg, tag=f"{tag} bd")
        new_gd = fine_tune(gd, treat, ctx.valid, repair_cfg, tag=f"{tag} gd")
    except TrainingError as e:
        raise TrainingError(str(e), epoch=e.epoch, tag=tag) from e
    return RepairResult(round_no, generator, new_bd, new_gd, quarantine_used)


def apply_repair(state: DefenseRunState, result: RepairResult) -> DefenseRunState:
    ensemble = state.ensemble
    ensemble.swap(result.bd, result.gd)
    ensemble.quarantine.mark_repaired(result.quarantine_used, ensemble.config.quarantine_policy)
    ctx = state.context
    metrics = ctx.evaluator(result.bd, result.gd) if ctx.evaluator is not None else {}
    record = RoundRecord(result.round, result.generator.id, result.bd.id, result.gd.id, result.quarantine_used, metrics)
    if ctx.out_dir is not None:
        write_round(Path(ctx.out_dir), result, record)
    state.history.append(record)
    state.round_index = result.round
    logger.info(f"Repair round {result.round} applied ({result.quarantine_used} quarantined images used)")
    return state


def write_round(out_dir: Path, result: RepairResult, record: RoundRecord) -> Path:
    round_dir = out_dir / f"round-{result.round}"
    round_dir.mkdir(parents=True, exist_ok=True)
    save_generator(result.generator, round_dir / "generator.nnckpt")
    save_checkpoint(result.bd, round_dir / "bd.nnckpt")
    save_checkpoint(result.gd, round_dir / "gd.nnckpt")
    (round_dir / "metrics.json").write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True))
    return round_dir


def _snapshot(state: DefenseRunState):
    ensemble = state.ensemble
    if not should_trigger_repair(ensemble):
        raise PreconditionError(
            f"quarantine holds {ensemble.quarantine.since_repair()} new items, "
            f"repair needs {ensemble.config.repair_threshold}"
        )
    used = len(ensemble.quarantine)
    snapshot = ensemble.quarantine.snapshot(ensemble.config.quarantine_policy)
    bd, gd = ensemble.members()
    return bd, gd, snapshot.images(), used


def defense_round(state: DefenseRunState) -> DefenseRunState:
    bd, gd, images, used = _snapshot(state)
    return apply_repair(state, prepare_repair(state, bd, gd, images, used))


@dataclass(frozen=True)
class StreamSegment:
    trigger_indices: tuple
    ratio: float
    length: int
    seed: int = 0
    exact_count: bool = False

    def to_dict(self) -> dict:
        return {"trigger_indices": list(self.trigger_indices), "ratio": self.ratio, "length": self.length,
                "seed": self.seed, "exact_count": self.exact_count}


def segment_stream(segment: StreamSegment, pool: LabeledDataset, spec: PoisonSpec) -> list:
    """Поток сегмента: выборка из пула и отравление подмножеством триггеров."""
    sub = spec.subset(segment.trigger_indices)
    items = build_stream(resample(pool, segment.length, segment.seed), sub, segment.ratio, segment.seed,
                         exact_count=segment.exact_count)
    # Индексы триггеров возвращаются в нумерацию полной спецификации
    for item in items:
        if item.trigger_index is not None:
            item.trigger_index = int(segment.trigger_indices[item.trigger_index])
    return items


def run_multi_round(state: DefenseRunState, schedule, spec: PoisonSpec, background: bool = False) -> DefenseRunState:
    """Чередует обработку потока и раунды ремонта, пока идет расписание."""
    schedule = list(schedule)
    if not schedule:
        raise PreconditionError("stream schedule is empty")
    if state.context.stream_pool is None:
        raise PreconditionError("multi-round schedule needs a stream pool")
    max_rounds = state.context.repair_cfg.rounds
    ensemble = state.ensemble
    executor = ThreadPoolExecutor(max_workers=1) if background else None
    pending = None
    try:
        for k, segment in enumerate(schedule):
            items = segment_stream(segment, state.context.stream_pool, spec)
            report = StreamReport()
            position = 0
            logger.info(f"Segment {k + 1}/{len(schedule)}: triggers {segment.trigger_indices}, ratio {segment.ratio}, {segment.length} items")
            while position < len(items):
                stop = min(len(items), position + ensemble.config.batch_size) if background else None
                rounds_left = state.round_index < max_rounds
                _, _, report = run_stream(ensemble, items, start=position, stop=stop, report=report,
                                          stop_on_repair=pending is None and rounds_left)
                position = report.position
                if pending is not None and pending.done():
                    apply_repair(state, pending.result())
                    pending = None
                if pending is None and state.round_index < max_rounds and should_trigger_repair(ensemble):
                    bd, gd, images, used = _snapshot(state)
                    if background:
                        pending = executor.submit(prepare_repair, state, bd, gd, images, used)
                    else:
                        apply_repair(state, prepare_repair(state, bd, gd, images, used))
            state.stream_reports.append(report)
        if pending is not None:
            apply_repair(state, pending.result())
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    return state
