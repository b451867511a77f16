"""Построение отравленной обучающей выборки и обучение BadNet."""
import logging
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from inoculab.data import LabeledDataset
from inoculab.errors import TrainingError
from inoculab.nncore import ModelCheckpoint, TrainConfig, architecture, build_model, stable_hash, train
from inoculab.triggers import PoisonSpec, apply_trigger, target_label

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AttackTrainConfig:
    poison_fraction: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    lr_schedule: tuple = ()
    optimizer_id: str = "adam"
    preprocessing_id: str = "scale-1/255"
    norm_mean: tuple = ()
    norm_std: tuple = ()
    seed: int = 0
    # Для комбинированного триггера: части по отдельности с чистыми метками
    decoy_parts: bool = False

    def validate(self, spec: PoisonSpec) -> None:
        if spec.clean_label_mode:
            if not 0 <= self.poison_fraction <= 1:
                raise TrainingError(f"clean-label poison fraction must be in [0, 1], got {self.poison_fraction}")
        elif not 0 <= self.poison_fraction < 1:
            raise TrainingError(f"poison fraction must be in [0, 1), got {self.poison_fraction}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            lr_schedule=tuple(tuple(p) for p in self.lr_schedule),
            optimizer_id=self.optimizer_id,
            preprocessing_id=self.preprocessing_id,
            norm_mean=tuple(self.norm_mean),
            norm_std=tuple(self.norm_std),
            seed=self.seed,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lr_schedule"] = [list(p) for p in self.lr_schedule]
        data["norm_mean"] = list(self.norm_mean)
        data["norm_std"] = list(self.norm_std)
        return data


def poison_training_set(train_ds: LabeledDataset, spec: PoisonSpec, cfg: AttackTrainConfig, rng: np.random.Generator) -> LabeledDataset:
    cfg.validate(spec)
    if spec.clean_label_mode:
        return _poison_clean_label(train_ds, spec, cfg, rng)

    n = len(train_ds)
    count = int(np.floor(cfg.poison_fraction * n + 1e-9))
    if count == 0:
        return train_ds
    picked = np.sort(rng.choice(n, size=count, replace=False))
    # p-доля делится между триггерами поровну
    trigger_of = np.arange(count) % len(spec.triggers)
    rng.shuffle(trigger_of)

    images = np.empty((count,) + train_ds.image_shape, dtype=train_ds.images.dtype)
    labels = np.empty(count, dtype=np.int64)
    for k, i in enumerate(picked):
        t = int(trigger_of[k])
        images[k] = apply_trigger(train_ds.images[i], spec.triggers[t], rng)
        labels[k] = target_label(int(train_ds.labels[i]), spec.target_map, t)
    poisoned = LabeledDataset(images, labels, train_ds.num_classes, f"{train_ds.name}-poison", ids=train_ds.ids[picked])
    result = train_ds.concat(poisoned, name=f"{train_ds.name}-badnet")

    if cfg.decoy_parts:
        result = result.concat(_decoys(train_ds, spec, picked, rng), name=result.name)
    logger.info(f"Poisoned training set: {n} clean + {count} poisoned items ({len(spec.triggers)} trigger(s))")
    return result


def _decoys(train_ds: LabeledDataset, spec: PoisonSpec, picked: np.ndarray, rng) -> LabeledDataset:
    decoys = []
    for trig in spec.triggers:
        for part in trig.parts:
            images = np.stack([apply_trigger(train_ds.images[i], part, rng) for i in picked])
            decoys.append(LabeledDataset(images, train_ds.labels[picked], train_ds.num_classes, "decoy", ids=train_ds.ids[picked]))
    out = LabeledDataset.empty_like(train_ds, name="decoy")
    for d in decoys:
        out = out.concat(d)
    logger.info(f"Added {len(out)} single-part decoys with clean labels")
    return out


def _poison_clean_label(train_ds: LabeledDataset, spec: PoisonSpec, cfg: AttackTrainConfig, rng) -> LabeledDataset:
    target = spec.target_map.target
    positions = np.flatnonzero(train_ds.labels == target)
    count = int(np.floor(cfg.poison_fraction * len(positions) + 1e-9))
    images = train_ds.images.copy()
    for i in np.sort(rng.choice(positions, size=count, replace=False)) if count else []:
        images[i] = apply_trigger(images[i], spec.triggers[0], rng)
    logger.info(f"Clean-label poisoning: {count} of {len(positions)} target-class items triggered in place")
    return LabeledDataset(images, train_ds.labels, train_ds.num_classes, f"{train_ds.name}-cla", ids=train_ds.ids)


def _train_on(arch_id: str, ds: LabeledDataset, cfg: AttackTrainConfig, role: str, tag: str, extra_hash: Optional[dict] = None) -> ModelCheckpoint:
    arch = architecture(arch_id, ds.image_shape, ds.num_classes)
    train_cfg = cfg.train_config()
    model = build_model(arch, cfg.seed, train_cfg.preprocessing)
    ckpt = train(model, ds, train_cfg, role=role, tag=tag)
    body = {"attack": cfg.to_dict(), "train": train_cfg.to_dict(), **(extra_hash or {})}
    ckpt = ckpt.with_meta(config_hash=stable_hash(body))
    logger.info(f"{tag}: checkpoint {ckpt.id}, final loss {ckpt.meta.train_losses[-1] if ckpt.meta.train_losses else float('nan'):.4f}")
    return ckpt


def train_badnet(arch_id: str, poisoned: LabeledDataset, cfg: AttackTrainConfig) -> ModelCheckpoint:
    return _train_on(arch_id, poisoned, cfg, role="badnet", tag="badnet")


def train_clean(arch_id: str, train_ds: LabeledDataset, cfg: AttackTrainConfig) -> ModelCheckpoint:
    """Эталонная чистая сеть той же архитектуры и рецепта."""
    return _train_on(arch_id, train_ds, cfg, role="clean", tag="clean")


def train_adaptive_badnet(arch_id: str, train_ds: LabeledDataset, spec: PoisonSpec, cfg: AttackTrainConfig, noise) -> ModelCheckpoint:
    """Атакующий сам добавляет шумовую аугментацию защиты к отравленной выборке."""
    from inoculab.predeploy import augment_noise

    rng = np.random.default_rng(cfg.seed)
    poisoned = poison_training_set(train_ds, spec, cfg, rng)
    if noise.gamma > 0:
        noisy = augment_noise(poisoned, noise, rng)
        poisoned = poisoned.concat(noisy, name=f"{poisoned.name}-adaptive")
    extra = {"noise": noise.to_dict()} if noise.gamma > 0 else None
    return _train_on(arch_id, poisoned, cfg, role="badnet", tag="adaptive-badnet", extra_hash=extra)
