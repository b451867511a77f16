"""Защита до развертывания: шумовая аугментация, сетка (alpha, gamma) и выбор GoodNet."""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pandas as pd

from inoculab.data import LabeledDataset
from inoculab.errors import SelectionError, TrainingError
from inoculab.nncore import ModelCheckpoint, TrainConfig, checkpoint_from_model, fit_arrays, predict_labels, stable_hash

logger = logging.getLogger(__name__)

DEFAULT_GAMMAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
DEFAULT_MULTIPLES = (1, 2, 3, 4, 5, 6)


@dataclass(frozen=True)
class NoiseSpec:
    gamma: float
    mean: float = 128.0
    variance: float = 51.2

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise TrainingError(f"noise fraction gamma must be in [0, 1], got {self.gamma}")
        if self.variance < 0:
            raise TrainingError(f"noise variance must be non-negative, got {self.variance}")

    def to_dict(self) -> dict:
        return asdict(self)


def augment_noise_with_masks(ds: LabeledDataset, spec: NoiseSpec, rng: np.random.Generator):
    """A(D, eta, gamma) вместе с масками выбранных позиций (N, H, W)."""
    n, height, width, channels = ds.images.shape
    masks = np.zeros((n, height, width), dtype=bool)
    k = int(math.floor(spec.gamma * height * width + 1e-9))
    if k == 0:
        return LabeledDataset(ds.images.copy(), ds.labels.copy(), ds.num_classes, f"{ds.name}-noisy", ids=ds.ids), masks

    images = ds.images.copy()
    std = math.sqrt(spec.variance)
    for i in range(n):
        positions = rng.choice(height * width, size=k, replace=False)
        rows, cols = np.divmod(positions, width)
        values = np.clip(rng.normal(spec.mean, std, size=(k, channels)), 0, 255)
        if np.issubdtype(images.dtype, np.integer):
            values = np.rint(values)
        images[i, rows, cols, :] = values.astype(images.dtype)
        masks[i, rows, cols] = True
    return LabeledDataset(images, ds.labels.copy(), ds.num_classes, f"{ds.name}-noisy", ids=ds.ids), masks


def augment_noise(ds: LabeledDataset, spec: NoiseSpec, rng: np.random.Generator) -> LabeledDataset:
    return augment_noise_with_masks(ds, spec, rng)[0]


@dataclass(frozen=True)
class GridSearchConfig:
    alphas: tuple = ()
    multiples: tuple = DEFAULT_MULTIPLES
    gammas: tuple = DEFAULT_GAMMAS
    theta_drop: float = 3.0
    epochs: int = 10
    batch_size: int = 32
    optimizer_id: str = "adam"
    holdout_fraction: float = 0.2
    use_noise_augmentation: bool = True
    use_adaptive_lr: bool = True
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.gammas or list(self.gammas) != sorted(self.gammas):
            raise SelectionError(f"gamma list must be nonempty and ascending: {self.gammas}")
        if self.alphas and list(self.alphas) != sorted(self.alphas):
            raise SelectionError(f"alpha list must be ascending: {self.alphas}")
        if not self.alphas and not self.multiples:
            raise SelectionError("grid needs explicit alphas or alpha multiples")
        if self.theta_drop < 0:
            raise SelectionError(f"theta_drop must be non-negative, got {self.theta_drop}")
        if not 0 < self.holdout_fraction < 1:
            raise SelectionError(f"holdout fraction must be in (0, 1), got {self.holdout_fraction}")

    def alpha_list(self, alpha0: float) -> tuple:
        if not self.use_adaptive_lr:
            return (alpha0,)
        if self.alphas:
            return tuple(self.alphas)
        return tuple(alpha0 * m for m in sorted(self.multiples))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GridCellResult:
    alpha: float
    gamma: float
    valid_ca: float
    checkpoint: Optional[ModelCheckpoint] = None
    asr: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "gamma": self.gamma,
            "valid_ca": self.valid_ca,
            "asr": self.asr,
            "checkpoint_id": self.checkpoint.id if self.checkpoint is not None else None,
        }


def holdout_split(valid: LabeledDataset, fraction: float, seed: int):
    """Стратифицированное деление валидации на часть для дообучения и контрольную."""
    rng = np.random.default_rng(seed)
    fit_idx, hold_idx = [], []
    for c in range(valid.num_classes):
        positions = rng.permutation(np.flatnonzero(valid.labels == c))
        cut = int(round(fraction * len(positions)))
        hold_idx.append(positions[:cut])
        fit_idx.append(positions[cut:])
    fit_idx = np.sort(np.concatenate(fit_idx)) if fit_idx else np.array([], dtype=np.int64)
    hold_idx = np.sort(np.concatenate(hold_idx)) if hold_idx else np.array([], dtype=np.int64)
    return valid.subset(fit_idx, name=f"{valid.name}-fit"), valid.subset(hold_idx, name=f"{valid.name}-holdout")


def accuracy(subject, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise SelectionError(f"cannot measure accuracy on empty set '{ds.name}'")
    return 100.0 * float(np.mean(predict_labels(subject, ds.images) == ds.labels))


def cell_training_set(fit: LabeledDataset, noise: NoiseSpec, use_noise_augmentation: bool, rng) -> LabeledDataset:
    if not use_noise_augmentation:
        return fit
    # Шумные копии сохраняют чистые метки
    return fit.concat(augment_noise(fit, noise, rng), name=f"{fit.name}-augmented")


def retrain_cell(bd: ModelCheckpoint, fit: LabeledDataset, holdout: LabeledDataset, noise: NoiseSpec, alpha: float,
                 epochs: int, cfg: GridSearchConfig = GridSearchConfig(), seed: int = 0,
                 evaluator: Optional[Callable] = None) -> GridCellResult:
    tag = f"alpha={alpha:g}, gamma={noise.gamma:g}"
    rng = np.random.default_rng(seed)
    train_ds = cell_training_set(fit, noise, cfg.use_noise_augmentation, rng)
    train_cfg = TrainConfig(
        epochs=epochs,
        batch_size=cfg.batch_size,
        learning_rate=alpha,
        optimizer_id=cfg.optimizer_id,
        preprocessing_id=bd.meta.preprocessing["kind"],
        norm_mean=tuple(bd.meta.preprocessing.get("mean", ())),
        norm_std=tuple(bd.meta.preprocessing.get("std", ())),
        seed=seed,
    )
    model = bd.fresh_model()
    losses = fit_arrays(model, train_ds.images, train_ds.labels, train_cfg, tag=tag)
    config_hash = stable_hash({"cell": train_cfg.to_dict(), "noise": noise.to_dict(), "grid": cfg.to_dict()})
    ckpt = checkpoint_from_model(model, role=bd.meta.role, seed=seed, config_hash=config_hash, parent=bd.id,
                                 losses=losses, extra={"alpha": alpha, "gamma": noise.gamma})
    valid_ca = accuracy(ckpt, holdout)
    asr = evaluator(ckpt) if evaluator is not None else None
    logger.info(f"Grid cell {tag}: valid CA {valid_ca:.2f}" + (f", ASR {asr:.2f}" if asr is not None else ""))
    return GridCellResult(alpha=alpha, gamma=noise.gamma, valid_ca=valid_ca, checkpoint=ckpt, asr=asr)


def run_grid(bd: ModelCheckpoint, valid: LabeledDataset, cfg: GridSearchConfig, alpha0: float,
             evaluator: Optional[Callable] = None):
    """Переобучает все клетки сетки; возвращает (клетки, базовая CA на контрольной части)."""
    fit, holdout = holdout_split(valid, cfg.holdout_fraction, cfg.seed)
    baseline_ca = accuracy(bd, holdout)
    logger.info(f"Grid baseline: BadNet CA {baseline_ca:.2f} on {len(holdout)} holdout images")
    jobs = [(alpha, gamma) for alpha in cfg.alpha_list(alpha0) for gamma in cfg.gammas]

    def job(index):
        alpha, gamma = jobs[index]
        return retrain_cell(bd, fit, holdout, NoiseSpec(gamma), alpha, cfg.epochs, cfg,
                            seed=cfg.seed + index, evaluator=evaluator)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            cells = list(pool.map(job, range(len(jobs))))
    else:
        cells = [job(i) for i in range(len(jobs))]
    return cells, baseline_ca


def select_goodnet(cells, baseline_ca: float, theta_drop: float) -> GridCellResult:
    """Три фильтра: падение CA не больше theta, затем max alpha, затем max gamma."""
    cells = list(cells)
    if not cells:
        raise SelectionError("grid is empty")
    qualifying = [c for c in cells if baseline_ca - c.valid_ca <= theta_drop + 1e-9]
    if not qualifying:
        best = max(c.valid_ca for c in cells)
        raise SelectionError(
            f"no grid cell stays within {theta_drop} points of baseline CA {baseline_ca:.2f} "
            f"(best {best:.2f}); increase theta_drop or extend the grid"
        )
    top_alpha = max(c.alpha for c in qualifying)
    at_alpha = [c for c in qualifying if c.alpha == top_alpha]
    top_gamma = max(c.gamma for c in at_alpha)
    chosen = max((c for c in at_alpha if c.gamma == top_gamma), key=lambda c: c.valid_ca)
    if chosen.checkpoint is not None:
        chosen = replace(chosen, checkpoint=chosen.checkpoint.with_meta(role="goodnet"))
    logger.info(f"Selected GoodNet: alpha={chosen.alpha:g}, gamma={chosen.gamma:g}, CA {chosen.valid_ca:.2f}")
    return chosen


def grid_matrix(cells, value: str = "valid_ca") -> pd.DataFrame:
    """Матрица: строки gamma, столбцы alpha."""
    frame = pd.DataFrame([{"gamma": c.gamma, "alpha": c.alpha, value: getattr(c, value)} for c in cells])
    if frame.empty:
        return frame
    return frame.pivot(index="gamma", columns="alpha", values=value).sort_index().sort_index(axis=1)


def write_grid_reports(cells, selected: GridCellResult, baseline_ca: float, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    grid_matrix(cells).to_csv(out_dir / "grid_ca.csv", float_format="%.2f")
    written.append(out_dir / "grid_ca.csv")
    if any(c.asr is not None for c in cells):
        grid_matrix(cells, "asr").to_csv(out_dir / "grid_asr.csv", float_format="%.2f")
        written.append(out_dir / "grid_asr.csv")
    selection = {"baseline_ca": baseline_ca, "selected": selected.to_dict(), "cells": [c.to_dict() for c in cells]}
    (out_dir / "selected.json").write_text(json.dumps(selection, indent=2, sort_keys=True))
    written.append(out_dir / "selected.json")
    return written
