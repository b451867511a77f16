"""Метрики безопасности (CA, ASR, эффективный ASR), перевод STRIP, Парето-фронт и отчеты."""
import json
import logging
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from inoculab.data import LabeledDataset
from inoculab.deploy import EnsembleState, ensemble_labels
from inoculab.errors import MetricError
from inoculab.nncore import Classifier, ModelCheckpoint, predict_labels
from inoculab.triggers import PoisonSpec, apply_trigger, poison, target_label

logger = logging.getLogger(__name__)

BASE_COLUMNS = ["stage", "subject", "dataset", "seed", "poison_ratio", "ca", "asr", "effective_asr"]


@dataclass
class MetricsRecord:
    subject: str
    ca: float
    asr: Union[float, list]
    effective_asr: Optional[float] = None
    poison_ratio: Optional[float] = None
    dataset: str = ""
    seed: int = 0
    stage: str = ""

    def __post_init__(self):
        for value in [self.ca] + self.asr_values + ([self.effective_asr] if self.effective_asr is not None else []):
            if not 0 <= value <= 100:
                raise MetricError(f"{self.subject}: percentage {value} outside [0, 100]")

    @property
    def asr_values(self) -> list:
        return list(self.asr) if isinstance(self.asr, (list, tuple)) else [self.asr]

    @property
    def asr_mean(self) -> float:
        return float(np.mean(self.asr_values))

    def to_dict(self) -> dict:
        data = asdict(self)
        if isinstance(self.asr, tuple):
            data["asr"] = list(self.asr)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsRecord":
        return cls(**data)


@dataclass(frozen=True)
class ParetoPoint:
    label: str
    ca: float
    asr: float


# Адаптеры субъектов: чекпоинт, модель, ансамбль или функция изображений -> метки

def served_labels(subject, images: np.ndarray) -> np.ndarray:
    if isinstance(subject, (ModelCheckpoint, Classifier)):
        return predict_labels(subject, images)
    if isinstance(subject, EnsembleState):
        bd, gd = subject.members()
        return ensemble_labels(bd, gd, images, subject.config.reject_mode)
    if isinstance(subject, tuple) and len(subject) == 2:
        return ensemble_labels(subject[0], subject[1], images)
    if callable(subject):
        return np.asarray(subject(images))
    raise MetricError(f"cannot evaluate subject of type {type(subject).__name__}")


def subject_id(subject) -> str:
    if isinstance(subject, ModelCheckpoint):
        return subject.id
    if isinstance(subject, EnsembleState):
        bd, gd = subject.members()
        return f"ensemble:{bd.id}+{gd.id}"
    if isinstance(subject, tuple) and len(subject) == 2:
        return f"ensemble:{subject[0].id}+{subject[1].id}"
    return getattr(subject, "__name__", type(subject).__name__)


def clean_accuracy(subject, test_clean: LabeledDataset) -> float:
    if len(test_clean) == 0:
        raise MetricError("clean accuracy needs a nonempty test set")
    return 100.0 * float(np.mean(served_labels(subject, test_clean.images) == test_clean.labels))


def _asr(subject, images, labels, targets) -> float:
    keep = labels != targets
    if not keep.any():
        raise MetricError("every test image already carries the target label; ASR undefined")
    dropped = int((~keep).sum())
    if dropped:
        logger.debug(f"ASR: excluded {dropped} images whose clean label is the target")
    return 100.0 * float(np.mean(served_labels(subject, images[keep]) == targets[keep]))


def attack_success_rate(subject, test_clean: LabeledDataset, spec: PoisonSpec, per_trigger: bool = False,
                        seed: int = 0) -> Union[float, list]:
    if len(test_clean) == 0:
        raise MetricError("attack success rate needs a nonempty test set")
    rng = np.random.default_rng(seed)
    labels = test_clean.labels
    if per_trigger:
        rates = []
        for i, trig in enumerate(spec.triggers):
            images = np.stack([apply_trigger(img, trig, rng) for img in test_clean.images])
            targets = np.array([target_label(int(y), spec.target_map, i) for y in labels])
            rates.append(_asr(subject, images, labels, targets))
        return rates
    poisoned = [poison(img, spec, rng) for img in test_clean.images]
    images = np.stack([p[0] for p in poisoned])
    targets = np.array([target_label(int(y), spec.target_map, p[1]) for y, p in zip(labels, poisoned)])
    return _asr(subject, images, labels, targets)


def effective_asr(asr: float, poison_ratio: float) -> float:
    if not 0 <= asr <= 100 or not 0 <= poison_ratio <= 1:
        raise MetricError(f"effective ASR inputs out of range: asr={asr}, ratio={poison_ratio}")
    return asr * poison_ratio


def strip_translate(asr_base: float, ca_base: float, far: float, frr: float) -> tuple:
    """ASR и CA защищенной STRIP системы по ее FAR/FRR (все в процентах)."""
    for name, value in (("asr", asr_base), ("ca", ca_base), ("far", far), ("frr", frr)):
        if not 0 <= value <= 100:
            raise MetricError(f"{name}={value} outside [0, 100]")
    return asr_base * far / 100.0, ca_base * (100.0 - frr) / 100.0


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    return a.ca >= b.ca and a.asr <= b.asr and (a.ca > b.ca or a.asr < b.asr)


def pareto_front(points: Sequence[ParetoPoint]) -> list:
    """Точки, не доминируемые ни одной другой (CA максимизируется, ASR минимизируется)."""
    points = list(points)
    if not points:
        raise MetricError("pareto front of an empty point set")
    front = [p for p in points if not any(dominates(q, p) for q in points)]
    logger.debug(f"Pareto front holds {len(front)} of {len(points)} points")
    return front


def evaluate(subject, test: LabeledDataset, spec: PoisonSpec, stage: str, poison_ratio: Optional[float] = None,
             per_trigger: bool = False, seed: int = 0) -> MetricsRecord:
    ca = clean_accuracy(subject, test)
    asr = attack_success_rate(subject, test, spec, per_trigger=per_trigger, seed=seed)
    record = MetricsRecord(subject=subject_id(subject), ca=ca, asr=asr, poison_ratio=poison_ratio,
                           dataset=test.name, seed=seed, stage=stage)
    if poison_ratio is not None:
        record.effective_asr = effective_asr(record.asr_mean, poison_ratio)
    logger.info(f"{stage}: CA {ca:.2f}, ASR {asr if isinstance(asr, list) else round(asr, 2)}")
    return record


def make_evaluator(test: LabeledDataset, spec: PoisonSpec, poison_ratio: Optional[float] = None,
                   per_trigger: bool = False, seed: int = 0, prefix: str = ""):
    """Оценщик пары (bd, gd) для истории раундов: bd отдельно, gd отдельно и ансамбль."""

    def evaluator(bd: ModelCheckpoint, gd: ModelCheckpoint) -> dict:
        return {
            "bd": evaluate(bd, test, spec, f"{prefix}bd", poison_ratio, per_trigger, seed),
            "gd": evaluate(gd, test, spec, f"{prefix}gd", poison_ratio, per_trigger, seed),
            "ensemble": evaluate((bd, gd), test, spec, f"{prefix}ensemble", poison_ratio, per_trigger, seed),
        }

    return evaluator


def strip_record(baseline: MetricsRecord, far: float, frr: float) -> MetricsRecord:
    asr, ca = strip_translate(baseline.asr_mean, baseline.ca, far, frr)
    return MetricsRecord(subject=f"strip:{baseline.subject}", ca=ca, asr=asr, poison_ratio=baseline.poison_ratio,
                         effective_asr=effective_asr(asr, baseline.poison_ratio) if baseline.poison_ratio is not None else None,
                         dataset=baseline.dataset, seed=baseline.seed, stage="STRIP")


def report_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    """Таблица отчета со стабильным порядком столбцов и флагом Парето."""
    if not records:
        return pd.DataFrame(columns=BASE_COLUMNS + ["pareto"])
    trigger_count = max(len(r.asr_values) if isinstance(r.asr, (list, tuple)) else 0 for r in records)
    rows = []
    for r in records:
        row = {
            "stage": r.stage,
            "subject": r.subject,
            "dataset": r.dataset,
            "seed": r.seed,
            "poison_ratio": r.poison_ratio,
            "ca": r.ca,
            "asr": r.asr_mean,
            "effective_asr": r.effective_asr,
        }
        for i in range(trigger_count):
            values = r.asr_values if isinstance(r.asr, (list, tuple)) else []
            row[f"asr_{i}"] = values[i] if i < len(values) else None
        rows.append(row)
    frame = pd.DataFrame(rows, columns=BASE_COLUMNS + [f"asr_{i}" for i in range(trigger_count)])
    points = [ParetoPoint(f"{r.stage}:{i}", r.ca, r.asr_mean) for i, r in enumerate(records)]
    front = {p.label for p in pareto_front(points)}
    frame["pareto"] = [p.label in front for p in points]
    return frame


def emit_report(records: Sequence[MetricsRecord], out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frame = report_frame(records)
    frame.to_csv(out_dir / "report.csv", index=False, float_format="%.2f")
    (out_dir / "report.json").write_text(json.dumps([r.to_dict() for r in records], indent=2))
    lines = [f"{row.stage}\t{row.subject}\tCA={row.ca:.2f}\tASR={row.asr:.2f}"
             for row in frame.itertuples() if row.pareto]
    (out_dir / "pareto.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    logger.info(f"Report with {len(records)} rows written to {out_dir}")
    return [out_dir / "report.csv", out_dir / "report.json", out_dir / "pareto.txt"]


def records_from_json(path) -> list:
    return [MetricsRecord.from_dict(item) for item in json.loads(Path(path).read_text())]
