"""Ансамбль BadNet + GoodNet, карантин разногласий и условие запуска ремонта."""
import json
import logging
import threading
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from PIL import Image

from inoculab.data import StreamItem
from inoculab.errors import ArchitectureError, DataError, PreconditionError, ShapeError
from inoculab.nncore import ModelCheckpoint, predict_labels

logger = logging.getLogger(__name__)

# Метка, которую отдает ансамбль в режиме отказа
REJECTED = -1


@dataclass(frozen=True)
class DeployConfig:
    repair_threshold: int = 200
    clean_sample_for_gan: int = 500
    poison_ratio: float = 0.2
    stream_length: Optional[int] = None
    exact_count: bool = False
    reject_mode: bool = False
    # cumulative: GAN видит весь карантин; window: только собранное после ремонта
    quarantine_policy: str = "cumulative"
    checkpoint_every: int = 0
    # Триггеры, которые атакующий использует в потоке; пустой кортеж означает все
    trigger_indices: tuple = ()
    batch_size: int = 256

    def __post_init__(self):
        if self.repair_threshold < 1:
            raise PreconditionError(f"repair threshold must be >= 1, got {self.repair_threshold}")
        if self.quarantine_policy not in ("cumulative", "window"):
            raise PreconditionError(f"unknown quarantine policy '{self.quarantine_policy}'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QuarantineEntry:
    image: np.ndarray
    bd_label: int
    gd_label: int
    stream_index: int


class QuarantineBuffer:
    """Упорядоченное хранилище входов, на которых bd и gd разошлись."""

    def __init__(self, entries: Sequence[QuarantineEntry] = (), repaired_upto: int = 0,
                 image_shape: Optional[tuple] = None):
        self._entries = list(entries)
        if image_shape is None and self._entries:
            image_shape = np.asarray(self._entries[0].image).shape
        # Форма (H, W, C) нужна и пустому буферу
        self.image_shape = tuple(image_shape) if image_shape is not None else None
        # Сколько записей уже ушло в ремонт
        self.repaired_upto = repaired_upto

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple:
        return tuple(self._entries)

    def append(self, entry: QuarantineEntry) -> None:
        if entry.bd_label == entry.gd_label:
            raise PreconditionError(f"stream item {entry.stream_index}: bd and gd agree, nothing to quarantine")
        shape = np.asarray(entry.image).shape
        if self.image_shape is None:
            self.image_shape = shape
        elif shape != self.image_shape:
            raise ShapeError(f"stream item {entry.stream_index}: image {shape} does not match quarantine {self.image_shape}")
        self._entries.append(entry)

    def since_repair(self) -> int:
        return len(self._entries) - self.repaired_upto

    def snapshot(self, policy: str = "cumulative") -> "QuarantineBuffer":
        entries = self._entries if policy == "cumulative" else self._entries[self.repaired_upto:]
        return QuarantineBuffer(list(entries), repaired_upto=len(entries), image_shape=self.image_shape)

    def mark_repaired(self, upto: int, policy: str = "cumulative") -> None:
        if policy == "window":
            del self._entries[:upto]
            self.repaired_upto = 0
        else:
            self.repaired_upto = max(self.repaired_upto, upto)

    def images(self) -> np.ndarray:
        if not self._entries:
            if self.image_shape is None:
                raise PreconditionError("empty quarantine has no known image shape")
            return np.empty((0, *self.image_shape), dtype=np.uint8)
        return np.stack([e.image for e in self._entries])

    def stream_indices(self) -> list:
        return [e.stream_index for e in self._entries]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = []
        for i, entry in enumerate(self._entries):
            name = f"q-{i:06d}.png"
            _save_png(entry.image, directory / name)
            index.append({"file": name, "stream_index": entry.stream_index,
                          "bd_label": entry.bd_label, "gd_label": entry.gd_label})
        for stale in directory.glob("q-*.png"):
            if int(stale.stem[2:]) >= len(self._entries):
                stale.unlink()
        manifest = {"version": 1, "repaired_upto": self.repaired_upto, "items": index,
                    "image_shape": list(self.image_shape) if self.image_shape is not None else None}
        tmp = directory / "index.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2))
        tmp.replace(directory / "index.json")
        return directory

    @classmethod
    def load(cls, directory) -> "QuarantineBuffer":
        directory = Path(directory)
        index_path = directory / "index.json"
        if not index_path.exists():
            return cls()
        try:
            manifest = json.loads(index_path.read_text())
            entries = [
                QuarantineEntry(
                    image=_load_png(directory / item["file"]),
                    bd_label=int(item["bd_label"]),
                    gd_label=int(item["gd_label"]),
                    stream_index=int(item["stream_index"]),
                )
                for item in manifest["items"]
            ]
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"corrupt quarantine directory: {e}", path=directory) from e
        return cls(entries, repaired_upto=int(manifest.get("repaired_upto", 0)), image_shape=manifest.get("image_shape"))


def _save_png(image: np.ndarray, path: Path) -> None:
    array = np.asarray(image, dtype=np.uint8)
    if array.shape[-1] == 1:
        Image.fromarray(array[..., 0]).save(path)
    else:
        Image.fromarray(array).save(path)


def _load_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        array = np.asarray(img, dtype=np.uint8)
    return array[..., None] if array.ndim == 2 else array


class EnsembleState:
    def __init__(self, bd: ModelCheckpoint, gd: ModelCheckpoint, config: DeployConfig = DeployConfig(),
                 quarantine: Optional[QuarantineBuffer] = None):
        self._check_pair(bd, gd)
        self.bd = bd
        self.gd = gd
        self.config = config
        self.quarantine = quarantine if quarantine is not None else QuarantineBuffer()
        if self.quarantine.image_shape is None:
            self.quarantine.image_shape = tuple(bd.arch.input_shape)
        self._lock = threading.Lock()

    @staticmethod
    def _check_pair(bd: ModelCheckpoint, gd: ModelCheckpoint) -> None:
        if bd.arch != gd.arch:
            raise ArchitectureError(
                f"ensemble members differ: {bd.arch.arch_id} {bd.arch.input_shape} K={bd.num_classes} "
                f"vs {gd.arch.arch_id} {gd.arch.input_shape} K={gd.num_classes}"
            )

    def members(self) -> tuple:
        with self._lock:
            return self.bd, self.gd

    def swap(self, bd: ModelCheckpoint, gd: ModelCheckpoint) -> None:
        """Атомарная замена пары между элементами потока."""
        self._check_pair(bd, gd)
        with self._lock:
            self.bd, self.gd = bd, gd
        logger.info(f"Ensemble swapped to bd={bd.id}, gd={gd.id}")


def _serve(state: EnsembleState, bd_label: int, gd_label: int) -> int:
    if bd_label == gd_label:
        return bd_label
    return REJECTED if state.config.reject_mode else gd_label


def ensemble_predict(state: EnsembleState, x: np.ndarray, stream_index: int = 0) -> tuple:
    bd, gd = state.members()
    batch = np.asarray(x)[None]
    bd_label = int(predict_labels(bd, batch)[0])
    gd_label = int(predict_labels(gd, batch)[0])
    quarantined = bd_label != gd_label
    if quarantined:
        state.quarantine.append(QuarantineEntry(np.asarray(x).copy(), bd_label, gd_label, stream_index))
    return _serve(state, bd_label, gd_label), quarantined


def ensemble_labels(bd: ModelCheckpoint, gd: ModelCheckpoint, images: np.ndarray, reject_mode: bool = False) -> np.ndarray:
    """Выданные ансамблем метки без записи в карантин (для оценки)."""
    bd_labels = predict_labels(bd, images)
    gd_labels = predict_labels(gd, images)
    served = np.where(bd_labels == gd_labels, bd_labels, gd_labels)
    if reject_mode:
        served = np.where(bd_labels == gd_labels, served, REJECTED)
    return served


def should_trigger_repair(state: EnsembleState) -> bool:
    return state.quarantine.since_repair() >= state.config.repair_threshold


@dataclass
class StreamReport:
    processed: int = 0
    quarantined: int = 0
    quarantine_size: int = 0
    # Поля ниже используют скрытую истину и нужны только для оценки
    poisoned_seen: int = 0
    poisoned_quarantined: int = 0
    clean_quarantined: int = 0
    served_correct_clean: int = 0
    clean_seen: int = 0
    per_trigger_seen: dict = field(default_factory=dict)
    per_trigger_quarantined: dict = field(default_factory=dict)
    position: int = 0

    @property
    def precision(self) -> Optional[float]:
        return self.poisoned_quarantined / self.quarantined if self.quarantined else None

    @property
    def recall(self) -> Optional[float]:
        return self.poisoned_quarantined / self.poisoned_seen if self.poisoned_seen else None

    @property
    def quarantine_rate(self) -> float:
        return 100.0 * self.quarantined / self.processed if self.processed else 0.0

    def per_trigger_recall(self) -> dict:
        return {k: self.per_trigger_quarantined.get(k, 0) / v for k, v in self.per_trigger_seen.items() if v}

    def to_dict(self) -> dict:
        data = asdict(self)
        data["precision"] = self.precision
        data["recall"] = self.recall
        data["quarantine_rate"] = self.quarantine_rate
        data["per_trigger_recall"] = self.per_trigger_recall()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "StreamReport":
        keys = {f for f in cls.__dataclass_fields__}
        report = cls(**{k: v for k, v in data.items() if k in keys})
        report.per_trigger_seen = {int(k): v for k, v in report.per_trigger_seen.items()}
        report.per_trigger_quarantined = {int(k): v for k, v in report.per_trigger_quarantined.items()}
        return report

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    def _audit(self, item: StreamItem, quarantined: bool, served: int) -> None:
        self.processed += 1
        if item.is_poisoned:
            self.poisoned_seen += 1
            t = item.trigger_index if item.trigger_index is not None else 0
            self.per_trigger_seen[t] = self.per_trigger_seen.get(t, 0) + 1
            if quarantined:
                self.poisoned_quarantined += 1
                self.per_trigger_quarantined[t] = self.per_trigger_quarantined.get(t, 0) + 1
        else:
            self.clean_seen += 1
            self.served_correct_clean += int(served == item.clean_label)
            if quarantined:
                self.clean_quarantined += 1
        if quarantined:
            self.quarantined += 1


def run_stream(state: EnsembleState, stream: Sequence[StreamItem], start: int = 0, stop: Optional[int] = None,
               report: Optional[StreamReport] = None, stop_on_repair: bool = False,
               on_checkpoint: Optional[Callable] = None):
    """Обрабатывает поток по порядку начиная с позиции start.

    Возвращает (выданные метки, состояние, отчет). С stop_on_repair обработка
    останавливается сразу после элемента, на котором срабатывает условие ремонта;
    stop ограничивает обработку позицией (не включительно).
    """
    report = report if report is not None else StreamReport(position=start)
    served_all = []
    position = start
    chunk = state.config.batch_size
    if state.config.checkpoint_every:
        chunk = min(chunk, state.config.checkpoint_every)

    end = len(stream) if stop is None else min(stop, len(stream))
    while position < end:
        items = stream[position:min(position + chunk, end)]
        images = np.stack([item.image for item in items])
        # Пара фиксируется на весь кусок; замена вступает в силу со следующего
        bd, gd = state.members()
        bd_labels = predict_labels(bd, images)
        gd_labels = predict_labels(gd, images)
        stopped = False
        for offset, item in enumerate(items):
            b, g = int(bd_labels[offset]), int(gd_labels[offset])
            quarantined = b != g
            if quarantined:
                state.quarantine.append(QuarantineEntry(np.asarray(item.image).copy(), b, g, position))
            served = _serve(state, b, g)
            served_all.append(served)
            report._audit(item, quarantined, served)
            position += 1
            if stop_on_repair and quarantined and should_trigger_repair(state):
                stopped = True
                break
        report.position = position
        report.quarantine_size = len(state.quarantine)
        if on_checkpoint is not None and state.config.checkpoint_every and not stopped:
            on_checkpoint(position, state, report)
        if stopped:
            logger.info(f"Repair condition reached at stream position {position} ({len(state.quarantine)} quarantined)")
            break

    logger.info(
        f"Stream processed up to {position}: {report.quarantined} quarantined, "
        f"precision {report.precision if report.precision is not None else float('nan'):.3f}"
    )
    return np.asarray(served_all, dtype=np.int64), state, report
