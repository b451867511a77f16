"""Загрузка датасетов, детерминированное разбиение и построение потока."""
import logging
import os
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from inoculab import settings
from inoculab.errors import DataError, SplitError
from inoculab.triggers import PoisonSpec, poison

logger = logging.getLogger(__name__)

DATASETS = ("mnist", "cifar10", "synthetic-fixture")
CACHE_VERSION = 1


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str
    # Идентичность элементов в исходном датасете
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"dataset '{self.name}' images must be (N, H, W, C), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataError(f"dataset '{self.name}' has {len(self.images)} images and {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"dataset '{self.name}' has labels outside [0, {self.num_classes})")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices, name: str = None) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            images=self.images[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
            name=name or self.name,
            ids=self.ids[indices],
        )

    def concat(self, other: "LabeledDataset", name: str = None) -> "LabeledDataset":
        if len(other) == 0:
            return replace(self, name=name or self.name)
        if len(self) == 0:
            return replace(other, name=name or other.name)
        if self.image_shape != other.image_shape:
            raise DataError(f"cannot concatenate {self.image_shape} and {other.image_shape} datasets")
        return LabeledDataset(
            images=np.concatenate([self.images, other.images]),
            labels=np.concatenate([self.labels, other.labels]),
            num_classes=self.num_classes,
            name=name or self.name,
            ids=np.concatenate([self.ids, other.ids]),
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    @classmethod
    def empty_like(cls, ds: "LabeledDataset", name: str = None) -> "LabeledDataset":
        return ds.subset(np.array([], dtype=np.int64), name=name)


@dataclass
class DatasetSplits:
    train: LabeledDataset
    valid: LabeledDataset
    stream_test: LabeledDataset
    per_class_counts: tuple
    stream_test_mode: str = "disjoint"

    @cached_property
    def _halves(self):
        if self.stream_test_mode == "shared":
            return self.stream_test, self.stream_test
        # Первая половина каждого класса идет в поток, вторая в тест
        labels = self.stream_test.labels
        stream_idx, test_idx = [], []
        for c in range(self.stream_test.num_classes):
            positions = np.flatnonzero(labels == c)
            half = (len(positions) + 1) // 2
            stream_idx.append(positions[:half])
            test_idx.append(positions[half:])
        stream_idx = np.sort(np.concatenate(stream_idx))
        test_idx = np.sort(np.concatenate(test_idx))
        return (
            self.stream_test.subset(stream_idx, name=f"{self.stream_test.name}-stream"),
            self.stream_test.subset(test_idx, name=f"{self.stream_test.name}-test"),
        )

    @property
    def stream(self) -> LabeledDataset:
        return self._halves[0]

    @property
    def test(self) -> LabeledDataset:
        return self._halves[1]


@dataclass
class StreamItem:
    image: np.ndarray
    # Истина для оценки; защита ее не видит
    is_poisoned: bool
    clean_label: int
    trigger_index: Optional[int] = None


def make_fixture(seed: int = 7, per_class: int = 200, size: int = 16) -> LabeledDataset:
    """Синтетический 2-классовый датасет: горизонтальная или вертикальная полоса на шуме."""
    rng = np.random.default_rng(seed)
    n = 2 * per_class
    images = np.clip(rng.normal(24.0, 8.0, size=(n, size, size, 1)), 0, 255)
    labels = np.repeat(np.arange(2), per_class)
    positions = rng.integers(3, size - 5, size=n)
    for i in range(n):
        p = positions[i]
        if labels[i] == 0:
            images[i, p:p + 2, 2:size - 2, 0] = 200.0
        else:
            images[i, 2:size - 2, p:p + 2, 0] = 200.0
    order = rng.permutation(n)
    return LabeledDataset(
        images=np.rint(images[order]).astype(np.uint8),
        labels=labels[order],
        num_classes=2,
        name="synthetic-fixture",
    )


def _fetch_torchvision(name: str, raw_dir: Path):
    from torchvision import datasets

    download = settings.ALLOW_DOWNLOAD
    try:
        if name == "mnist":
            parts = [datasets.MNIST(root=str(raw_dir), train=flag, download=download) for flag in (True, False)]
            images = np.concatenate([p.data.numpy() for p in parts])[..., None]
            labels = np.concatenate([p.targets.numpy() for p in parts])
        else:
            parts = [datasets.CIFAR10(root=str(raw_dir), train=flag, download=download) for flag in (True, False)]
            images = np.concatenate([p.data for p in parts])
            labels = np.concatenate([np.asarray(p.targets) for p in parts])
    except (RuntimeError, OSError) as e:
        raise DataError(f"cannot read {name} source files: {e}", path=raw_dir) from e
    return images.astype(np.uint8), labels.astype(np.int64)


def _read_cache(path: Path, name: str) -> LabeledDataset:
    try:
        with np.load(path, allow_pickle=False) as blob:
            version = int(blob["format_version"])
            if version != CACHE_VERSION:
                raise DataError(f"cache version {version} != {CACHE_VERSION}", path=path)
            return LabeledDataset(
                images=blob["images"],
                labels=blob["labels"],
                num_classes=int(blob["num_classes"]),
                name=name,
            )
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"corrupt dataset cache: {e}", path=path) from e


def _write_cache(path: Path, ds: LabeledDataset) -> None:
    # Запись во временный файл и атомарная замена: читатели не видят частичный файл
    tmp = path.with_name(f"{path.name}.{os.getpid()}.tmp")
    with open(tmp, "wb") as f:
        np.savez(
            f,
            format_version=np.int64(CACHE_VERSION),
            images=ds.images,
            labels=ds.labels,
            num_classes=np.int64(ds.num_classes),
        )
    os.replace(tmp, path)


def load_dataset(name: str, root=None, seed: int = 7) -> LabeledDataset:
    if name not in DATASETS:
        raise DataError(f"unknown dataset '{name}', expected one of {DATASETS}")
    if name == "synthetic-fixture":
        return make_fixture(seed=seed)

    root = Path(root) if root is not None else settings.DATA_ROOT
    base = root / name
    cache = base / "canonical.bin"
    if cache.exists():
        logger.info(f"Loading {name} from cache {cache}")
        return _read_cache(cache, name)

    base.mkdir(parents=True, exist_ok=True)
    logger.info(f"Ingesting {name} into {base}")
    images, labels = _fetch_torchvision(name, base / "raw")
    ds = LabeledDataset(images=images, labels=labels, num_classes=10, name=name)
    _write_cache(cache, ds)
    logger.info(f"Cached {len(ds)} {name} items at {cache}")
    return ds


def split_dataset(ds: LabeledDataset, counts: Sequence[int], seed: int, stream_test_mode: str = "disjoint") -> DatasetSplits:
    if len(counts) != 3 or any(c < 0 for c in counts):
        raise SplitError(f"counts must be three non-negative integers, got {counts}")
    if stream_test_mode not in ("disjoint", "shared"):
        raise SplitError(f"unknown stream/test mode '{stream_test_mode}'")
    rng = np.random.default_rng(seed)
    n_train, n_valid, n_stream = counts
    need = n_train + n_valid + n_stream
    buckets = ([], [], [])
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if len(idx) < need:
            raise SplitError(f"class {c} has {len(idx)} samples, {need} required", label=c)
        perm = rng.permutation(idx)
        buckets[0].append(perm[:n_train])
        buckets[1].append(perm[n_train:n_train + n_valid])
        buckets[2].append(perm[n_train + n_valid:need])

    parts = []
    for suffix, bucket in zip(("train", "valid", "stream_test"), buckets):
        idx = np.concatenate(bucket) if bucket else np.array([], dtype=np.int64)
        parts.append(ds.subset(rng.permutation(idx), name=f"{ds.name}-{suffix}"))
    logger.info(f"Split {ds.name}: train {len(parts[0])}, valid {len(parts[1])}, stream+test {len(parts[2])}")
    return DatasetSplits(*parts, per_class_counts=tuple(counts), stream_test_mode=stream_test_mode)


def subsample_validation(splits: DatasetSplits, fraction: float, seed: int) -> DatasetSplits:
    if not 0 < fraction <= 1:
        raise SplitError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    valid = splits.valid
    keep = []
    for c in range(valid.num_classes):
        positions = np.flatnonzero(valid.labels == c)
        if len(positions) == 0:
            continue
        k = int(np.floor(fraction * len(positions) + 1e-9))
        if k < 1:
            raise SplitError(f"fraction {fraction} leaves class {c} without validation samples", label=c)
        keep.append(np.sort(rng.choice(positions, size=k, replace=False)))
    keep = np.sort(np.concatenate(keep)) if keep else np.array([], dtype=np.int64)
    per_class = splits.per_class_counts
    new_counts = (per_class[0], int(np.floor(fraction * per_class[1] + 1e-9)), per_class[2])
    return DatasetSplits(
        train=splits.train,
        valid=valid.subset(keep),
        stream_test=splits.stream_test,
        per_class_counts=new_counts,
        stream_test_mode=splits.stream_test_mode,
    )


def build_stream(test: LabeledDataset, spec: PoisonSpec, poison_ratio: float, seed: int, exact_count: bool = False) -> list:
    if not 0 <= poison_ratio <= 1:
        raise DataError(f"poison ratio must be in [0, 1], got {poison_ratio}")
    rng = np.random.default_rng(seed)
    n = len(test)
    if exact_count:
        poisoned = np.zeros(n, dtype=bool)
        poisoned[rng.choice(n, size=int(round(poison_ratio * n)), replace=False)] = True
    else:
        poisoned = rng.random(n) < poison_ratio

    items = []
    for i in range(n):
        label = int(test.labels[i])
        if poisoned[i]:
            image, trigger_index = poison(test.images[i], spec, rng)
            items.append(StreamItem(image=image, is_poisoned=True, clean_label=label, trigger_index=trigger_index))
        else:
            items.append(StreamItem(image=test.images[i], is_poisoned=False, clean_label=label))
    order = rng.permutation(n)
    logger.info(f"Built stream of {n} items, {int(poisoned.sum())} poisoned (ratio {poison_ratio})")
    return [items[i] for i in order]


def resample(ds: LabeledDataset, length: int, seed: int) -> LabeledDataset:
    """Выборка заданной длины из пула; с возвращением, если пула не хватает."""
    rng = np.random.default_rng(seed)
    replace_needed = length > len(ds)
    idx = rng.choice(len(ds), size=length, replace=replace_needed)
    return ds.subset(idx)
