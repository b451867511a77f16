"""Компактные классификаторы, общий цикл обучения, предсказание и чекпоинты."""
import hashlib
import io
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field, asdict, replace
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from inoculab import settings
from inoculab.errors import ArchitectureError, CheckpointError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ROLES = ("badnet", "goodnet", "repaired-badnet", "repaired-goodnet", "clean", "poison-generator")
OPTIMIZERS = ("adam", "adadelta", "sgd")
PREPROCESSING = ("scale-1/255", "standardize", "identity")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "relu"
    batch_norm: bool = False


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: str
    input_shape: tuple
    num_classes: int
    layers: tuple

    def __post_init__(self):
        self.output_shapes()

    def output_shapes(self) -> list:
        """Проверяет, что слои стыкуются; возвращает форму после каждого слоя."""
        height, width, channels = self.input_shape
        flat = None
        shapes = []
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if flat is not None:
                    raise ArchitectureError(f"{self.arch_id}: conv layer {i} after dense layer")
                height = (height + 2 * layer.padding - layer.kernel) // layer.stride + 1
                width = (width + 2 * layer.padding - layer.kernel) // layer.stride + 1
                channels = layer.channels
                shapes.append((height, width, channels))
            elif layer.kind == "pool":
                if flat is not None:
                    raise ArchitectureError(f"{self.arch_id}: pool layer {i} after dense layer")
                height //= layer.kernel
                width //= layer.kernel
                shapes.append((height, width, channels))
            elif layer.kind == "dense":
                flat = layer.channels
                shapes.append((flat,))
            else:
                raise ArchitectureError(f"{self.arch_id}: unknown layer kind '{layer.kind}'")
            if height <= 0 or width <= 0:
                raise ArchitectureError(f"{self.arch_id}: layer {i} ({layer.kind}) reduces {self.input_shape} to nothing")
        if not self.layers or self.layers[-1].kind != "dense" or self.layers[-1].channels != self.num_classes:
            raise ArchitectureError(f"{self.arch_id}: final layer must be dense with {self.num_classes} units")
        return shapes

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArchitectureSpec":
        return cls(
            arch_id=data["arch_id"],
            input_shape=tuple(data["input_shape"]),
            num_classes=int(data["num_classes"]),
            layers=tuple(LayerSpec(**layer) for layer in data["layers"]),
        )


def _conv(channels, kernel, padding=0, batch_norm=False):
    return LayerSpec("conv", channels=channels, kernel=kernel, padding=padding, batch_norm=batch_norm)


def _pool(kernel=2):
    return LayerSpec("pool", kernel=kernel, stride=kernel, activation="none")


def _dense(units, activation="relu"):
    return LayerSpec("dense", channels=units, activation=activation)


def _mnist_cnn(k):
    return (_conv(32, 5), _pool(), _conv(64, 5), _pool(), _dense(512), _dense(k, "softmax"))


def _cla_cnn(k):
    return (_conv(16, 5), _pool(), _conv(4, 5), _pool(), _dense(512), _dense(k, "softmax"))


def _cifar_cnn(k):
    return (
        _conv(32, 3, 1, True), _conv(32, 3, 1, True), _pool(),
        _conv(64, 3, 1, True), _conv(64, 3, 1, True), _pool(),
        _conv(128, 3, 1, True), _pool(),
        _dense(256), _dense(k, "softmax"),
    )


ARCHITECTURES = {
    "mnist-cnn": _mnist_cnn,
    "cla-cnn": _cla_cnn,
    "cifar-cnn": _cifar_cnn,
}


def architecture(arch_id: str, input_shape, num_classes: int) -> ArchitectureSpec:
    if arch_id not in ARCHITECTURES:
        raise ArchitectureError(f"unknown architecture '{arch_id}', expected one of {sorted(ARCHITECTURES)}")
    return ArchitectureSpec(arch_id, tuple(input_shape), num_classes, ARCHITECTURES[arch_id](num_classes))


@dataclass(frozen=True)
class Preprocessing:
    kind: str = "scale-1/255"
    mean: tuple = ()
    std: tuple = ()

    def __post_init__(self):
        if self.kind not in PREPROCESSING:
            raise ArchitectureError(f"unknown preprocessing '{self.kind}'")
        if self.kind == "standardize" and (not self.mean or len(self.mean) != len(self.std)):
            raise ArchitectureError("standardize preprocessing needs per-channel mean and std")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, data: dict) -> "Preprocessing":
        return cls(data["kind"], tuple(data.get("mean", ())), tuple(data.get("std", ())))


class Classifier(nn.Module):
    """Принимает float-тензор (N, H, W, C) в [0, 255], возвращает логиты."""

    def __init__(self, arch: ArchitectureSpec, preprocessing: Preprocessing = Preprocessing()):
        super().__init__()
        self.arch = arch
        channels = arch.input_shape[2]
        features, head = [], []
        flat_in = None
        shapes = arch.output_shapes()
        for i, layer in enumerate(arch.layers):
            if layer.kind == "conv":
                features.append(nn.Conv2d(channels, layer.channels, layer.kernel, stride=layer.stride, padding=layer.padding))
                if layer.batch_norm:
                    features.append(nn.BatchNorm2d(layer.channels))
                features.append(nn.ReLU())
                channels = layer.channels
            elif layer.kind == "pool":
                features.append(nn.MaxPool2d(layer.kernel, stride=layer.stride))
            else:
                if flat_in is None:
                    h, w, c = shapes[i - 1] if i > 0 else arch.input_shape
                    flat_in = h * w * c
                head.append(nn.Linear(flat_in, layer.channels))
                if layer.activation == "relu":
                    head.append(nn.ReLU())
                flat_in = layer.channels
        self.features = nn.Sequential(*features)
        self.head = nn.Sequential(*head)
        self.register_buffer("norm_mean", torch.zeros(channels_in(arch)))
        self.register_buffer("norm_std", torch.ones(channels_in(arch)))
        self.preprocessing = preprocessing
        self.set_preprocessing(preprocessing)

    def set_preprocessing(self, preprocessing: Preprocessing) -> None:
        self.preprocessing = preprocessing
        if preprocessing.kind == "standardize":
            self.norm_mean.copy_(torch.tensor(preprocessing.mean, dtype=self.norm_mean.dtype))
            self.norm_std.copy_(torch.tensor(preprocessing.std, dtype=self.norm_std.dtype))
        else:
            self.norm_mean.zero_()
            self.norm_std.fill_(1.0)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if self.preprocessing.kind == "identity":
            return x
        x = x / 255.0
        if self.preprocessing.kind == "standardize":
            x = (x - self.norm_mean) / self.norm_std
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.preprocess(x).permute(0, 3, 1, 2)
        x = self.features(x)
        return self.head(torch.flatten(x, 1))


def channels_in(arch: ArchitectureSpec) -> int:
    return arch.input_shape[2]


def build_model(arch: ArchitectureSpec, seed: int, preprocessing: Preprocessing = Preprocessing()) -> Classifier:
    # Отдельный генератор, чтобы инициализация не зависела от глобального состояния
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = Classifier(arch, preprocessing)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    # ((до эпохи включительно, lr), ...); после последней границы действует learning_rate
    lr_schedule: tuple = ()
    optimizer_id: str = "adam"
    preprocessing_id: str = "scale-1/255"
    norm_mean: tuple = ()
    norm_std: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or any(lr <= 0 for _, lr in self.lr_schedule):
            raise TrainingError(f"learning rates must be positive: {self.learning_rate}, {self.lr_schedule}")
        bounds = [b for b, _ in self.lr_schedule]
        if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
            raise TrainingError(f"lr schedule breakpoints must increase: {bounds}")
        if self.optimizer_id not in OPTIMIZERS:
            raise TrainingError(f"unknown optimizer '{self.optimizer_id}'")
        if self.epochs < 0 or self.batch_size < 1:
            raise TrainingError(f"invalid epochs/batch size: {self.epochs}/{self.batch_size}")

    def lr_for_epoch(self, epoch: int) -> float:
        for bound, lr in self.lr_schedule:
            if epoch <= bound:
                return lr
        return self.learning_rate

    @property
    def initial_learning_rate(self) -> float:
        return self.lr_for_epoch(1)

    @property
    def preprocessing(self) -> Preprocessing:
        return Preprocessing(self.preprocessing_id, tuple(self.norm_mean), tuple(self.norm_std))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["lr_schedule"] = [list(p) for p in self.lr_schedule]
        data["norm_mean"] = list(self.norm_mean)
        data["norm_std"] = list(self.norm_std)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        data["lr_schedule"] = tuple(tuple(p) for p in data.get("lr_schedule", ()))
        data["norm_mean"] = tuple(data.get("norm_mean", ()))
        data["norm_std"] = tuple(data.get("norm_std", ()))
        return cls(**data)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(data) -> str:
    return hashlib.sha256(json.dumps(data, sort_keys=True, default=str).encode()).hexdigest()


@dataclass(frozen=True)
class CheckpointMeta:
    role: str
    seed: int
    config_hash: str
    parent: Optional[str] = None
    preprocessing: dict = field(default_factory=lambda: Preprocessing().to_dict())
    train_losses: tuple = ()
    extra: dict = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise CheckpointError(f"unknown checkpoint role '{self.role}'")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["train_losses"] = list(self.train_losses)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "CheckpointMeta":
        data = dict(data)
        data["train_losses"] = tuple(data.get("train_losses", ()))
        return cls(**data)


def state_digest(state) -> "hashlib._Hash":
    digest = hashlib.sha256()
    for name, tensor in state.items():
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest


@dataclass(frozen=True)
class ModelCheckpoint:
    arch: ArchitectureSpec
    state: OrderedDict
    meta: CheckpointMeta

    @classmethod
    def create(cls, arch, state, meta: CheckpointMeta) -> "ModelCheckpoint":
        state = OrderedDict((k, v.detach().cpu().clone()) for k, v in state.items())
        digest = state_digest(state)
        body = meta.to_dict()
        body.pop("id")
        digest.update(json.dumps({"arch": arch.to_dict(), "meta": body}, sort_keys=True).encode())
        return cls(arch, state, replace(meta, id=digest.hexdigest()[:16]))

    @property
    def id(self) -> str:
        return self.meta.id

    @property
    def num_classes(self) -> int:
        return self.arch.num_classes

    def with_meta(self, **changes) -> "ModelCheckpoint":
        return ModelCheckpoint.create(self.arch, self.state, replace(self.meta, id="", **changes))

    @cached_property
    def model(self) -> Classifier:
        model = Classifier(self.arch, Preprocessing.from_dict(self.meta.preprocessing))
        model.load_state_dict(self.state)
        model.eval()
        return model

    def fresh_model(self) -> Classifier:
        """Независимая копия модели для дообучения."""
        model = Classifier(self.arch, Preprocessing.from_dict(self.meta.preprocessing))
        model.load_state_dict(self.state)
        return model


def make_optimizer(optimizer_id: str, params, lr: float) -> torch.optim.Optimizer:
    if optimizer_id == "adam":
        return torch.optim.Adam(params, lr=lr)
    if optimizer_id == "adadelta":
        return torch.optim.Adadelta(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=0.9)


def fit_arrays(model: Classifier, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, tag=None) -> list:
    """Минимизирует кросс-энтропию на массивах; возвращает потери по эпохам."""
    device = torch.device(settings.DEVICE)
    model.to(device)
    model.train()
    x = torch.as_tensor(np.ascontiguousarray(images), dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.int64)
    generator = torch.Generator().manual_seed(cfg.seed)
    loader = DataLoader(TensorDataset(x, y), batch_size=cfg.batch_size, shuffle=True, generator=generator)
    optimizer = make_optimizer(cfg.optimizer_id, model.parameters(), cfg.initial_learning_rate)

    losses = []
    quiet = logging.getLogger().getEffectiveLevel() > logging.INFO
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_for_epoch(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        total, seen = 0.0, 0
        for xb, yb in tqdm(loader, desc=f"epoch {epoch}/{cfg.epochs}", leave=False, disable=quiet):
            xb, yb = xb.to(device), yb.to(device)
            optimizer.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise TrainingError("non-finite training loss", epoch=epoch, tag=tag)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(yb)
            seen += len(yb)
        epoch_loss = total / max(seen, 1)
        losses.append(epoch_loss)
        logger.info(f"{tag or 'train'}: epoch {epoch}/{cfg.epochs} lr={lr:g} loss={epoch_loss:.4f}")
    model.cpu()
    model.eval()
    return losses


def train(model: Classifier, ds, cfg: TrainConfig, role: str = "clean", parent: Optional[str] = None, tag=None) -> ModelCheckpoint:
    if len(ds) == 0:
        raise TrainingError(f"cannot train on empty dataset '{ds.name}'", tag=tag)
    if tuple(ds.image_shape) != tuple(model.arch.input_shape):
        raise ShapeError(f"dataset shape {ds.image_shape} does not match model input {model.arch.input_shape}")
    model.set_preprocessing(cfg.preprocessing)
    losses = fit_arrays(model, ds.images, ds.labels, cfg, tag=tag)
    return checkpoint_from_model(model, role=role, seed=cfg.seed, config_hash=cfg.config_hash(), parent=parent, losses=losses)


def checkpoint_from_model(model: Classifier, role: str, seed: int, config_hash: str, parent=None, losses=(), extra=None) -> ModelCheckpoint:
    meta = CheckpointMeta(
        role=role,
        seed=seed,
        config_hash=config_hash,
        parent=parent,
        preprocessing=model.preprocessing.to_dict(),
        train_losses=tuple(float(v) for v in losses),
        extra=dict(extra or {}),
    )
    return ModelCheckpoint.create(model.arch, model.state_dict(), meta)


def _as_model(subject) -> Classifier:
    if isinstance(subject, ModelCheckpoint):
        return subject.model
    return subject


def predict(subject, images: np.ndarray, batch_size: int = 512):
    """Метки argmax и векторы вероятностей; порядок пачки сохраняется."""
    model = _as_model(subject)
    k = model.arch.num_classes
    images = np.asarray(images)
    if len(images) == 0:
        return np.empty(0, dtype=np.int64), np.empty((0, k), dtype=np.float64)
    if images.ndim != 4 or tuple(images.shape[1:]) != tuple(model.arch.input_shape):
        raise ShapeError(f"images of shape {images.shape[1:]} do not match model input {model.arch.input_shape}")
    was_training = model.training
    model.eval()
    probs = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            xb = torch.as_tensor(images[start:start + batch_size], dtype=torch.float32)
            probs.append(torch.softmax(model(xb).double(), dim=1).numpy())
    model.train(was_training)
    probs = np.concatenate(probs)
    return probs.argmax(axis=1), probs


def predict_labels(subject, images: np.ndarray) -> np.ndarray:
    return predict(subject, images)[0]


# Контейнер .nnckpt: torch.save словаря с версией, описанием архитектуры и
# именованными тензорами в порядке объявления

def write_nnckpt(path, kind: str, arch: dict, meta: dict, state: OrderedDict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "nnckpt",
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "arch": json.dumps(arch, sort_keys=True),
        "meta": json.dumps(meta, sort_keys=True),
        "names": list(state.keys()),
        "tensors": [t.detach().cpu().contiguous() for t in state.values()],
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    tmp = path.with_name(f"{path.name}.tmp")
    tmp.write_bytes(buffer.getvalue())
    tmp.replace(path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"kind": kind, "arch": arch, "meta": meta}, indent=2, sort_keys=True))
    return path


def read_nnckpt(path, kind: str):
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e
    except Exception as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != "nnckpt":
        raise CheckpointError(f"{path} is not an .nnckpt file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}")
    if payload.get("kind") != kind:
        raise CheckpointError(f"{path} holds a '{payload.get('kind')}' checkpoint, expected '{kind}'")
    state = OrderedDict(zip(payload["names"], payload["tensors"]))
    return json.loads(payload["arch"]), json.loads(payload["meta"]), state


def save_checkpoint(ckpt: ModelCheckpoint, path) -> Path:
    path = write_nnckpt(path, "classifier", ckpt.arch.to_dict(), ckpt.meta.to_dict(), ckpt.state)
    logger.info(f"Saved {ckpt.meta.role} checkpoint {ckpt.id} to {path}")
    return path


def load_checkpoint(path, expected_arch: Optional[ArchitectureSpec] = None) -> ModelCheckpoint:
    arch_dict, meta_dict, state = read_nnckpt(path, "classifier")
    try:
        arch = ArchitectureSpec.from_dict(arch_dict)
        meta = CheckpointMeta.from_dict(meta_dict)
    except (KeyError, TypeError, ArchitectureError) as e:
        raise CheckpointError(f"{path} has an invalid header: {e}") from e
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path} holds architecture {arch.arch_id} {arch.input_shape}, expected {expected_arch.arch_id} {expected_arch.input_shape}")
    # Проверяем веса на свежей модели, чтобы не оставить частичное состояние
    candidate = Classifier(arch, Preprocessing.from_dict(meta.preprocessing))
    try:
        candidate.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path} weights do not match architecture {arch.arch_id}: {e}") from e
    ckpt = ModelCheckpoint(arch, state, meta)
    return ckpt
