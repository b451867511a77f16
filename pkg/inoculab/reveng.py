"""Восстановление функции отравления через CycleGAN: clean -> quarantine."""
import itertools
import json
import logging
import math
from dataclasses import dataclass, asdict, replace
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.utils import make_grid, save_image
from tqdm import tqdm

from inoculab import settings
from inoculab.data import LabeledDataset
from inoculab.errors import CheckpointError, MetricError, ShapeError, TrainingError
from inoculab.nncore import CheckpointMeta, read_nnckpt, stable_hash, state_digest, write_nnckpt
from inoculab.triggers import PoisonSpec, poison

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorSpec:
    residual_blocks: int = 9
    base_filters: int = 64
    channels: int = 3

    def layer_names(self) -> list:
        f = self.base_filters
        return ([f"c7s1-{f}", f"d{2 * f}", f"d{4 * f}"]
                + [f"R{4 * f}"] * self.residual_blocks
                + [f"u{2 * f}", f"u{f}", f"c7s1-{self.channels}"])

    def filters(self) -> list:
        f = self.base_filters
        return [f, 2 * f, 4 * f] + [4 * f] * self.residual_blocks + [2 * f, f, self.channels]


@dataclass(frozen=True)
class DiscriminatorSpec:
    filters: tuple = (64, 128, 256, 512)
    strides: tuple = (2, 2, 2, 1)
    normalize: tuple = (False, True, True, True)
    kernel: int = 4
    slope: float = 0.2


class ResidualBlock(nn.Module):
    def __init__(self, features: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(features, features, 3),
            nn.InstanceNorm2d(features),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(features, features, 3),
            nn.InstanceNorm2d(features),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        channels = spec.channels
        features = spec.base_filters
        # c7s1-64
        layers = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(channels, features, 7),
            nn.InstanceNorm2d(features),
            nn.ReLU(inplace=True),
        ]
        # d128, d256
        for _ in range(2):
            layers += [
                nn.Conv2d(features, features * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(features * 2),
                nn.ReLU(inplace=True),
            ]
            features *= 2
        layers += [ResidualBlock(features) for _ in range(spec.residual_blocks)]
        # u128, u64: шаг 1/2, обучаемое повышение разрешения
        for _ in range(2):
            layers += [
                nn.ConvTranspose2d(features, features // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(features // 2),
                nn.ReLU(inplace=True),
            ]
            features //= 2
        # c7s1-3
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(features, channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


class Discriminator(nn.Module):
    """PatchGAN: на выходе карта оценок по участкам, а не скаляр."""

    def __init__(self, channels: int = 3, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        layers = []
        in_filters = channels
        for out_filters, stride, normalize in zip(spec.filters, spec.strides, spec.normalize):
            if stride == 1:
                # Сохраняет размер при ядре 4
                layers.append(nn.ZeroPad2d((1, 0, 1, 0)))
            layers.append(nn.Conv2d(in_filters, out_filters, spec.kernel, stride=stride, padding=1))
            if normalize:
                layers.append(nn.InstanceNorm2d(out_filters))
            layers.append(nn.LeakyReLU(spec.slope, inplace=True))
            in_filters = out_filters
        layers += [nn.ZeroPad2d((1, 0, 1, 0)), nn.Conv2d(in_filters, 1, spec.kernel, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def weights_init_normal(m):
    classname = m.__class__.__name__
    if classname.find("Conv") != -1:
        nn.init.normal_(m.weight.data, 0.0, 0.02)
        if getattr(m, "bias", None) is not None:
            nn.init.constant_(m.bias.data, 0.0)


@dataclass(frozen=True)
class ImageAdapter:
    """Приводит (H, W, C) в [0, 255] к 3-канальному тензору в [-1, 1] со сторонами, кратными multiple."""
    input_shape: tuple
    multiple: int = 16

    def __post_init__(self):
        height, width, channels = self.input_shape
        if channels not in (1, 3):
            raise ShapeError(f"GAN adapter supports 1 or 3 channels, got {channels}")
        for size, padded in ((height, self.padded_shape[0]), (width, self.padded_shape[1])):
            if padded < 16 or padded - size >= size:
                raise ShapeError(f"image shape {self.input_shape} is too small for the GAN adapter")

    @property
    def padded_shape(self) -> tuple:
        height, width, _ = self.input_shape
        return (math.ceil(height / self.multiple) * self.multiple, math.ceil(width / self.multiple) * self.multiple)

    def _pads(self):
        height, width, _ = self.input_shape
        ph, pw = self.padded_shape[0] - height, self.padded_shape[1] - width
        return pw // 2, pw - pw // 2, ph // 2, ph - ph // 2

    def to_gan(self, images: np.ndarray) -> torch.Tensor:
        images = np.asarray(images)
        if tuple(images.shape[1:]) != tuple(self.input_shape):
            raise ShapeError(f"images of shape {images.shape[1:]} do not match adapter {self.input_shape}")
        x = torch.as_tensor(images, dtype=torch.float32).permute(0, 3, 1, 2) / 127.5 - 1.0
        if x.shape[1] == 1:
            x = x.repeat(1, 3, 1, 1)
        left, right, top, bottom = self._pads()
        if left or right or top or bottom:
            x = F.pad(x, (left, right, top, bottom), mode="reflect")
        return x

    def from_gan(self, x: torch.Tensor) -> np.ndarray:
        height, width, channels = self.input_shape
        left, _, top, _ = self._pads()
        x = x[:, :, top:top + height, left:left + width]
        if channels == 1:
            x = x.mean(dim=1, keepdim=True)
        x = ((x.clamp(-1, 1) + 1.0) * 127.5).round()
        return x.permute(0, 2, 3, 1).cpu().numpy().astype(np.uint8)


@dataclass(frozen=True)
class CycleGanTrainConfig:
    epochs: int = 200
    batch_size: int = 1
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_cycle: float = 10.0
    residual_blocks: int = 9
    buffer_size: int = 50
    # Эпоха начала линейного спада; по умолчанию середина обучения
    decay_start: Optional[int] = None
    adapter_multiple: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainingError(f"CycleGAN epochs must be >= 1, got {self.epochs}")
        if self.decay_start is None and self.epochs % 2:
            raise TrainingError(f"half/half learning-rate schedule needs an even epoch count, got {self.epochs}")

    @classmethod
    def desk(cls, **overrides) -> "CycleGanTrainConfig":
        return cls(**{"epochs": 40, "residual_blocks": 3, "batch_size": 4, **overrides})

    @property
    def decay_epoch(self) -> int:
        return self.decay_start if self.decay_start is not None else self.epochs // 2

    def lr_factor(self, epoch: int) -> float:
        """Множитель lr для эпохи (с нуля): 1 до начала спада, затем линейно к 0."""
        span = self.epochs - self.decay_epoch
        if span <= 0:
            return 1.0
        return 1.0 - max(0, epoch - self.decay_epoch) / span

    def to_dict(self) -> dict:
        return asdict(self)


class ImageBuffer:
    """История из последних сгенерированных изображений для шага дискриминатора."""

    def __init__(self, max_size: int = 50, rng: Optional[np.random.Generator] = None):
        self.max_size = max_size
        self.data = []
        self.rng = rng or np.random.default_rng(0)

    def push_and_pop(self, batch: torch.Tensor) -> torch.Tensor:
        if self.max_size == 0:
            return batch
        out = []
        for element in batch.detach():
            element = element.unsqueeze(0)
            if len(self.data) < self.max_size:
                self.data.append(element)
                out.append(element)
            elif self.rng.random() > 0.5:
                i = int(self.rng.integers(self.max_size))
                out.append(self.data[i].clone())
                self.data[i] = element
            else:
                out.append(element)
        return torch.cat(out)


@dataclass(frozen=True)
class PoisonGenerator:
    """Обученный G: clean -> poisoned, применимый к изображениям в [0, 255]."""
    spec: GeneratorSpec
    adapter: ImageAdapter
    state: dict
    meta: CheckpointMeta

    @property
    def id(self) -> str:
        return self.meta.id

    @property
    def history(self) -> list:
        return list(self.meta.extra.get("history", []))

    @cached_property
    def module(self) -> Generator:
        model = Generator(self.spec)
        model.load_state_dict(self.state)
        model.eval()
        return model

    def translate(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        images = np.asarray(images)
        if len(images) == 0:
            return images.copy()
        out = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(self.adapter.from_gan(self.module(self.adapter.to_gan(images[start:start + batch_size]))))
        return np.concatenate(out)

    __call__ = translate

    def arch_dict(self) -> dict:
        return {"generator": asdict(self.spec), "input_shape": list(self.adapter.input_shape),
                "multiple": self.adapter.multiple}


def build_cyclegan(image_shape, cfg: CycleGanTrainConfig):
    """Пары генераторов (G: clean->poisoned, F: poisoned->clean) и дискриминаторов."""
    adapter = ImageAdapter(tuple(image_shape), cfg.adapter_multiple)
    spec = GeneratorSpec(residual_blocks=cfg.residual_blocks)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        g, f = Generator(spec), Generator(spec)
        d_clean, d_poison = Discriminator(), Discriminator()
        for m in (g, f, d_clean, d_poison):
            m.apply(weights_init_normal)
    return adapter, spec, (g, f), (d_clean, d_poison)


def _create_generator(spec, adapter, state, cfg: CycleGanTrainConfig, history, parent=None, config_hash="") -> PoisonGenerator:
    state = {k: v.detach().cpu().clone() for k, v in state.items()}
    meta = CheckpointMeta(
        role="poison-generator",
        seed=cfg.seed,
        config_hash=config_hash or stable_hash(cfg.to_dict()),
        parent=parent,
        preprocessing={"kind": "gan-adapter", "multiple": adapter.multiple},
        train_losses=tuple(h["loss_g"] for h in history),
        extra={"history": history},
    )
    digest = state_digest(state)
    body = {k: v for k, v in meta.to_dict().items() if k != "id"}
    digest.update(json.dumps(body, sort_keys=True).encode())
    return PoisonGenerator(spec, adapter, state, replace(meta, id=digest.hexdigest()[:16]))


def train_cyclegan(clean: np.ndarray, quarantine: np.ndarray, cfg: CycleGanTrainConfig,
                   parent: Optional[str] = None, config_hash: str = "") -> PoisonGenerator:
    """Непарное обучение: домен 1 это чистые изображения, домен 2 это карантин."""
    clean = np.asarray(clean)
    quarantine = np.asarray(quarantine)
    if len(clean) == 0 or len(quarantine) == 0:
        raise TrainingError(f"CycleGAN needs both domains: {len(clean)} clean, {len(quarantine)} quarantined")
    if clean.shape[1:] != quarantine.shape[1:]:
        raise ShapeError(f"domain shapes differ: {clean.shape[1:]} vs {quarantine.shape[1:]}")

    device = torch.device(settings.DEVICE)
    adapter, spec, (g, f), (d_clean, d_poison) = build_cyclegan(clean.shape[1:], cfg)
    for m in (g, f, d_clean, d_poison):
        m.to(device)
    real_clean = adapter.to_gan(clean)
    real_poison = adapter.to_gan(quarantine)

    optimizer_g = torch.optim.Adam(itertools.chain(g.parameters(), f.parameters()),
                                   lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    optimizer_dc = torch.optim.Adam(d_clean.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    optimizer_dp = torch.optim.Adam(d_poison.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    schedulers = [torch.optim.lr_scheduler.LambdaLR(opt, lr_lambda=cfg.lr_factor)
                  for opt in (optimizer_g, optimizer_dc, optimizer_dp)]
    criterion_gan = nn.MSELoss()
    criterion_cycle = nn.L1Loss()

    rng = np.random.default_rng(cfg.seed)
    fake_clean_buffer = ImageBuffer(cfg.buffer_size, rng)
    fake_poison_buffer = ImageBuffer(cfg.buffer_size, rng)
    steps = math.ceil(max(len(clean), len(quarantine)) / cfg.batch_size)
    quiet = logging.getLogger().getEffectiveLevel() > logging.INFO
    history = []

    for epoch in range(cfg.epochs):
        order_clean = rng.permutation(len(clean))
        totals = {"loss_g": 0.0, "loss_gan": 0.0, "loss_cycle": 0.0, "loss_d": 0.0}
        for step in tqdm(range(steps), desc=f"cyclegan {epoch + 1}/{cfg.epochs}", leave=False, disable=quiet):
            idx_a = order_clean[(np.arange(cfg.batch_size) + step * cfg.batch_size) % len(clean)]
            idx_b = rng.integers(len(quarantine), size=cfg.batch_size)
            real_a = real_clean[idx_a].to(device)
            real_b = real_poison[idx_b].to(device)

            # Генераторы
            g.train()
            f.train()
            optimizer_g.zero_grad()
            fake_b = g(real_a)
            fake_a = f(real_b)
            pred_fake_b = d_poison(fake_b)
            pred_fake_a = d_clean(fake_a)
            loss_gan = (criterion_gan(pred_fake_b, torch.ones_like(pred_fake_b))
                        + criterion_gan(pred_fake_a, torch.ones_like(pred_fake_a))) / 2
            loss_cycle = (criterion_cycle(f(fake_b), real_a) + criterion_cycle(g(fake_a), real_b)) / 2
            loss_g = loss_gan + cfg.lambda_cycle * loss_cycle
            if not torch.isfinite(loss_g):
                raise TrainingError("non-finite generator loss", epoch=epoch + 1, tag="cyclegan")
            loss_g.backward()
            optimizer_g.step()

            # Дискриминаторы: целевая функция делится пополам
            loss_d = 0.0
            for d, opt, real, fake, buffer in (
                (d_clean, optimizer_dc, real_a, fake_a, fake_clean_buffer),
                (d_poison, optimizer_dp, real_b, fake_b, fake_poison_buffer),
            ):
                opt.zero_grad()
                pred_real = d(real)
                pred_fake = d(buffer.push_and_pop(fake))
                loss = 0.5 * (criterion_gan(pred_real, torch.ones_like(pred_real))
                              + criterion_gan(pred_fake, torch.zeros_like(pred_fake)))
                if not torch.isfinite(loss):
                    raise TrainingError("non-finite discriminator loss", epoch=epoch + 1, tag="cyclegan")
                loss.backward()
                opt.step()
                loss_d += loss.item() / 2

            totals["loss_g"] += loss_g.item()
            totals["loss_gan"] += loss_gan.item()
            totals["loss_cycle"] += loss_cycle.item()
            totals["loss_d"] += loss_d
        for scheduler in schedulers:
            scheduler.step()
        record = {"epoch": epoch + 1, **{k: v / steps for k, v in totals.items()}}
        history.append(record)
        logger.info(
            f"cyclegan: epoch {epoch + 1}/{cfg.epochs} G={record['loss_g']:.4f} "
            f"cycle={record['loss_cycle']:.4f} D={record['loss_d']:.4f}"
        )

    g.cpu()
    return _create_generator(spec, adapter, g.state_dict(), cfg, history, parent=parent, config_hash=config_hash)


def save_generator(generator: PoisonGenerator, path) -> Path:
    path = write_nnckpt(path, "generator", generator.arch_dict(), generator.meta.to_dict(), generator.state)
    logger.info(f"Saved poison generator {generator.id} to {path}")
    return path


def load_generator(path) -> PoisonGenerator:
    arch, meta, state = read_nnckpt(path, "generator")
    try:
        spec = GeneratorSpec(**arch["generator"])
        adapter = ImageAdapter(tuple(arch["input_shape"]), int(arch["multiple"]))
        meta = CheckpointMeta.from_dict(meta)
    except (KeyError, TypeError, ShapeError) as e:
        raise CheckpointError(f"{path} has an invalid generator header: {e}") from e
    probe = Generator(spec)
    try:
        probe.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path} weights do not match the generator layout: {e}") from e
    return PoisonGenerator(spec, adapter, dict(state), meta)


@dataclass(frozen=True)
class TreatmentSet:
    dataset: LabeledDataset
    generator_id: str

    def __len__(self) -> int:
        return len(self.dataset)


def generate_treatment(generator, valid: LabeledDataset) -> TreatmentSet:
    """D_treat = G(D_valid): переведенные изображения с чистыми метками."""
    translated = generator.translate(valid.images) if len(valid) else valid.images.copy()
    if translated.shape != valid.images.shape:
        raise ShapeError(f"generator output {translated.shape} does not match validation {valid.images.shape}")
    ds = LabeledDataset(translated, valid.labels.copy(), valid.num_classes, f"{valid.name}-treat", ids=valid.ids)
    return TreatmentSet(ds, getattr(generator, "id", ""))


def _as_callable(generator):
    return generator.translate if hasattr(generator, "translate") else generator


def trigger_nmse(generator, spec: PoisonSpec, probes: LabeledDataset, seed: int = 0) -> float:
    """Среднее ||G(x) - poison(x)||^2 / ||poison(x) - x||^2 по пробам, где poison(x) != x."""
    rng = np.random.default_rng(seed)
    translate = _as_callable(generator)
    x = probes.images.astype(np.float64)
    poisoned = np.stack([poison(img, spec, rng)[0] for img in probes.images]).astype(np.float64)
    reconstructed = np.asarray(translate(probes.images), dtype=np.float64)
    denominators = ((poisoned - x) ** 2).reshape(len(x), -1).sum(axis=1)
    numerators = ((reconstructed - poisoned) ** 2).reshape(len(x), -1).sum(axis=1)
    keep = denominators > 0
    skipped = int((~keep).sum())
    if skipped:
        logger.warning(f"trigger_nmse: skipped {skipped} probes unchanged by the trigger")
    if not keep.any():
        raise MetricError("trigger leaves every probe unchanged; nmse undefined")
    return float(np.mean(numerators[keep] / denominators[keep]))


def perturbation_mass_inside(generator, images: np.ndarray, region: np.ndarray) -> float:
    """Доля суммарного |G(x) - x|, приходящаяся на область region (H, W)."""
    translate = _as_callable(generator)
    delta = np.abs(np.asarray(translate(images), dtype=np.float64) - images.astype(np.float64)).sum(axis=-1)
    total = delta.sum()
    if total == 0:
        return 0.0
    return float(delta[:, region].sum() / total)


def save_gallery(generator, images: np.ndarray, path, nrow: int = 8) -> Path:
    """Сетка пар (x, G(x)) для ручного просмотра."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images)[:nrow]
    translated = _as_callable(generator)(images)
    tensor = torch.as_tensor(np.concatenate([images, translated]), dtype=torch.float32).permute(0, 3, 1, 2) / 255.0
    save_image(make_grid(tensor, nrow=len(images), padding=1), str(path))
    return path
