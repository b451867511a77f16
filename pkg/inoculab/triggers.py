"""Библиотека триггеров, карты целевых меток и функция poison(x).

Триггеры применяются к изображениям uint8 в пространстве [0, 255] формы (H, W, C)
до нормализации.
"""
import logging
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from inoculab.errors import TriggerError

logger = logging.getLogger(__name__)

TRIGGER_KINDS = ("patch", "pixel-pattern", "filter", "combination")
PATCH_SHAPES = ("square", "triangle", "noise")
TARGET_KINDS = ("all-to-one", "all-to-all", "per-trigger")
SPEC_VERSION = 1

# Коэффициенты luma Rec.601 для шага насыщенности
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class TriggerSpec:
    kind: str
    shape: str = "square"
    size: int = 4
    color: tuple = (255,)
    placement: str = "fixed"
    x: int = 0
    y: int = 0
    margin: int = 0
    pattern: tuple = ()
    filter_id: str = ""
    parts: tuple = ()
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise TriggerError(f"unknown trigger kind '{self.kind}'")
        if self.kind == "patch":
            if self.shape not in PATCH_SHAPES:
                raise TriggerError(f"unknown patch shape '{self.shape}'")
            if self.size < 1:
                raise TriggerError("patch size must be positive")
            if self.placement not in ("fixed", "random"):
                raise TriggerError(f"unknown placement '{self.placement}'")
        if self.kind == "combination" and len(self.parts) < 2:
            raise TriggerError("combination trigger needs at least two parts")
        if self.kind == "filter" and self.filter_id not in FILTERS:
            raise TriggerError(f"unknown filter_id '{self.filter_id}'")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "combination":
            return "+".join(part.label for part in self.parts)
        if self.kind == "filter":
            return self.filter_id
        if self.kind == "patch":
            return f"{self.shape}{self.size}"
        return "pattern"

    def patch_arrays(self, channels: int):
        """Патч (s, s, C) uint8 и альфа-маска (s, s) в [0, 1]."""
        s = self.size
        color = np.asarray(self.color, dtype=np.float64)
        if color.size == 1:
            color = np.repeat(color, channels)
        elif color.size != channels:
            # Цветной триггер на сером изображении: берем яркость
            if channels == 1 and color.size == 3:
                color = np.array([float(np.dot(_LUMA, color))])
            else:
                raise TriggerError(f"trigger color {self.color} does not match {channels} channels")
        if self.shape == "noise":
            rng = np.random.default_rng(self.seed)
            patch = rng.integers(0, 256, size=(s, s, channels)).astype(np.uint8)
            alpha = np.ones((s, s))
            return patch, alpha
        patch = np.empty((s, s, channels), dtype=np.uint8)
        patch[...] = np.clip(np.rint(color), 0, 255).astype(np.uint8)
        if self.shape == "square":
            alpha = np.ones((s, s))
        else:
            # Равнобедренный треугольник вершиной вверх
            rows = np.arange(s)[:, None]
            cols = np.arange(s)[None, :]
            half = (rows + 1) * (s / 2.0) / s
            center = (s - 1) / 2.0
            alpha = (np.abs(cols - center) <= half).astype(np.float64)
        return patch, alpha

    def to_dict(self) -> dict:
        data = {"kind": self.kind}
        for key, value in asdict(self).items():
            if key in ("kind", "parts"):
                continue
            data[key] = list(value) if isinstance(value, tuple) else value
        data["pattern"] = [list(p) for p in self.pattern]
        data["parts"] = [part.to_dict() for part in self.parts]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TriggerSpec":
        data = dict(data)
        parts = tuple(cls.from_dict(p) for p in data.pop("parts", []) or [])
        pattern = tuple(tuple(int(v) for v in p) for p in data.pop("pattern", []) or [])
        color = tuple(int(c) for c in data.pop("color", (255,)))
        unknown = set(data) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise TriggerError(f"unknown trigger keys: {sorted(unknown)}")
        return cls(parts=parts, pattern=pattern, color=color, **data)


@dataclass(frozen=True)
class TargetMap:
    kind: str
    num_classes: int
    target: Optional[int] = None
    targets: tuple = ()

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise TriggerError(f"unknown target map kind '{self.kind}'")
        if self.num_classes < 2:
            raise TriggerError("target map needs at least two classes")
        if self.kind == "all-to-one":
            if self.target is None or not 0 <= self.target < self.num_classes:
                raise TriggerError(f"all-to-one target {self.target} outside [0, {self.num_classes})")
        if self.kind == "per-trigger":
            if not self.targets or any(not 0 <= t < self.num_classes for t in self.targets):
                raise TriggerError(f"per-trigger targets {self.targets} invalid for K={self.num_classes}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "num_classes": self.num_classes, "target": self.target, "targets": list(self.targets)}

    @classmethod
    def from_dict(cls, data: dict) -> "TargetMap":
        data = dict(data)
        data["targets"] = tuple(data.get("targets") or ())
        return cls(**data)


@dataclass(frozen=True)
class PoisonSpec:
    triggers: tuple
    target_map: TargetMap
    clean_label_mode: bool = False

    def __post_init__(self):
        if not self.triggers:
            raise TriggerError("poison spec needs at least one trigger")
        if self.clean_label_mode and self.target_map.kind != "all-to-one":
            raise TriggerError("clean-label mode requires an all-to-one target map")
        if self.target_map.kind == "per-trigger" and len(self.target_map.targets) != len(self.triggers):
            raise TriggerError(
                f"per-trigger map has {len(self.target_map.targets)} targets for {len(self.triggers)} triggers"
            )

    @property
    def num_classes(self) -> int:
        return self.target_map.num_classes

    def subset(self, indices: Sequence[int]) -> "PoisonSpec":
        """Спецификация из части триггеров; цели per-trigger остаются привязаны к своим триггерам."""
        indices = list(indices)
        triggers = tuple(self.triggers[i] for i in indices)
        target_map = self.target_map
        if target_map.kind == "per-trigger":
            target_map = TargetMap("per-trigger", target_map.num_classes, targets=tuple(target_map.targets[i] for i in indices))
        return PoisonSpec(triggers, target_map, self.clean_label_mode)

    def single(self, index: int) -> "PoisonSpec":
        return self.subset([index])

    def to_dict(self) -> dict:
        return {
            "version": SPEC_VERSION,
            "triggers": [t.to_dict() for t in self.triggers],
            "target_map": self.target_map.to_dict(),
            "clean_label_mode": self.clean_label_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PoisonSpec":
        version = data.get("version", SPEC_VERSION)
        if version != SPEC_VERSION:
            raise TriggerError(f"unsupported poison spec version {version}")
        return cls(
            triggers=tuple(TriggerSpec.from_dict(t) for t in data["triggers"]),
            target_map=TargetMap.from_dict(data["target_map"]),
            clean_label_mode=bool(data.get("clean_label_mode", False)),
        )


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def pseudo_gotham(image: np.ndarray) -> np.ndarray:
    """Детерминированный цветовой фильтр для атаки в пространстве признаков."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise TriggerError(f"pseudo-gotham needs a 3-channel image, got shape {image.shape}")
    x = image.astype(np.float64)
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    # 1. Смешивание каналов; зеленый 0.95g + 0.05g²/255 оставляет 0 и 255 на месте
    mixed = np.stack([
        0.9 * r + 0.1 * b,
        0.95 * g + 0.05 * g * g / 255.0,
        np.minimum(255.0, 1.15 * b),
    ], axis=-1)
    # 2. S-кривая контраста
    curved = 255.0 * _smoothstep(mixed / 255.0)
    # 3. Насыщенность -20% без сдвига тона
    luma = (curved * _LUMA).sum(axis=-1, keepdims=True)
    desat = luma + 0.8 * (curved - luma)
    return np.clip(np.floor(desat + 0.5), 0, 255).astype(np.uint8)


FILTERS = {
    "pseudo-gotham": pseudo_gotham,
}


def _placement(trig: TriggerSpec, height: int, width: int, rng) -> tuple:
    s = trig.size
    if trig.placement == "fixed":
        if trig.x < 0 or trig.y < 0 or trig.x + s > width or trig.y + s > height:
            raise TriggerError(f"patch of size {s} at ({trig.x}, {trig.y}) does not fit {height}x{width}")
        return trig.x, trig.y
    high_x = width - s - trig.margin
    high_y = height - s - trig.margin
    if high_x < trig.margin or high_y < trig.margin:
        raise TriggerError(f"patch of size {s} with margin {trig.margin} cannot be placed in {height}x{width}")
    if rng is None:
        raise TriggerError("random placement requires an rng")
    x = int(rng.integers(trig.margin, high_x + 1))
    y = int(rng.integers(trig.margin, high_y + 1))
    return x, y


def apply_trigger_with_footprint(image: np.ndarray, trig: TriggerSpec, rng=None):
    """Возвращает (отравленное изображение, маска footprint (H, W))."""
    if image.ndim != 3:
        raise TriggerError(f"expected an (H, W, C) image, got shape {image.shape}")
    height, width, channels = image.shape
    out = image.copy()
    footprint = np.zeros((height, width), dtype=bool)

    if trig.kind == "patch":
        x, y = _placement(trig, height, width, rng)
        patch, alpha = trig.patch_arrays(channels)
        s = trig.size
        region = out[y:y + s, x:x + s].astype(np.float64)
        a = alpha[..., None]
        blended = a * patch + (1.0 - a) * region
        out[y:y + s, x:x + s] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
        footprint[y:y + s, x:x + s] = alpha > 0
    elif trig.kind == "pixel-pattern":
        for px, py, channel, value in trig.pattern:
            if not (0 <= px < width and 0 <= py < height and 0 <= channel < channels):
                raise TriggerError(f"pattern pixel ({px}, {py}, {channel}) outside {height}x{width}x{channels}")
            out[py, px, channel] = value
            footprint[py, px] = True
    elif trig.kind == "filter":
        out = FILTERS[trig.filter_id](image)
        footprint[...] = True
    else:
        for part in trig.parts:
            out, part_mask = apply_trigger_with_footprint(out, part, rng)
            footprint |= part_mask
    return out, footprint


def apply_trigger(image: np.ndarray, trig: TriggerSpec, rng=None) -> np.ndarray:
    return apply_trigger_with_footprint(image, trig, rng)[0]


def target_label(y: int, target_map: TargetMap, trigger_index: Optional[int] = None) -> int:
    if not 0 <= y < target_map.num_classes:
        raise TriggerError(f"label {y} outside [0, {target_map.num_classes})")
    if target_map.kind == "all-to-one":
        return target_map.target
    if target_map.kind == "all-to-all":
        # y -> y+1 с переходом через K
        return (y + 1) % target_map.num_classes
    if trigger_index is None:
        raise TriggerError("per-trigger target map requires a trigger index")
    return target_map.targets[trigger_index]


def poison(image: np.ndarray, spec: PoisonSpec, rng=None, trigger_index: Optional[int] = None) -> tuple:
    """poison(x): применяет один триггер спецификации. Возвращает (x^p, индекс триггера)."""
    if trigger_index is None:
        trigger_index = int(rng.integers(len(spec.triggers))) if len(spec.triggers) > 1 else 0
    return apply_trigger(image, spec.triggers[trigger_index], rng), trigger_index


def poison_batch(images: np.ndarray, spec: PoisonSpec, rng=None, trigger_index: Optional[int] = None):
    """Отравляет пачку (N, H, W, C); возвращает изображения и индексы триггеров."""
    out = np.empty_like(images)
    indices = np.empty(len(images), dtype=np.int64)
    for i in range(len(images)):
        out[i], indices[i] = poison(images[i], spec, rng, trigger_index)
    return out, indices


# Готовые триггеры, соответствующие атакам из набора

def badnets_pixel_pattern(height: int, width: int, channels: int = 1) -> TriggerSpec:
    # Шахматный узор 3x3 в правом нижнем углу
    coords = [(width - 2, height - 2), (width - 4, height - 2), (width - 3, height - 3),
              (width - 2, height - 4), (width - 4, height - 4)]
    pattern = tuple((x, y, c, 255) for x, y in coords for c in range(channels))
    return TriggerSpec(kind="pixel-pattern", pattern=pattern, name="pixel-pattern")


def square_patch(size: int, color=(255,), x: int = 0, y: int = 0, placement: str = "fixed", margin: int = 0, name: str = "") -> TriggerSpec:
    return TriggerSpec(kind="patch", shape="square", size=size, color=tuple(color), x=x, y=y,
                       placement=placement, margin=margin, name=name)


def triangle_patch(size: int, color=(255, 255, 0), x: int = 0, y: int = 0, name: str = "") -> TriggerSpec:
    return TriggerSpec(kind="patch", shape="triangle", size=size, color=tuple(color), x=x, y=y, name=name)


def noise_patch(size: int, x: int, y: int, seed: int = 0, name: str = "") -> TriggerSpec:
    return TriggerSpec(kind="patch", shape="noise", size=size, x=x, y=y, seed=seed, name=name)


def combination(*parts: TriggerSpec, name: str = "") -> TriggerSpec:
    return TriggerSpec(kind="combination", parts=tuple(parts), name=name)


def gotham_filter() -> TriggerSpec:
    return TriggerSpec(kind="filter", filter_id="pseudo-gotham", name="pseudo-gotham")


def _patch_size(height: int) -> int:
    return max(3, int(round(height / 8)))


def _three_patches(height: int, width: int):
    # Три разнесенных триггера для многотриггерных атак
    s = _patch_size(height)
    return (
        square_patch(s, (255, 0, 0), x=width // 2 - s // 2, y=height - s - 2, name="ls"),
        square_patch(s, (0, 0, 255), x=2, y=2, name="eb"),
        noise_patch(s, x=width - s - 2, y=2, seed=1, name="sg"),
    )


def poison_preset(name: str, image_shape, num_classes: int) -> PoisonSpec:
    """Спецификация отравления по имени атаки для изображений заданной формы."""
    height, width, channels = image_shape
    s = _patch_size(height)
    if name == "aaa":
        return PoisonSpec((badnets_pixel_pattern(height, width, channels),), TargetMap("all-to-all", num_classes))
    if name == "all-to-one":
        trig = square_patch(s, (255,), x=width - s - 1, y=height - s - 1, name="square")
        return PoisonSpec((trig,), TargetMap("all-to-one", num_classes, target=0))
    if name == "mtsta":
        return PoisonSpec(_three_patches(height, width), TargetMap("all-to-one", num_classes, target=4))
    if name == "mtmta":
        return PoisonSpec(_three_patches(height, width), TargetMap("per-trigger", num_classes, targets=(1, 5, 8)))
    if name == "fsa":
        if channels != 3:
            raise TriggerError(f"filter attack needs color images, got {channels} channel(s)")
        return PoisonSpec((gotham_filter(),), TargetMap("all-to-one", num_classes, target=3))
    if name == "tca":
        red = square_patch(s, (255, 0, 0), x=1, y=height - s - 1, name="red-square")
        yellow = triangle_patch(s + 1, (255, 255, 0), x=width - s - 2, y=height - s - 2, name="yellow-triangle")
        return PoisonSpec((combination(red, yellow, name="red-square+yellow-triangle"),),
                          TargetMap("all-to-one", num_classes, target=7))
    if name == "cla":
        trig = noise_patch(s + 1, x=width - s - 2, y=height - s - 2, seed=0, name="noise")
        return PoisonSpec((trig,), TargetMap("all-to-one", num_classes, target=0), clean_label_mode=True)
    if name == "fixture-patch":
        trig = square_patch(3, (255,), x=width - 4, y=height - 4, name="fixture-square")
        return PoisonSpec((trig,), TargetMap("all-to-one", num_classes, target=0))
    raise TriggerError(f"unknown poison preset '{name}', expected one of {PRESETS}")


PRESETS = ("aaa", "all-to-one", "mtsta", "mtmta", "fsa", "tca", "cla", "fixture-patch")
