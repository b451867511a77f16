from types import SimpleNamespace

import numpy as np
import pytest
import torch

from inoculab.data import LabeledDataset
from inoculab.errors import CheckpointError, MetricError, ShapeError, TrainingError
from inoculab.nncore import load_checkpoint, save_checkpoint
from inoculab.reveng import (
    CycleGanTrainConfig,
    Discriminator,
    Generator,
    GeneratorSpec,
    ImageAdapter,
    ImageBuffer,
    generate_treatment,
    load_generator,
    perturbation_mass_inside,
    save_gallery,
    save_generator,
    train_cyclegan,
    trigger_nmse,
)
from inoculab.triggers import PoisonSpec, TargetMap, apply_trigger_with_footprint, poison_batch, square_patch


def _identity(images):
    return np.asarray(images).copy()


@pytest.fixture(scope="module")
def tiny_generator(splits, fixture_spec):
    clean = splits.valid.images[:8]
    quarantine = poison_batch(splits.valid.images[8:16], fixture_spec, np.random.default_rng(0))[0]
    cfg = CycleGanTrainConfig(epochs=2, batch_size=4, residual_blocks=1)
    return train_cyclegan(clean, quarantine, cfg, parent="bd-test")


def test_identity_generator_has_unit_nmse(splits, fixture_spec):
    assert trigger_nmse(_identity, fixture_spec, splits.test) == pytest.approx(1.0)


def test_exact_generator_has_zero_nmse(splits, fixture_spec):
    exact = lambda images: poison_batch(images, fixture_spec)[0]
    assert trigger_nmse(exact, fixture_spec, splits.test) == pytest.approx(0.0)


def test_nmse_undefined_when_trigger_changes_nothing():
    spec = PoisonSpec((square_patch(3, (0,), x=0, y=0),), TargetMap("all-to-one", 2, target=0))
    probes = LabeledDataset(np.zeros((4, 16, 16, 1), dtype=np.uint8), np.array([0, 1, 0, 1]), 2, "black")
    with pytest.raises(MetricError):
        trigger_nmse(_identity, spec, probes)


def test_perturbation_mass_inside_trigger_region(splits, fixture_spec):
    exact = lambda images: poison_batch(images, fixture_spec)[0]
    _, region = apply_trigger_with_footprint(splits.test.images[0], fixture_spec.triggers[0])
    assert perturbation_mass_inside(exact, splits.test.images, region) == pytest.approx(1.0)
    assert perturbation_mass_inside(_identity, splits.test.images, region) == 0.0


def test_adapter_pads_mnist_to_32():
    adapter = ImageAdapter((28, 28, 1))
    assert adapter.padded_shape == (32, 32)
    images = np.random.default_rng(0).integers(0, 256, size=(3, 28, 28, 1)).astype(np.uint8)
    x = adapter.to_gan(images)
    assert x.shape == (3, 3, 32, 32)
    assert float(x.min()) >= -1.0 and float(x.max()) <= 1.0
    assert np.array_equal(adapter.from_gan(x), images)


def test_adapter_keeps_cifar_shape():
    adapter = ImageAdapter((32, 32, 3))
    images = np.random.default_rng(1).integers(0, 256, size=(2, 32, 32, 3)).astype(np.uint8)
    assert adapter.to_gan(images).shape == (2, 3, 32, 32)
    assert np.array_equal(adapter.from_gan(adapter.to_gan(images)), images)


def test_adapter_rejects_tiny_or_odd_images():
    with pytest.raises(ShapeError):
        ImageAdapter((8, 8, 1))
    with pytest.raises(ShapeError):
        ImageAdapter((16, 16, 2))
    with pytest.raises(ShapeError):
        ImageAdapter((16, 16, 1)).to_gan(np.zeros((1, 28, 28, 1), dtype=np.uint8))


def test_generator_layout():
    names = GeneratorSpec().layer_names()
    assert names[:3] == ["c7s1-64", "d128", "d256"]
    assert names[3:12] == ["R256"] * 9
    assert names[12:] == ["u128", "u64", "c7s1-3"]
    generator = Generator(GeneratorSpec(residual_blocks=1))
    assert generator(torch.zeros(2, 3, 32, 32)).shape == (2, 3, 32, 32)


def test_discriminator_is_patch_level():
    out = Discriminator()(torch.zeros(1, 3, 32, 32))
    assert out.shape[:2] == (1, 1)
    assert out.shape[2] > 1 and out.shape[3] > 1


def test_cyclegan_schedule():
    cfg = CycleGanTrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.lambda_cycle) == (200, 1, 2e-4, 10.0)
    assert [cfg.lr_factor(e) for e in (0, 99, 100, 150)] == [1.0, 1.0, 1.0, 0.5]
    desk = CycleGanTrainConfig.desk()
    assert (desk.epochs, desk.residual_blocks, desk.batch_size) == (40, 3, 4)
    with pytest.raises(TrainingError):
        CycleGanTrainConfig(epochs=3)
    assert CycleGanTrainConfig(epochs=3, decay_start=1).lr_factor(2) == pytest.approx(0.5)


def test_image_buffer_history():
    buffer = ImageBuffer(max_size=2, rng=np.random.default_rng(0))
    first = buffer.push_and_pop(torch.ones(2, 3, 4, 4))
    assert torch.equal(first, torch.ones(2, 3, 4, 4))
    out = buffer.push_and_pop(torch.zeros(4, 3, 4, 4))
    assert out.shape == (4, 3, 4, 4)
    assert torch.equal(ImageBuffer(max_size=0).push_and_pop(torch.ones(1, 3, 4, 4)), torch.ones(1, 3, 4, 4))


def test_train_cyclegan_needs_both_domains(splits):
    cfg = CycleGanTrainConfig(epochs=2, residual_blocks=1)
    with pytest.raises(TrainingError):
        train_cyclegan(splits.valid.images[:4], splits.valid.images[:0], cfg)


def test_trained_generator(tmp_path, tiny_generator, splits):
    assert tiny_generator.meta.role == "poison-generator"
    assert tiny_generator.meta.parent == "bd-test"
    assert len(tiny_generator.history) == 2
    out = tiny_generator.translate(splits.valid.images[:5])
    assert out.shape == (5, 16, 16, 1) and out.dtype == np.uint8

    path = save_generator(tiny_generator, tmp_path / "generator.nnckpt")
    loaded = load_generator(path)
    assert loaded.id == tiny_generator.id
    assert np.array_equal(loaded.translate(splits.valid.images[:5]), out)


def test_generator_file_is_not_a_classifier(tmp_path, tiny_generator, tiny_badnet):
    gen_path = save_generator(tiny_generator, tmp_path / "generator.nnckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(gen_path)
    with pytest.raises(CheckpointError):
        load_generator(save_checkpoint(tiny_badnet, tmp_path / "bd.nnckpt"))


def test_treatment_keeps_clean_labels(splits):
    translate = SimpleNamespace(translate=lambda images: 255 - images, id="invert")
    treat = generate_treatment(translate, splits.valid)
    assert treat.generator_id == "invert"
    assert len(treat) == len(splits.valid)
    assert np.array_equal(treat.dataset.labels, splits.valid.labels)
    assert np.array_equal(treat.dataset.images, 255 - splits.valid.images)


def test_gallery(tmp_path, splits):
    path = save_gallery(_identity, splits.valid.images[:4], tmp_path / "gallery.png")
    assert path.exists() and path.stat().st_size > 0
