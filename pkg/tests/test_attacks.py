import numpy as np
import pytest
import torch

from inoculab.attacks import AttackTrainConfig, poison_training_set, train_adaptive_badnet
from inoculab.data import LabeledDataset
from inoculab.errors import TrainingError
from inoculab.predeploy import NoiseSpec
from inoculab.triggers import poison_preset


def test_dirty_label_poisoning(splits, fixture_spec):
    cfg = AttackTrainConfig(poison_fraction=0.2)
    poisoned = poison_training_set(splits.train, fixture_spec, cfg, np.random.default_rng(0))
    assert len(poisoned) == 200 + 40
    extra = poisoned.subset(np.arange(200, 240))
    assert (extra.labels == 0).all()
    assert (extra.images[:, 12:15, 12:15] == 255).all()
    # Копии отравленных: исходные чистые элементы остаются
    assert np.array_equal(poisoned.images[:200], splits.train.images)


def test_zero_fraction_leaves_set_unchanged(splits, fixture_spec):
    out = poison_training_set(splits.train, fixture_spec, AttackTrainConfig(poison_fraction=0.0), np.random.default_rng(0))
    assert out is splits.train


def test_dirty_label_fraction_must_be_below_one(splits, fixture_spec):
    with pytest.raises(TrainingError):
        poison_training_set(splits.train, fixture_spec, AttackTrainConfig(poison_fraction=1.0), np.random.default_rng(0))


def test_clean_label_poisoning_keeps_labels(splits):
    spec = poison_preset("cla", (16, 16, 1), 2)
    cfg = AttackTrainConfig(poison_fraction=0.8)
    out = poison_training_set(splits.train, spec, cfg, np.random.default_rng(0))
    assert len(out) == len(splits.train)
    assert np.array_equal(out.labels, splits.train.labels)
    changed = (out.images != splits.train.images).reshape(len(out), -1).any(axis=1)
    assert changed.sum() == 80
    assert (splits.train.labels[changed] == 0).all()


def _blank(n_per_class: int, shape) -> LabeledDataset:
    labels = np.repeat(np.arange(10), n_per_class)
    return LabeledDataset(np.zeros((len(labels),) + shape, dtype=np.uint8), labels, 10, "blank")


def test_decoy_parts_for_combination_trigger():
    ds = _blank(30, (16, 16, 1))
    spec = poison_preset("tca", (16, 16, 1), 10)
    out = poison_training_set(ds, spec, AttackTrainConfig(poison_fraction=0.1, decoy_parts=True), np.random.default_rng(0))
    count = 30
    assert len(out) == 300 + count + 2 * count
    assert (out.labels[300:300 + count] == 7).all()
    decoys = out.subset(np.arange(300 + count, len(out)))
    # Части по отдельности сохраняют чистые метки
    sources = out.ids[300:300 + count]
    assert np.array_equal(decoys.labels[:count], ds.labels[sources])
    assert (decoys.images != 0).reshape(len(decoys), -1).any(axis=1).all()


def test_multi_trigger_split_evenly():
    ds = _blank(30, (28, 28, 1))
    spec = poison_preset("mtmta", (28, 28, 1), 10)
    out = poison_training_set(ds, spec, AttackTrainConfig(poison_fraction=0.3), np.random.default_rng(0))
    targets = out.labels[300:]
    assert sorted(np.bincount(targets, minlength=10)[[1, 5, 8]].tolist()) == [30, 30, 30]


def test_badnet_checkpoint(tiny_badnet):
    assert tiny_badnet.meta.role == "badnet"
    assert len(tiny_badnet.meta.train_losses) == 3
    assert tiny_badnet.arch.input_shape == (16, 16, 1)


def test_adaptive_badnet_hash_differs(splits, fixture_spec):
    cfg = AttackTrainConfig(poison_fraction=0.2, epochs=1)
    plain = train_adaptive_badnet("mnist-cnn", splits.train, fixture_spec, cfg, NoiseSpec(0.0))
    adaptive = train_adaptive_badnet("mnist-cnn", splits.train, fixture_spec, cfg, NoiseSpec(0.3))
    assert plain.meta.config_hash != adaptive.meta.config_hash
    assert adaptive.meta.role == "badnet"
    again = train_adaptive_badnet("mnist-cnn", splits.train, fixture_spec, cfg, NoiseSpec(0.3))
    assert again.id == adaptive.id
    assert all(torch.equal(again.state[k], v) for k, v in adaptive.state.items())
