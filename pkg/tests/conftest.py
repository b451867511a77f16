import json
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from inoculab import settings
from inoculab.attacks import AttackTrainConfig, poison_training_set, train_badnet
from inoculab.data import StreamItem, make_fixture, split_dataset
from inoculab.nncore import architecture, build_model, checkpoint_from_model
from inoculab.triggers import poison_preset

GOLDEN = Path(__file__).parent / "golden"

FIXTURE_COUNTS = (100, 40, 60)


def pytest_collection_modifyitems(config, items):
    # Настольные прогоны на реальных датасетах только по явному запросу
    if os.getenv("INOCULAB_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set INOCULAB_SLOW=1 to run slow tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_out(tmp_path, monkeypatch):
    monkeypatch.delenv("INOCULAB_DB_URL", raising=False)
    monkeypatch.setattr(settings, "OUT_ROOT", tmp_path / "runs")
    return tmp_path / "runs"


@pytest.fixture(scope="session")
def fixture_ds():
    return make_fixture()


@pytest.fixture(scope="session")
def splits(fixture_ds):
    return split_dataset(fixture_ds, FIXTURE_COUNTS, seed=0)


@pytest.fixture(scope="session")
def fixture_spec():
    return poison_preset("fixture-patch", (16, 16, 1), 2)


@pytest.fixture(scope="session")
def attack_cfg():
    return AttackTrainConfig(poison_fraction=0.2, epochs=3, batch_size=32, learning_rate=1e-3)


@pytest.fixture(scope="session")
def tiny_badnet(splits, fixture_spec, attack_cfg):
    poisoned = poison_training_set(splits.train, fixture_spec, attack_cfg, np.random.default_rng(0))
    return train_badnet("mnist-cnn", poisoned, attack_cfg)


@pytest.fixture(scope="session")
def constant_checkpoint():
    """Фабрика чекпоинтов, которые всегда предсказывают заданный класс."""

    def make(label: int, role: str = "badnet", arch_id: str = "mnist-cnn", shape=(16, 16, 1), num_classes: int = 2):
        model = build_model(architecture(arch_id, shape, num_classes), seed=0)
        last = model.head[-1]
        with torch.no_grad():
            last.weight.zero_()
            last.bias.zero_()
            last.bias[label] = 10.0
        return checkpoint_from_model(model, role=role, seed=0, config_hash=f"constant-{label}")

    return make


@pytest.fixture
def clean_stream(splits):
    def make(length: int):
        test = splits.test
        return [
            StreamItem(image=test.images[i % len(test)], is_poisoned=False, clean_label=int(test.labels[i % len(test)]))
            for i in range(length)
        ]

    return make


@pytest.fixture(scope="session")
def gotham_probes():
    return json.loads((GOLDEN / "pseudo_gotham_probe.json").read_text())["probes"]
