import numpy as np
import pytest
import torch
import torch.nn.functional as F

from inoculab.errors import ArchitectureError, CheckpointError, ShapeError, TrainingError
from inoculab.nncore import (
    Preprocessing,
    TrainConfig,
    architecture,
    build_model,
    count_parameters,
    fit_arrays,
    load_checkpoint,
    predict,
    predict_labels,
    save_checkpoint,
    train,
)


def test_cla_cnn_parameter_count():
    model = build_model(architecture("cla-cnn", (28, 28, 1), 10), seed=0)
    assert count_parameters(model) == 40430


def test_architectures_build_for_their_datasets():
    for arch_id, shape in (("mnist-cnn", (28, 28, 1)), ("cifar-cnn", (32, 32, 3)), ("mnist-cnn", (16, 16, 1))):
        model = build_model(architecture(arch_id, shape, 10), seed=0)
        logits = model(torch.zeros((2,) + shape))
        assert logits.shape == (2, 10)


def test_architecture_rejects_vanishing_input():
    with pytest.raises(ArchitectureError):
        architecture("mnist-cnn", (8, 8, 1), 10)
    with pytest.raises(ArchitectureError):
        architecture("resnet", (28, 28, 1), 10)


def test_same_seed_same_weights():
    arch = architecture("mnist-cnn", (16, 16, 1), 2)
    a, b = build_model(arch, seed=5), build_model(arch, seed=5)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name


def test_gradient_matches_finite_difference():
    model = build_model(architecture("mnist-cnn", (16, 16, 1), 2), seed=0).double()
    x = torch.as_tensor(np.random.default_rng(0).uniform(0, 255, size=(4, 16, 16, 1)))
    y = torch.tensor([0, 1, 1, 0])
    bias = model.head[-1].bias

    loss = F.cross_entropy(model(x), y)
    loss.backward()
    analytic = bias.grad[0].item()

    eps = 1e-6
    with torch.no_grad():
        bias[0] += eps
        plus = F.cross_entropy(model(x), y).item()
        bias[0] -= 2 * eps
        minus = F.cross_entropy(model(x), y).item()
        bias[0] += eps
    assert analytic == pytest.approx((plus - minus) / (2 * eps), rel=1e-4, abs=1e-8)


def test_predict_returns_distributions(tiny_badnet, splits):
    labels, probs = predict(tiny_badnet, splits.test.images)
    assert probs.shape == (len(splits.test), 2)
    assert np.allclose(probs.sum(axis=1), 1.0)
    assert np.array_equal(labels, probs.argmax(axis=1))
    empty_labels, empty_probs = predict(tiny_badnet, splits.test.images[:0])
    assert empty_labels.shape == (0,) and empty_probs.shape == (0, 2)


def test_predict_rejects_wrong_shape(tiny_badnet):
    with pytest.raises(ShapeError):
        predict_labels(tiny_badnet, np.zeros((2, 28, 28, 1), dtype=np.uint8))


def test_checkpoint_roundtrip_keeps_predictions(tmp_path, tiny_badnet, splits):
    path = save_checkpoint(tiny_badnet, tmp_path / "bd.nnckpt")
    assert path.with_suffix(".json").exists()
    loaded = load_checkpoint(path, expected_arch=tiny_badnet.arch)
    assert loaded.id == tiny_badnet.id
    assert loaded.meta.role == "badnet"
    assert np.array_equal(predict_labels(loaded, splits.test.images), predict_labels(tiny_badnet, splits.test.images))


def test_checkpoint_errors(tmp_path, tiny_badnet):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.nnckpt")
    corrupt = tmp_path / "corrupt.nnckpt"
    corrupt.write_bytes(b"\x00garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(corrupt)
    path = save_checkpoint(tiny_badnet, tmp_path / "bd.nnckpt")
    other = architecture("cla-cnn", (16, 16, 1), 2)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_arch=other)


def test_checkpoint_id_depends_on_meta(tiny_badnet):
    goodnet = tiny_badnet.with_meta(role="goodnet")
    assert goodnet.id != tiny_badnet.id
    assert goodnet.with_meta(role="badnet").id == tiny_badnet.id
    with pytest.raises(CheckpointError):
        tiny_badnet.with_meta(role="student")


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=0.001, lr_schedule=((24, 0.01), (42, 0.005)))
    assert cfg.initial_learning_rate == 0.01
    assert [cfg.lr_for_epoch(e) for e in (1, 24, 25, 42, 43, 60)] == [0.01, 0.01, 0.005, 0.005, 0.001, 0.001]
    with pytest.raises(TrainingError):
        TrainConfig(lr_schedule=((42, 0.01), (24, 0.005)))
    with pytest.raises(TrainingError):
        TrainConfig(optimizer_id="rmsprop")


def test_standardize_needs_statistics():
    with pytest.raises(ArchitectureError):
        Preprocessing("standardize")
    model = build_model(architecture("cifar-cnn", (32, 32, 3), 10), seed=0,
                        preprocessing=Preprocessing("standardize", (0.5, 0.5, 0.5), (0.25, 0.25, 0.25)))
    out = model.preprocess(torch.full((1, 32, 32, 3), 255.0))
    assert torch.allclose(out, torch.full_like(out, 2.0))


def test_train_lowers_loss(splits):
    model = build_model(architecture("mnist-cnn", (16, 16, 1), 2), seed=0)
    ckpt = train(model, splits.train, TrainConfig(epochs=3, batch_size=32, learning_rate=1e-3), role="clean")
    losses = ckpt.meta.train_losses
    assert len(losses) == 3
    assert losses[-1] < losses[0]
    with pytest.raises(ShapeError):
        train(build_model(architecture("mnist-cnn", (28, 28, 1), 2), seed=0), splits.train, TrainConfig(epochs=1))


def test_training_is_deterministic_for_a_seed(splits):
    arch = architecture("mnist-cnn", (16, 16, 1), 2)
    cfg = TrainConfig(epochs=2, batch_size=32, learning_rate=1e-3, seed=4)
    first = train(build_model(arch, seed=4), splits.train, cfg, role="clean")
    second = train(build_model(arch, seed=4), splits.train, cfg, role="clean")
    assert first.id == second.id
    assert first.meta.train_losses == second.meta.train_losses
    assert all(torch.equal(first.state[k], v) for k, v in second.state.items())

    other = train(build_model(arch, seed=5), splits.train, TrainConfig(epochs=2, batch_size=32, seed=5), role="clean")
    assert other.id != first.id


def test_preprocessing_is_part_of_the_model(splits):
    arch = architecture("mnist-cnn", (16, 16, 1), 2)
    # Кратные 0.25 значения переживают *255 и /255 без округления
    raw = np.round(splits.train.images[:64].astype(np.float64) / 64.0) / 4.0
    labels = splits.train.labels[:64]
    cfg = TrainConfig(epochs=1, batch_size=16, learning_rate=1e-3, seed=2)

    scaled = build_model(arch, seed=2, preprocessing=Preprocessing("scale-1/255"))
    fit_arrays(scaled, raw * 255.0, labels, cfg)
    plain = build_model(arch, seed=2, preprocessing=Preprocessing("identity"))
    fit_arrays(plain, raw, labels, cfg)

    for (name, a), b in zip(scaled.state_dict().items(), plain.state_dict().values()):
        assert torch.allclose(a, b, atol=1e-6, rtol=0), name
    assert np.array_equal(predict_labels(scaled, raw * 255.0), predict_labels(plain, raw))
