import numpy as np
import pytest

from inoculab.data import (
    DatasetSplits,
    LabeledDataset,
    _read_cache,
    _write_cache,
    build_stream,
    load_dataset,
    resample,
    split_dataset,
    subsample_validation,
)
from inoculab.errors import DataError, SplitError


def test_fixture_is_deterministic(fixture_ds):
    again = load_dataset("synthetic-fixture")
    assert np.array_equal(again.images, fixture_ds.images)
    assert fixture_ds.image_shape == (16, 16, 1)
    assert fixture_ds.class_counts().tolist() == [200, 200]


def test_split_is_per_class_and_disjoint(splits):
    assert splits.train.class_counts().tolist() == [100, 100]
    assert splits.valid.class_counts().tolist() == [40, 40]
    assert splits.stream_test.class_counts().tolist() == [60, 60]
    ids = [set(part.ids.tolist()) for part in (splits.train, splits.valid, splits.stream_test)]
    assert not ids[0] & ids[1] and not ids[0] & ids[2] and not ids[1] & ids[2]


def test_split_same_seed_same_result(fixture_ds, splits):
    again = split_dataset(fixture_ds, (100, 40, 60), seed=0)
    assert np.array_equal(again.valid.ids, splits.valid.ids)
    other = split_dataset(fixture_ds, (100, 40, 60), seed=1)
    assert not np.array_equal(other.valid.ids, splits.valid.ids)


def test_split_needs_enough_samples(fixture_ds):
    with pytest.raises(SplitError) as err:
        split_dataset(fixture_ds, (150, 40, 60), seed=0)
    assert err.value.label == 0
    with pytest.raises(SplitError):
        split_dataset(fixture_ds, (10, 10), seed=0)


def test_stream_and_test_halves(splits, fixture_ds):
    stream_ids = set(splits.stream.ids.tolist())
    test_ids = set(splits.test.ids.tolist())
    assert not stream_ids & test_ids
    assert len(stream_ids) + len(test_ids) == 120
    shared = split_dataset(fixture_ds, (100, 40, 60), seed=0, stream_test_mode="shared")
    assert np.array_equal(shared.stream.ids, shared.test.ids)


def test_subsample_validation(splits):
    half = subsample_validation(splits, 0.5, seed=0)
    assert half.valid.class_counts().tolist() == [20, 20]
    assert half.per_class_counts == (100, 20, 60)
    assert set(half.valid.ids.tolist()) <= set(splits.valid.ids.tolist())
    with pytest.raises(SplitError):
        subsample_validation(splits, 0.01, seed=0)
    with pytest.raises(SplitError):
        subsample_validation(splits, 0.0, seed=0)


def test_stream_poison_count_is_binomial(splits, fixture_spec):
    pool = resample(splits.stream, 5000, seed=3)
    items = build_stream(pool, fixture_spec, 0.2, seed=4)
    poisoned = sum(item.is_poisoned for item in items)
    # 5 стандартных отклонений вокруг 1000
    assert 860 <= poisoned <= 1140
    assert all(item.trigger_index == 0 for item in items if item.is_poisoned)
    assert all(item.trigger_index is None for item in items if not item.is_poisoned)


def test_stream_exact_count_and_extremes(splits, fixture_spec):
    items = build_stream(splits.stream, fixture_spec, 0.25, seed=0, exact_count=True)
    assert sum(item.is_poisoned for item in items) == round(0.25 * len(splits.stream))
    assert not any(item.is_poisoned for item in build_stream(splits.stream, fixture_spec, 0.0, seed=0))
    assert all(item.is_poisoned for item in build_stream(splits.stream, fixture_spec, 1.0, seed=0))
    with pytest.raises(DataError):
        build_stream(splits.stream, fixture_spec, 1.5, seed=0)


def test_resample_draws_with_replacement_when_short(splits):
    small = resample(splits.valid, 10, seed=0)
    assert len(set(small.ids.tolist())) == 10
    big = resample(splits.valid, 500, seed=0)
    assert len(big) == 500
    assert set(big.ids.tolist()) <= set(splits.valid.ids.tolist())


def test_labeled_dataset_validation():
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((3, 4, 4, 1), dtype=np.uint8), np.array([0, 1]), 2, "bad")
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 4, 4, 1), dtype=np.uint8), np.array([0, 2]), 2, "bad")
    with pytest.raises(DataError):
        LabeledDataset(np.zeros((2, 4, 4), dtype=np.uint8), np.array([0, 1]), 2, "bad")


def test_concat_rejects_other_shapes(fixture_ds):
    other = LabeledDataset(np.zeros((2, 8, 8, 1), dtype=np.uint8), np.array([0, 1]), 2, "other")
    with pytest.raises(DataError):
        fixture_ds.concat(other)
    empty = LabeledDataset.empty_like(fixture_ds)
    assert len(fixture_ds.concat(empty)) == len(fixture_ds)


def test_cache_file(tmp_path, fixture_ds):
    path = tmp_path / "canonical.bin"
    _write_cache(path, fixture_ds)
    cached = _read_cache(path, "synthetic-fixture")
    assert np.array_equal(cached.images, fixture_ds.images)
    assert np.array_equal(cached.labels, fixture_ds.labels)
    path.write_bytes(b"not a cache")
    with pytest.raises(DataError):
        _read_cache(path, "synthetic-fixture")


def test_unknown_dataset():
    with pytest.raises(DataError):
        load_dataset("imagenet")
