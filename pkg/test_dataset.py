#!/usr/bin/env python3
"""
Tests for the synthetic texture dataset and the on-disk dataset store
"""

import numpy as np
import pytest

from src.core.exceptions import DatasetError
from src.core.models import Dataset
from src.infrastructure.dataset_store import FileDatasetStore
from src.services import dataset_service
from src.services.probe_service import accuracy_on_features, fit_linear


def test_generation_is_deterministic():
    a = dataset_service.generate_synthetic(3, 4, 16, seed=11)
    b = dataset_service.generate_synthetic(3, 4, 16, seed=11)
    c = dataset_service.generate_synthetic(3, 4, 16, seed=12)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.images, c.images)


def test_generation_counts_and_range():
    ds = dataset_service.generate_synthetic(6, 5, 32, seed=1)
    assert ds.images.shape == (30, 32, 32, 3)
    assert ds.class_counts().tolist() == [5] * 6
    assert ds.images.min() >= 0.0 and ds.images.max() <= 255.0
    np.testing.assert_array_equal(ds.images, np.floor(ds.images))


def test_image_depends_only_on_class_and_index():
    small = dataset_service.generate_synthetic(2, 2, 16, seed=5)
    large = dataset_service.generate_synthetic(2, 4, 16, seed=5)
    np.testing.assert_array_equal(small.images[2], large.images[4])


def test_class_table_extends_past_base_six():
    specs = dataset_service.class_specs(8)
    assert [s.name for s in specs[:2]] == ["blobs", "stripes"]
    assert specs[6].kind == specs[0].kind
    assert specs[6].name != specs[0].name
    assert specs[6].scale > specs[0].scale


def test_generation_rejects_degenerate_requests():
    with pytest.raises(DatasetError):
        dataset_service.generate_synthetic(1, 5, 16, seed=0)
    with pytest.raises(DatasetError):
        dataset_service.generate_synthetic(3, 0, 16, seed=0)


def test_split_is_stratified_and_disjoint():
    ds = dataset_service.generate_synthetic(3, 10, 16, seed=2)
    train, test = dataset_service.split(ds, 0.5, seed=2)
    assert train.class_counts().tolist() == [5, 5, 5]
    assert test.class_counts().tolist() == [5, 5, 5]
    train_rows = {img.tobytes() for img in train.images}
    test_rows = {img.tobytes() for img in test.images}
    assert not train_rows & test_rows
    assert len(train_rows | test_rows) == 30


def test_split_rejects_bad_inputs():
    ds = dataset_service.generate_synthetic(2, 1, 16, seed=0)
    with pytest.raises(DatasetError):
        dataset_service.split(ds, 0.5, seed=0)
    with pytest.raises(DatasetError):
        dataset_service.split(dataset_service.generate_synthetic(2, 4, 16, seed=0), 1.0, seed=0)


def test_train_test_gives_requested_counts(tiny_data):
    train, test = tiny_data
    assert train.class_counts().tolist() == [12, 12, 12]
    assert test.class_counts().tolist() == [6, 6, 6]
    assert (train.split, test.split) == ("train", "test")


def test_balanced_subset_quotas(tiny_data):
    train, _ = tiny_data
    subset = dataset_service.balanced_subset(train, 7, seed=0)
    assert subset.class_counts().tolist() == [3, 2, 2]
    again = dataset_service.balanced_subset(train, 7, seed=0)
    np.testing.assert_array_equal(subset.images, again.images)


def test_balanced_subset_rejects_oversized_quota(tiny_data):
    train, _ = tiny_data
    with pytest.raises(DatasetError):
        dataset_service.balanced_subset(train, 3 * 13, seed=0)


def test_palette_shift_moves_colors():
    base = dataset_service.generate_synthetic(2, 3, 16, seed=4)
    shifted = dataset_service.generate_synthetic(2, 3, 16, seed=4, palette_shift=40.0)
    red_gain = shifted.images[..., 0].mean() - base.images[..., 0].mean()
    green_gain = shifted.images[..., 1].mean() - base.images[..., 1].mean()
    assert red_gain > 20.0
    assert green_gain < 0.0


def test_dataset_rejects_mismatched_labels():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 4, 4, 3)), np.zeros(3), ("a", "b"))


def test_dataset_store_round_trip(tmp_path, tiny_data):
    train, test = tiny_data
    store = FileDatasetStore()
    manifest = store.save_dataset([train, test], tmp_path)
    assert manifest.read_text().splitlines()[0] == "path,label,split"
    loaded = store.load_dataset(tmp_path, "test")
    np.testing.assert_array_equal(loaded.images, test.images)
    np.testing.assert_array_equal(loaded.labels, test.labels)
    assert loaded.class_names == test.class_names


def test_dataset_store_rejects_unknown_split(tmp_path, tiny_data):
    store = FileDatasetStore()
    store.save_dataset([tiny_data[1]], tmp_path)
    with pytest.raises(DatasetError):
        store.load_dataset(tmp_path, "validation")


@pytest.mark.slow
def test_classes_are_separable_in_pixel_space():
    train, test = dataset_service.train_test(6, 100, 50, 64, seed=7)
    probe = fit_linear(dataset_service.flatten_pixels(train.images), train.labels, 6, epochs=200, lr=1e-2, seed=0)
    assert accuracy_on_features(probe, dataset_service.flatten_pixels(test.images), test.labels) >= 0.70
