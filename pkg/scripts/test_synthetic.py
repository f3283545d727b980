"""Synthetic shapes dataset generator."""

import numpy as np
import pytest

from src.levit_unet.errors import InputError
from src.levit_unet.synthetic import (
    SHAPES,
    generate_synthetic_dataset,
    grid_side,
    radius_bounds,
    shape_for_class,
    synthetic_slice,
)


def test_every_foreground_class_appears_once_per_slice():
    record = synthetic_slice("c", 0, 64, 5, np.random.default_rng(0))
    assert record.image.dtype == np.float32 and record.label.dtype == np.uint8
    assert set(np.unique(record.label)) == {0, 1, 2, 3, 4}
    assert record.image.min() >= 0.0 and record.image.max() <= 1.0


def test_class_intensities_are_separated():
    record = synthetic_slice("c", 0, 96, 3, np.random.default_rng(1))
    means = [record.image[record.label == c].mean() for c in range(3)]
    assert means[0] < means[1] < means[2]
    assert means[1] == pytest.approx(0.5, abs=0.05)


def test_shapes_cycle_over_classes():
    assert [shape_for_class(c) for c in range(1, 5)] == list(SHAPES) + [SHAPES[0]]


def test_dataset_is_reproducible_and_split(tmp_path):
    a = generate_synthetic_dataset(tmp_path / "a", n_cases=2, slices_per_case=2, size=32, num_classes=3, seed=9, test_cases=1)
    b = generate_synthetic_dataset(tmp_path / "b", n_cases=2, slices_per_case=2, size=32, num_classes=3, seed=9, test_cases=1)
    assert list(a.cases("train")) == ["case0000", "case0001"]
    assert list(a.cases("test")) == ["case0002"]
    for ea, eb in zip(a.entries, b.entries):
        assert ea.image_path.read_bytes() == eb.image_path.read_bytes()
        assert ea.label_path.read_bytes() == eb.label_path.read_bytes()
    c = generate_synthetic_dataset(tmp_path / "c", n_cases=2, slices_per_case=2, size=32, num_classes=3, seed=10, test_cases=1)
    assert c.entries[0].image_path.read_bytes() != a.entries[0].image_path.read_bytes()


def test_too_many_classes_for_the_slice_size_is_reported():
    with pytest.raises(InputError, match="too small to place 79 regions"):
        synthetic_slice("c", 0, 16, 80, np.random.default_rng(0))


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(size=8)])
def test_invalid_slice_parameters(kwargs):
    args = dict(case_id="c", slice_index=0, size=32, num_classes=3, rng=np.random.default_rng(0))
    args.update(kwargs)
    with pytest.raises(InputError):
        synthetic_slice(**args)


def test_dataset_needs_a_case(tmp_path):
    with pytest.raises(InputError):
        generate_synthetic_dataset(tmp_path, n_cases=0, slices_per_case=1, size=32, num_classes=3)


@pytest.mark.parametrize("size", [64, 128, 224])
def test_nine_classes_always_fit(size):
    for seed in range(25):
        record = synthetic_slice("c", 0, size, 9, np.random.default_rng([0, seed, 0]))
        counts = np.bincount(record.label.ravel(), minlength=9)
        assert np.all(counts[1:] >= 0.01 * size * size), (seed, counts)


@pytest.mark.parametrize("num_classes", [2, 3, 5, 7, 9, 14])
def test_radius_bounds_fit_inside_a_cell(num_classes):
    for size in (32, 64, 128, 224):
        low, high = radius_bounds(size, num_classes)
        side = size / grid_side(num_classes)
        assert 0 < low <= high <= size / 5.0
        assert 2 * high + 1 <= side


def test_radii_keep_the_default_range_for_few_classes():
    assert radius_bounds(128, 3) == pytest.approx((12.8, 25.6))
