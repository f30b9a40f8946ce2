import numpy as np
import pytest

from muscle.data import (CLASS_NAMES, class_coverage, generate_dataset, labels_from_mask, load_split, save_split,
                         split_dataset)


@pytest.fixture(scope="module")
def scenes():
    return generate_dataset(40, seed=3)


def test_same_seed_is_bitwise_identical(scenes):
    again = generate_dataset(40, seed=3)
    for a, b in zip(scenes, again):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.gt_mask.tobytes() == b.gt_mask.tobytes()
        assert np.array_equal(a.labels, b.labels)


def test_different_seed_differs(scenes):
    assert generate_dataset(1, seed=4)[0].image.tobytes() != scenes[0].image.tobytes()


def test_scene_invariants(scenes):
    for s in scenes:
        assert s.image.shape == (3, 64, 64) and s.gt_mask.shape == (64, 64)
        assert s.image.min() >= 0 and s.image.max() <= 1
        np.testing.assert_array_equal(labels_from_mask(s.gt_mask), s.labels)
        assert 1 <= s.labels.sum() <= 3
        assert set(np.unique(s.gt_mask)) <= set(range(len(CLASS_NAMES)))


def test_n_must_be_positive():
    with pytest.raises(ValueError):
        generate_dataset(0, seed=1)


def test_split_is_80_20(scenes):
    train, val = split_dataset(scenes)
    assert len(train) == 32 and len(val) == 8
    assert [s.scene_id for s in train + val] == [s.scene_id for s in scenes]


@pytest.mark.slow
def test_class_coverage_over_1000_scenes():
    cov = class_coverage(generate_dataset(1000, seed=1))
    assert set(cov) == set(CLASS_NAMES[1:])
    assert all(v >= 0.10 for v in cov.values())


def test_positive_pairs_common(scenes):
    keys = [s.label_key for s in scenes]
    assert len(set(keys)) < len(keys) / 2


def test_disk_roundtrip(tmp_path, scenes):
    save_split(scenes[:5], tmp_path)
    back = load_split(tmp_path)
    for a, b in zip(scenes[:5], back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.gt_mask, b.gt_mask)
        np.testing.assert_array_equal(a.labels, b.labels)
    assert all(s.gt_mask is None for s in load_split(tmp_path, with_masks=False))
