import numpy as np
import pytest

from fqpack.pruner import PruneMask, apply_mask, prune_by_magnitude


def test_two_smallest_magnitudes_pruned():
    mask = prune_by_magnitude(np.array([0.1, -0.5, 0.05, 2.0]), 0.5)
    assert mask.mask.tolist() == [0, 1, 0, 1]
    assert mask.sparsity == 0.5


def test_target_zero_keeps_everything():
    mask = prune_by_magnitude(np.array([1.0, 2.0, 3.0]), 0.0)
    assert mask.mask.tolist() == [1, 1, 1]
    assert mask.sparsity == 0.0


def test_ties_break_by_lower_index():
    mask = prune_by_magnitude(np.array([1.0, -1.0, 1.0, -1.0]), 0.5)
    assert mask.mask.tolist() == [0, 0, 1, 1]


def test_target_one_rejected():
    with pytest.raises(ValueError):
        prune_by_magnitude(np.array([1.0, 2.0]), 1.0)
    with pytest.raises(ValueError):
        prune_by_magnitude(np.array([1.0, 2.0]), -0.1)


def test_floor_of_target_count():
    # floor(0.5 * 5) = 2 weights pruned
    mask = prune_by_magnitude(np.arange(1.0, 6.0), 0.5)
    assert int((mask.mask == 0).sum()) == 2
    assert abs(mask.sparsity - 0.5) <= 1.0 / 5


def test_apply_mask_examples():
    mask = PruneMask(np.array([1, 0], dtype=np.uint8))
    assert apply_mask(np.array([3.0, -2.0]), mask).tolist() == [3.0, 0.0]
    ones = PruneMask(np.ones(3, dtype=np.uint8))
    w = np.array([1.0, 2.0, 3.0])
    assert np.array_equal(apply_mask(w, ones), w)
    zeros = PruneMask(np.zeros(3, dtype=np.uint8))
    assert np.all(apply_mask(w, zeros) == 0.0)


def test_apply_mask_length_mismatch():
    with pytest.raises(ValueError):
        apply_mask(np.array([1.0, 2.0, 3.0]), PruneMask(np.array([1, 0], dtype=np.uint8)))


def test_mask_shape_follows_weights():
    w = np.random.default_rng(0).normal(size=(3, 4, 5))
    mask = prune_by_magnitude(w, 0.3)
    assert mask.mask.shape == (60,)
    pruned = apply_mask(w, mask)
    assert pruned.shape == w.shape
    assert int((pruned == 0).sum()) >= int(0.3 * 60)


def test_monotone_in_target_sparsity():
    rng = np.random.default_rng(11)
    for _ in range(20):
        w = rng.normal(size=rng.integers(5, 200))
        previous = np.zeros(w.size, dtype=bool)
        for target in (0.1, 0.25, 0.5, 0.75, 0.9):
            pruned = prune_by_magnitude(w, target).mask == 0
            assert np.all(previous <= pruned)  # pruned set only grows
            previous = pruned


def test_survivors_dominate_pruned():
    rng = np.random.default_rng(12)
    for _ in range(20):
        w = rng.normal(size=100)
        mask = prune_by_magnitude(w, 0.4)
        kept = np.abs(w[mask.mask == 1])
        dropped = np.abs(w[mask.mask == 0])
        assert kept.min() >= dropped.max() or np.isclose(kept.min(), dropped.max())
