import itertools
from collections import Counter

import numpy as np
import pytest

from hsi_src.errors import BoundsError, InvalidRangeError, ShapeError
from hsi_src.tensor_core import (
    DTYPE_TRAIN,
    DTYPE_VERIFY,
    SeededRng,
    as_precision,
    derive_seed,
    rng_shuffle,
    rng_uniform,
    tensor_create,
    tensor_slice,
)


def test_create_constant_and_explicit_values():
    t = tensor_create((2, 3, 4), 1.5)
    assert t.shape == (2, 3, 4)
    assert t.dtype == DTYPE_TRAIN
    assert np.all(t == 1.5)

    v = tensor_create((2, 3), [[1, 2, 3], [4, 5, 6]], dtype=DTYPE_VERIFY)
    assert v.dtype == np.float64
    assert v[1, 0] == 4.0
    assert v.flags["C_CONTIGUOUS"]


@pytest.mark.parametrize("shape", [(), (0, 3), (2, -1)])
def test_create_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        tensor_create(shape)


def test_create_rejects_wrong_value_count():
    with pytest.raises(ShapeError):
        tensor_create((2, 2), [1, 2, 3])


def test_slice_copies_half_open_block():
    t = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    s = tensor_slice(t, [(0, 1), (1, 3), (2, 4)])
    assert s.shape == (1, 2, 2)
    np.testing.assert_array_equal(s, t[0:1, 1:3, 2:4])
    s[...] = -1
    assert t.min() == 0


def test_slice_errors():
    t = np.zeros((2, 3))
    with pytest.raises(ShapeError):
        tensor_slice(t, [(0, 1)])
    with pytest.raises(BoundsError):
        tensor_slice(t, [(0, 1), (2, 4)])
    with pytest.raises(BoundsError):
        tensor_slice(t, [(1, 1), (0, 3)])


def test_equal_seeds_equal_streams():
    a, b = SeededRng(42), SeededRng(42)
    np.testing.assert_array_equal(a.uniform(0, 1, size=100), b.uniform(0, 1, size=100))
    np.testing.assert_array_equal(a.shuffle(50), b.shuffle(50))
    assert not np.array_equal(SeededRng(1).uniform(size=10), SeededRng(2).uniform(size=10))


def test_uniform_range_and_errors():
    rng = SeededRng(0)
    values = rng.uniform(-2.0, 3.0, size=10_000)
    assert values.min() >= -2.0 and values.max() < 3.0
    assert abs(values.mean() - 0.5) < 0.1
    assert -2.0 <= rng_uniform(rng, -2.0, 3.0) < 3.0
    with pytest.raises(InvalidRangeError):
        rng.uniform(1.0, 1.0)
    with pytest.raises(InvalidRangeError):
        rng.integers(3, 2)


def test_shuffle_is_a_uniform_permutation():
    rng = SeededRng(5)
    perm = rng_shuffle(rng, 20)
    assert sorted(perm.tolist()) == list(range(20))
    assert rng.shuffle(0).size == 0
    assert rng_shuffle(rng, 1).tolist() == [0]

    trials = 100_000
    counts = Counter(tuple(rng_shuffle(rng, 4).tolist()) for _ in range(trials))
    assert set(counts) == set(itertools.permutations(range(4)))
    for n in counts.values():
        assert abs(n / trials - 1 / 24) <= 0.005


def test_uniform_unit_interval_mean():
    rng = SeededRng(17)
    draws = np.array([rng_uniform(rng, 0.0, 1.0) for _ in range(100_000)])
    assert draws.min() >= 0.0 and draws.max() < 1.0
    assert abs(draws.mean() - 0.5) < 0.01


def test_fork_is_independent_and_does_not_advance_parent():
    parent = SeededRng(9)
    reference = SeededRng(9).uniform(size=5)
    child = parent.fork(1, 2)
    np.testing.assert_array_equal(parent.uniform(size=5), reference)
    assert child.seed == derive_seed(9, 1, 2)
    assert parent.fork(1).seed != parent.fork(2).seed


def test_derive_seed_mixes_every_key():
    seeds = {derive_seed(0, f, r) for f in range(5) for r in range(5)}
    assert len(seeds) == 25
    assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)
    assert 0 <= derive_seed(-1, 3) < 2 ** 64


def test_as_precision_avoids_copies():
    a = np.ones(3, dtype=np.float64)
    assert as_precision(a, np.float64) is a
    assert as_precision(a, None) is a
    assert as_precision(a, np.float32).dtype == np.float32
