import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from normtta.augment import (AUGMENTATION_SETS, KINDS, TransformSpec, apply_transform, resolve_set,
                             transform_batch)

windows = arrays(np.float64, st.tuples(st.integers(2, 20), st.integers(1, 4)),
                 elements=st.floats(-100, 100, allow_nan=False))


def test_examples():
    x = np.random.default_rng(0).normal(size=(8, 3))
    np.testing.assert_array_equal(apply_transform(x, TransformSpec("scale", factor=1.0)), x)
    np.testing.assert_array_equal(apply_transform(x, TransformSpec("jitter", jitter_frac=0.0)), x)
    np.testing.assert_array_equal(apply_transform(x, TransformSpec("cutout", cutout_len=0)), x)
    w = np.array([[1.0], [2.0], [3.0], [4.0]])
    np.testing.assert_array_equal(apply_transform(w, TransformSpec("time_shift", shift=1)).ravel(), [1, 1, 2, 3])
    np.testing.assert_array_equal(apply_transform(w, TransformSpec("time_shift", shift=-1)).ravel(), [2, 3, 4, 4])


@pytest.mark.parametrize("kwargs", [
    {"kind": "mixup"}, {"kind": "scale", "scale_range": 0.1}, {"kind": "jitter", "jitter_frac": 0.05},
    {"kind": "time_shift", "max_shift": 2}, {"kind": "cutout", "max_cutout": 6},
    {"kind": "scale", "factor": 1.2}, {"kind": "time_shift", "shift": 3}, {"kind": "cutout", "cutout_len": 9},
])
def test_out_of_range_specs_rejected(kwargs):
    with pytest.raises(ValueError):
        TransformSpec(**kwargs)


def test_non_finite_window_rejected():
    with pytest.raises(ValueError):
        apply_transform([[np.nan]], TransformSpec("scale"))


def test_cutout_fills_a_short_span_with_the_window_mean():
    x = np.arange(20.0).reshape(10, 2)
    y = apply_transform(x, TransformSpec("cutout", cutout_len=3, cutout_start=4))
    np.testing.assert_array_equal(y[4:7], np.tile(x.mean(axis=0), (3, 1)))
    np.testing.assert_array_equal(np.delete(y, [4, 5, 6], axis=0), np.delete(x, [4, 5, 6], axis=0))
    for seed in range(30):
        z = apply_transform(x, TransformSpec("cutout"), np.random.default_rng(seed))
        changed = np.flatnonzero((z != x).any(axis=1))
        assert len(changed) <= 5
        if len(changed):
            assert changed[-1] - changed[0] + 1 <= 5


def test_jitter_scales_with_training_std():
    x = np.zeros((20000, 2))
    y = apply_transform(x, TransformSpec("jitter"), np.random.default_rng(0), train_std=[1.0, 10.0])
    np.testing.assert_allclose(y.std(axis=0), [0.01, 0.1], rtol=0.03)


@given(windows, st.sampled_from(KINDS), st.integers(0, 2**32 - 1))
def test_shape_and_seed_determinism(x, kind, seed):
    spec = TransformSpec(kind)
    a = apply_transform(x, spec, np.random.default_rng(seed))
    b = apply_transform(x, spec, np.random.default_rng(seed))
    assert a.shape == x.shape
    np.testing.assert_array_equal(a, b)


@given(windows, st.integers(0, 2**32 - 1))
def test_scale_is_bounded(x, seed):
    y = apply_transform(x, TransformSpec("scale"), np.random.default_rng(seed))
    assert np.abs(y - x).max() <= 0.05 * np.abs(x).max() + 1e-12


@given(windows, st.sampled_from([-1, 0, 1]))
def test_time_shift_keeps_order(x, s):
    y = apply_transform(x, TransformSpec("time_shift", shift=s))
    if s == 1:
        np.testing.assert_array_equal(y[1:], x[:-1])
    elif s == -1:
        np.testing.assert_array_equal(y[:-1], x[1:])
    else:
        np.testing.assert_array_equal(y, x)


def test_batch_transform_reads_only_its_window():
    rng = np.random.default_rng(0)
    series = rng.normal(size=(100, 2))
    ends = np.array([30, 50, 70])
    win = np.stack([series[e - 15:e + 1] for e in ends])
    a = transform_batch(win, KINDS, np.random.default_rng(1))
    tampered = series.copy()
    tampered[:15] = 1e6
    tampered[71:] = -1e6
    win2 = np.stack([tampered[e - 15:e + 1] for e in ends])
    b = transform_batch(win2, KINDS, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_batch_transform_draws_per_window():
    x = np.ones((50, 8, 1))
    y = transform_batch(x, ("scale",), np.random.default_rng(0))
    factors = y[:, 0, 0]
    assert len(np.unique(factors)) == 50
    assert (np.abs(factors - 1) <= 0.05).all()
    np.testing.assert_array_equal(y, factors[:, None, None] * x)


def test_batch_transform_does_not_mutate_input():
    x = np.random.default_rng(0).normal(size=(4, 8, 2))
    keep = x.copy()
    transform_batch(x, KINDS, np.random.default_rng(0))
    np.testing.assert_array_equal(x, keep)


def test_augmentation_sets():
    assert resolve_set("scale+jitter") == ("scale", "jitter")
    assert set(AUGMENTATION_SETS) >= {"scale", "scale+jitter", "scale+jitter+cutout"}
    assert resolve_set(["cutout"]) == ("cutout",)
    with pytest.raises(ValueError):
        resolve_set("strong")
    with pytest.raises(ValueError):
        resolve_set(["mixup"])
