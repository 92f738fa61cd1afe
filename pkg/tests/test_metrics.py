import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dinobench.errors import ConfigError, DataError
from dinobench.metrics import (balanced_accuracy, confusion_matrix, filter_250plus, row_normalize,
                               sample_n_per_class, stratified_split)


def test_split_exact_rounding():
    y = np.array([0] * 10 + [1] * 20)
    tr, te = stratified_split(y, 0.3, seed=0)
    assert np.bincount(y[te]).tolist() == [3, 6]
    assert np.bincount(y[tr]).tolist() == [7, 14]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(2, 40), min_size=2, max_size=8), st.integers(0, 10_000))
def test_split_partition_and_proportion(sizes, seed):
    y = np.concatenate([np.full(n, c) for c, n in enumerate(sizes)])
    tr, te = stratified_split(y, 0.3, seed)
    assert len(np.intersect1d(tr, te)) == 0
    assert np.array_equal(np.sort(np.concatenate([tr, te])), np.arange(len(y)))
    for c, n in enumerate(sizes):
        assert abs(np.sum(y[te] == c) - 0.3 * n) <= 1.0
    assert abs(len(te) - round(0.3 * len(y))) <= 1


def test_split_deterministic_and_seed_dependent():
    y = np.repeat(np.arange(3), 30)
    a = stratified_split(y, 0.3, 5)
    b = stratified_split(y, 0.3, 5)
    c = stratified_split(y, 0.3, 6)
    assert all(np.array_equal(x, z) for x, z in zip(a, b))
    assert not np.array_equal(a[1], c[1])


def test_split_singleton_class_goes_to_train(caplog):
    y = np.array([0, 0, 0, 0, 1])
    tr, te = stratified_split(y, 0.3, 0)
    assert 4 in tr and 4 not in te
    assert "kept wholly" in caplog.text


def test_split_errors():
    with pytest.raises(DataError):
        stratified_split([], 0.3)
    with pytest.raises(ConfigError):
        stratified_split([0, 1], 1.0)


def test_sample_n_per_class_caps_small_classes():
    y = np.array([0] * 5 + [1] * 100)
    idx = sample_n_per_class(np.arange(len(y)), y, 10, seed=1)
    assert np.bincount(y[idx]).tolist() == [5, 10]
    assert len(np.unique(idx)) == len(idx)


def test_sample_n_per_class_all_when_large():
    y = np.repeat(np.arange(3), [4, 7, 2])
    idx = sample_n_per_class(np.arange(len(y)), y, 50, seed=3)
    assert np.array_equal(idx, np.arange(len(y)))
    with pytest.raises(ConfigError):
        sample_n_per_class(np.arange(3), y, 0, 0)


def test_sample_respects_index_subset():
    y = np.repeat(np.arange(2), 20)
    subset = np.arange(0, 40, 2)
    idx = sample_n_per_class(subset, y, 3, seed=0)
    assert set(idx) <= set(subset)


def test_balanced_accuracy_hand_value():
    assert balanced_accuracy([0, 0, 1, 1], [0, 0, 1, 0]) == pytest.approx(0.75, abs=1e-15)
    assert balanced_accuracy([0, 1, 2], [0, 1, 2]) == 1.0


def test_balanced_accuracy_constant_predictor():
    y = np.repeat(np.arange(5), 7)
    assert balanced_accuracy(y, np.zeros_like(y)) == pytest.approx(0.2)


def test_balanced_accuracy_matches_confusion_diagonal():
    rng = np.random.default_rng(0)
    for _ in range(100):
        C = int(rng.integers(2, 7))
        n = int(rng.integers(C, 200))
        t = rng.integers(0, C, n)
        t[:C] = np.arange(C)
        p = rng.integers(0, C, n)
        cm = confusion_matrix(t, p, C)
        diag = float(np.mean(np.diag(row_normalize(cm))))
        recalls = [np.sum((t == c) & (p == c)) / np.sum(t == c) for c in range(C)]
        assert abs(balanced_accuracy(t, p) - diag) < 1e-12
        assert abs(balanced_accuracy(t, p) - np.mean(recalls)) < 1e-12


def test_balanced_accuracy_label_permutation_invariant():
    rng = np.random.default_rng(1)
    t = rng.integers(0, 4, 80)
    p = rng.integers(0, 4, 80)
    perm = rng.permutation(4)
    assert balanced_accuracy(t, p) == pytest.approx(balanced_accuracy(perm[t], perm[p]), abs=1e-15)


def test_balanced_accuracy_absent_class_warns(caplog):
    assert balanced_accuracy([0, 0, 1], [0, 1, 1], n_classes=3) == pytest.approx(0.75)
    assert "absent" in caplog.text


def test_confusion_matrix_properties():
    t = np.array([0, 1, 2, 2, 1])
    cm = confusion_matrix(t, t, 3)
    assert np.array_equal(cm, np.diag([1, 2, 2]))
    p = np.array([1, 1, 0, 2, 2])
    assert confusion_matrix(t, p, 3).sum() == 5
    with pytest.raises(DataError):
        confusion_matrix([0, 3], [0, 0], 3)


def test_filter_250plus_threshold_and_reindex():
    tr = np.repeat([0, 1, 2], [249, 250, 1000])
    te = np.repeat([0, 1, 2], [5, 6, 7])
    tr_m, te_m, new_tr, new_te, kept = filter_250plus(tr, te)
    assert kept == [1, 2]
    assert tr_m.sum() == 1250 and te_m.sum() == 13
    assert np.array_equal(np.unique(new_tr), [0, 1])
    # order preserving: old 1 -> 0, old 2 -> 1
    assert np.array_equal(new_te, np.repeat([0, 1], [6, 7]))


def test_filter_250plus_configurable_and_error():
    tr = np.repeat([0, 1, 2], [10, 20, 30])
    assert filter_250plus(tr, tr, threshold=20)[4] == [1, 2]
    with pytest.raises(DataError):
        filter_250plus(tr, tr, threshold=25)
