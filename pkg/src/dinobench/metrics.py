"""Splitting, n-per-class subsampling, balanced accuracy and confusion matrices."""

from __future__ import annotations

import logging
import math
import zlib

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


def _class_rng(seed: int, tag: str, cls: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode()), int(cls)])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels, test_fraction: float = 0.3, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class partition into (train, test) index arrays.

    Class ``c`` contributes ``round(n_c * test_fraction)`` test samples, nudged by
    one for some classes so the total matches ``round(N_eligible * test_fraction)``.
    Classes with fewer than two samples stay entirely in training.
    """
    y = np.asarray(labels)
    if y.size == 0:
        raise DataError("cannot split an empty dataset")
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    classes = np.unique(y)
    members = {int(c): np.flatnonzero(y == c) for c in classes}
    eligible = [c for c, m in members.items() if len(m) >= 2]
    for c, m in members.items():
        if len(m) < 2:
            log.warning("class %d has %d sample(s); kept wholly in the training split", c, len(m))

    ideal = {c: len(members[c]) * test_fraction for c in eligible}
    count = {c: min(max(_round_half_up(ideal[c]), 1), len(members[c]) - 1) for c in eligible}
    target = _round_half_up(sum(ideal.values()))
    diff = target - sum(count.values())
    if diff:
        step = 1 if diff > 0 else -1
        # classes whose rounding moved furthest from the ideal in the needed direction go first
        ranked = sorted(eligible, key=lambda c: (-(ideal[c] - count[c]) * step, c))
        for c in ranked:
            if diff == 0:
                break
            new = count[c] + step
            if 1 <= new <= len(members[c]) - 1 and abs(new - ideal[c]) <= 1.0:
                count[c] = new
                diff -= step

    train, test = [], []
    for c, m in members.items():
        if c not in count:
            train.append(m)
            continue
        perm = _class_rng(seed, "split", c).permutation(m)
        test.append(perm[:count[c]])
        train.append(perm[count[c]:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, dtype=np.intp)
    return cat(train), cat(test)


def sample_n_per_class(indices, labels, n: int, seed: int) -> np.ndarray:
    """Draw ``min(n, n_c)`` of ``indices`` per class without replacement (sorted output)."""
    if n < 1:
        raise ConfigError(f"n per class must be >= 1, got {n}")
    idx = np.asarray(indices)
    y = np.asarray(labels)[idx]
    out = []
    for c in np.unique(y):
        pool = idx[y == c]
        take = min(n, len(pool))
        out.append(_class_rng(seed, "subsample", int(c)).choice(pool, size=take, replace=False))
    return np.sort(np.concatenate(out)) if out else np.zeros(0, dtype=np.intp)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ConfigError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise DataError(f"{name} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def row_normalize(cm: np.ndarray) -> np.ndarray:
    rows = cm.sum(axis=1, keepdims=True).astype(np.float64)
    return np.divide(cm, rows, out=np.zeros(cm.shape, dtype=np.float64), where=rows > 0)


def balanced_accuracy(y_true, y_pred, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class recall over classes present in ``y_true``."""
    t = np.asarray(y_true, dtype=np.int64)
    p = np.asarray(y_pred, dtype=np.int64)
    if t.shape != p.shape:
        raise ConfigError(f"label arrays differ in length: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("balanced accuracy of an empty label set")
    present = np.unique(t)
    if n_classes is not None and len(present) < n_classes:
        log.warning("%d class(es) absent from y_true; excluded from balanced accuracy",
                    n_classes - len(present))
    recalls = [float(np.mean(p[t == c] == c)) for c in present]
    return float(np.mean(recalls))


def filter_250plus(train_labels, test_labels, threshold: int = 250):
    """Keep classes with at least ``threshold`` training samples and re-index labels densely.

    Returns ``(train_mask, test_mask, new_train_labels, new_test_labels, kept)``
    where ``kept`` lists the original class indices in ascending order.
    """
    tr = np.asarray(train_labels)
    te = np.asarray(test_labels)
    classes, counts = np.unique(tr, return_counts=True)
    kept = [int(c) for c, n in zip(classes, counts) if n >= threshold]
    if len(kept) < 2:
        raise DataError(f"only {len(kept)} class(es) have >= {threshold} training samples")
    remap = {c: i for i, c in enumerate(kept)}
    tr_mask = np.isin(tr, kept)
    te_mask = np.isin(te, kept)
    new_tr = np.array([remap[int(c)] for c in tr[tr_mask]], dtype=np.int64)
    new_te = np.array([remap[int(c)] for c in te[te_mask]], dtype=np.int64)
    return tr_mask, te_mask, new_tr, new_te, kept
