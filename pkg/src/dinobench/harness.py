"""Repeated n-per-class sweeps over frozen features and their reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .classifiers import fit_knn, fit_logreg, fit_svm_rbf, knn_predict
from .errors import ConfigError, DataError
from .features import fit_pipeline
from .metrics import balanced_accuracy, confusion_matrix, filter_250plus, sample_n_per_class, stratified_split

log = logging.getLogger(__name__)

DEFAULT_GRID = (1, 5, 10, 25, 50, 100, 250, 500, 1000)
FEATURE_CLASSIFIERS = ("svm", "lr", "knn")


@dataclass(frozen=True)
class SweepConfig:
    grid: tuple[int, ...] = DEFAULT_GRID
    repeats: int = 100
    baseline_repeats: int = 5
    classifiers: tuple[str, ...] = FEATURE_CLASSIFIERS
    filter_250: bool = False
    threshold: int = 250
    test_fraction: float = 0.3
    seed: int = 0
    workers: int = 1
    svm_C: float = 1.0
    svm_tol: float = 1e-3
    lr_l2: float = 1.0
    knn_k: int = 10

    def __post_init__(self):
        g = tuple(int(n) for n in self.grid)
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "classifiers", tuple(self.classifiers))
        if not g or any(n < 1 for n in g) or any(b <= a for a, b in zip(g, g[1:])):
            raise ConfigError(f"grid must be strictly increasing positive integers, got {list(g)}")
        if self.repeats < 1 or self.baseline_repeats < 1:
            raise ConfigError("repeats must be >= 1")
        unknown = [c for c in self.classifiers if c not in FEATURE_CLASSIFIERS]
        if unknown or not self.classifiers:
            raise ConfigError(f"sweep classifiers must be drawn from {list(FEATURE_CLASSIFIERS)}, got {unknown or '[]'}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test fraction must be in (0, 1), got {self.test_fraction}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


def cell_seed(root: int, classifier: str, n: int, repeat: int) -> int:
    """Independent 32-bit seed for one (classifier, n, repeat) cell."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(classifier.encode()), int(n), int(repeat)])
    return int(ss.generate_state(1)[0])


def effective_grid(grid, train_labels) -> list[int]:
    """Drop grid entries past the first one that already covers every class fully."""
    largest = int(np.bincount(np.asarray(train_labels)).max())
    out = []
    for n in grid:
        out.append(n)
        if n >= largest:
            break
    skipped = [n for n in grid if n not in out]
    if skipped:
        log.info("grid entries %s exceed every class size (max %d); skipped", skipped, largest)
    return out


@dataclass
class CellResult:
    classifier: str
    n: int
    accuracies: list[float] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    confusion: list[list[int]] | None = None
    errors: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies)) if self.accuracies else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies)) if self.accuracies else float("nan")

    @property
    def median(self) -> float:
        return float(np.median(self.accuracies)) if self.accuracies else float("nan")


@dataclass
class SweepReport:
    cells: list[CellResult]
    n_classes: int
    kept_classes: list[int]
    test_size: int
    config: dict = field(default_factory=dict)

    def cell(self, classifier: str, n: int) -> CellResult:
        for c in self.cells:
            if c.classifier == classifier and c.n == n:
                return c
        raise KeyError((classifier, n))

    @property
    def classifiers(self) -> list[str]:
        return list(dict.fromkeys(c.classifier for c in self.cells))

    @property
    def grid(self) -> list[int]:
        return sorted({c.n for c in self.cells})

    def to_dict(self) -> dict:
        cells = []
        for c in self.cells:
            d = asdict(c)
            d.update(mean=c.mean, std=c.std)
            cells.append(d)
        return {"config": self.config, "n_classes": self.n_classes, "kept_classes": self.kept_classes,
                "test_size": self.test_size, "cells": cells}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SweepReport":
        cells = [CellResult(c["classifier"], int(c["n"]), list(c["accuracies"]), list(c["seeds"]),
                            c.get("confusion"), list(c.get("errors", []))) for c in d["cells"]]
        return cls(cells, int(d["n_classes"]), list(d["kept_classes"]), int(d["test_size"]), d.get("config", {}))

    @classmethod
    def from_json(cls, text: str) -> "SweepReport":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"not a sweep report: {exc}") from exc

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["classifier", "n", "repeat", "balanced_accuracy"])
        for c in self.cells:
            for r, acc in enumerate(c.accuracies):
                w.writerow([c.classifier, c.n, r, repr(float(acc))])
        return buf.getvalue()


def csv_to_table(text: str) -> dict[int, dict[str, list[float]]]:
    """Reshape the flat CSV into ``{n: {classifier: accuracies}}`` (rows per n)."""
    table: dict[int, dict[str, list[float]]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        table.setdefault(int(row["n"]), {}).setdefault(row["classifier"], []).append(float(row["balanced_accuracy"]))
    return dict(sorted(table.items()))


def format_table(report: SweepReport) -> str:
    """One row per n, one column per classifier, cells ``mean (std)``."""
    clfs = report.classifiers
    rows = [["n"] + clfs]
    for n in report.grid:
        row = [str(n)]
        for clf in clfs:
            try:
                c = report.cell(clf, n)
            except KeyError:
                row.append("-")
                continue
            row.append(f"{c.mean:.3f} ({c.std:.3f})" if c.accuracies else "failed")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows) + "\n"


# -- running ----------------------------------------------------------------------

def _predict(classifier: str, Xtr, ytr, Xte, n_classes: int, cfg: SweepConfig) -> np.ndarray:
    if classifier == "svm":
        return fit_svm_rbf(Xtr, ytr, C=cfg.svm_C, tol=cfg.svm_tol, n_classes=n_classes).predict(Xte)
    if classifier == "lr":
        return fit_logreg(Xtr, ytr, l2=cfg.lr_l2, n_classes=n_classes).predict(Xte)
    return knn_predict(fit_knn(Xtr, ytr, k=cfg.knn_k, n_classes=n_classes), Xte)


def run_cell(X, y, train_idx, test_idx, classifier: str, n: int, repeat: int, n_classes: int,
             cfg: SweepConfig) -> tuple[int, float | None, np.ndarray | None, str | None]:
    """One repeat: subsample, fit pipeline and classifier on it, score the fixed test set."""
    seed = cell_seed(cfg.seed, classifier, n, repeat)
    try:
        sub = sample_n_per_class(train_idx, y, n, seed)
        with warnings.catch_warnings():
            # degenerate PCA / constant columns are expected at n=1
            warnings.simplefilter("ignore", RuntimeWarning)
            pipe, Xtr = fit_pipeline(X[sub])
            pred = _predict(classifier, Xtr, y[sub], pipe.transform(X[test_idx]), n_classes, cfg)
        acc = balanced_accuracy(y[test_idx], pred)
        return seed, acc, confusion_matrix(y[test_idx], pred, n_classes), None
    except Exception as exc:  # recorded per cell; the sweep carries on
        return seed, None, None, f"{type(exc).__name__}: {exc}"


def _run_chunk(args):
    X, y, tr, te, jobs, n_classes, cfg = args
    return [run_cell(X, y, tr, te, clf, n, r, n_classes, cfg) for clf, n, r in jobs]


def run_sweep(features, labels, cfg: SweepConfig, config_echo: dict | None = None) -> SweepReport:
    """All (classifier, n, repeat) cells over one fixed stratified split."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] != y.shape[0]:
        raise ConfigError(f"{X.shape[0]} feature rows but {y.shape[0]} labels")
    if X.shape[0] == 0:
        raise DataError("no labeled samples to sweep over")
    train_idx, test_idx = stratified_split(y, cfg.test_fraction, cfg.seed)
    n_classes = int(y.max()) + 1
    kept = list(range(n_classes))
    if cfg.filter_250:
        tr_mask, te_mask, new_tr, new_te, kept = filter_250plus(y[train_idx], y[test_idx], cfg.threshold)
        old_tr, old_te = train_idx[tr_mask], test_idx[te_mask]
        order = np.concatenate([old_tr, old_te])
        X = X[order]
        y = np.concatenate([new_tr, new_te])
        train_idx = np.arange(len(old_tr))
        test_idx = np.arange(len(old_tr), len(order))
        n_classes = len(kept)

    grid = effective_grid(cfg.grid, y[train_idx])
    jobs = [(clf, n, r) for clf in cfg.classifiers for n in grid for r in range(cfg.repeats)]
    if cfg.workers > 1 and len(jobs) > 1:
        chunks = [jobs[i::cfg.workers] for i in range(cfg.workers)]
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(_run_chunk, [(X, y, train_idx, test_idx, ch, n_classes, cfg) for ch in chunks]))
        results = {}
        for ch, res in zip(chunks, parts):
            results.update(zip(ch, res))
    else:
        results = dict(zip(jobs, _run_chunk((X, y, train_idx, test_idx, jobs, n_classes, cfg))))

    cells = []
    for clf in cfg.classifiers:
        for n in grid:
            cell = CellResult(clf, n)
            total = np.zeros((n_classes, n_classes), dtype=np.int64)
            for r in range(cfg.repeats):
                seed, acc, cm, err = results[(clf, n, r)]
                cell.seeds.append(seed)
                if err is not None:
                    cell.errors.append(f"repeat {r}: {err}")
                    log.warning("cell %s n=%d repeat %d failed: %s", clf, n, r, err)
                    continue
                cell.accuracies.append(acc)
                total += cm
            cell.confusion = total.tolist()
            cells.append(cell)
    if config_echo is None:
        config_echo = {"sweep": {k: v for k, v in asdict(cfg).items() if k != "workers"}}
    echo = config_echo
    return SweepReport(cells, n_classes, kept, int(len(test_idx)), echo)


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)
