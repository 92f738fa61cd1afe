"""Frozen-teacher feature extraction and the PCA + power-transform pipeline."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .augment import center_view
from .backbone import BackboneConfig, checksum, embed
from .data_io import FeatureMatrix
from .errors import ConfigError

LAMBDA_BOUNDS = (-5.0, 5.0)
GOLDEN_TOL = 1e-4


def extract_features(teacher: dict[str, np.ndarray], images: np.ndarray, ids, bcfg: BackboneConfig,
                     resolution: int) -> FeatureMatrix:
    """Class-token features of ``images`` under frozen teacher weights.

    Each image is centre-cropped and resized to ``resolution``; no augmentation.
    """
    before = checksum(teacher)
    imgs = np.asarray(images)
    if len(imgs) and imgs.shape[-1] != bcfg.in_chans:
        raise ConfigError(f"images have {imgs.shape[-1]} channels, backbone expects {bcfg.in_chans}")
    views = np.stack([center_view(im, resolution) for im in imgs]) if len(imgs) else imgs
    dtype = next(iter(teacher.values())).dtype
    feats = embed(views.astype(dtype, copy=False), teacher, bcfg)
    assert checksum(teacher) == before, "teacher weights modified during extraction"
    return FeatureMatrix(feats, list(ids))


# -- PCA ---------------------------------------------------------------------------

@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray  # rows are principal axes, eigenvalue-descending
    variances: np.ndarray
    zero_variance: np.ndarray  # bool mask over components

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.mean.shape[0]:
            raise ConfigError(f"PCA fitted on width {self.mean.shape[0]}, got {X.shape[1]}")
        return (X - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) @ self.components + self.mean


def fit_pca(X) -> PCAModel:
    """All-component PCA from the ``1/(n-1)`` sample covariance.

    Each component's largest-magnitude loading is made positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ConfigError(f"PCA needs at least 2 samples, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals = evals[order]
    comps = evecs[:, order].T.copy()
    lead = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(d), lead])
    signs[signs == 0] = 1.0
    comps *= signs[:, None]
    evals = np.clip(evals, 0.0, None)
    scale = max(float(evals[0]) if d else 0.0, 1e-300)
    zero = evals <= 1e-12 * scale
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-variance PCA direction(s)", RuntimeWarning, stacklevel=2)
    return PCAModel(mean, comps, evals, zero)


# -- Yeo-Johnson ---------------------------------------------------------------------

def yeo_johnson(x, lmbda: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    if abs(lmbda) < 1e-12:
        out[pos] = np.log1p(x[pos])
    else:
        out[pos] = (np.power(x[pos] + 1.0, lmbda) - 1.0) / lmbda
    if abs(lmbda - 2.0) < 1e-12:
        out[~pos] = -np.log1p(-x[~pos])
    else:
        out[~pos] = -(np.power(1.0 - x[~pos], 2.0 - lmbda) - 1.0) / (2.0 - lmbda)
    return out


def yeo_johnson_llf(x, lmbda: float) -> float:
    """Profile Gaussian log-likelihood of the Yeo-Johnson transformed sample."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    y = yeo_johnson(x, lmbda)
    var = y.var()
    if not np.isfinite(var) or var <= 0:
        return -math.inf
    return -0.5 * n * math.log(var) + (lmbda - 1.0) * float(np.sum(np.sign(x) * np.log1p(np.abs(x))))


def golden_section_max(f: Callable[[float], float], lo: float, hi: float, tol: float = GOLDEN_TOL) -> float:
    """Maximiser of a unimodal ``f`` on ``[lo, hi]`` to bracket width ``tol``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


@dataclass
class PowerTransformModel:
    lambdas: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    constant: np.ndarray

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.lambdas.shape[0]:
            raise ConfigError(f"power transform fitted on width {self.lambdas.shape[0]}, got {X.shape[1]}")
        Y = np.column_stack([yeo_johnson(X[:, j], self.lambdas[j]) for j in range(X.shape[1])]) if X.shape[1] else X
        return (Y - self.means) / self.stds


def fit_power_transform(X) -> PowerTransformModel:
    """Per-column Yeo-Johnson exponent by maximum likelihood, then standardisation."""
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ConfigError(f"power transform needs at least 2 samples, got {n}")
    lambdas = np.ones(d)
    means = np.zeros(d)
    stds = np.ones(d)
    constant = np.zeros(d, dtype=bool)
    for j in range(d):
        col = X[:, j]
        spread = float(col.max() - col.min())
        if spread <= 1e-12 * max(1.0, float(np.abs(col).max())):
            constant[j] = True
            means[j] = float(yeo_johnson(col[:1], 1.0)[0])
            continue
        lam = golden_section_max(lambda l: yeo_johnson_llf(col, l), *LAMBDA_BOUNDS)
        y = yeo_johnson(col, lam)
        std = float(y.std())
        if not np.isfinite(std) or std <= 0:
            lam, y = 1.0, col.copy()
            std = float(y.std())
        lambdas[j], means[j], stds[j] = lam, float(y.mean()), std
    if constant.any():
        warnings.warn(f"{int(constant.sum())} constant feature column(s); output fixed at 0",
                      RuntimeWarning, stacklevel=2)
    return PowerTransformModel(lambdas, means, stds, constant)


# -- pipeline --------------------------------------------------------------------------

@dataclass
class FeaturePipeline:
    pca: PCAModel
    power: PowerTransformModel

    def transform(self, X) -> np.ndarray:
        return self.power.transform(self.pca.transform(X))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.pca.mean, self.pca.components, self.power.lambdas, self.power.means, self.power.stds):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def fit_pipeline(X) -> tuple[FeaturePipeline, np.ndarray]:
    """Fit PCA then power transform on ``X``; returns the pipeline and transformed ``X``."""
    pca = fit_pca(X)
    power = fit_power_transform(pca.transform(X))
    pipe = FeaturePipeline(pca, power)
    return pipe, pipe.transform(X)
