"""Downstream classifiers on frozen features, plus image-level probe and baseline.

All fitters weight classes inversely to their frequency in the training set.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import tensor as T
from .augment import AugmentPolicy, center_view, crop_resize, sample_box, augment
from .backbone import BackboneConfig, as_leaves, checksum, forward_backbone, _trunc_normal
from .errors import ConfigError, DataError, UsageError
from .metrics import balanced_accuracy, stratified_split
from .optim import OptimizerState, optimizer_step
from .tensor import Tensor

log = logging.getLogger(__name__)

TAU = 1e-12


def class_weights(labels, n_classes: int | None = None) -> np.ndarray:
    """``n_total / (C * n_c)`` for each class; ``C`` counts classes present."""
    y = np.asarray(labels, dtype=np.int64)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    present = int(np.count_nonzero(counts))
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, len(y) / (present * counts), 0.0)
    return w


def _check_labeled(X, y, min_classes=2):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ConfigError(f"features {X.shape} and labels {y.shape} misaligned")
    if len(np.unique(y)) < min_classes:
        raise DataError(f"need at least {min_classes} classes, got {len(np.unique(y))}")
    return X, y


# -- SVM ---------------------------------------------------------------------------

def rbf_kernel(A, B, gamma: float) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def scale_gamma(X) -> float:
    var = float(np.asarray(X, dtype=np.float64).var())
    return 1.0 / (X.shape[1] * var) if var > 0 else 1.0


@dataclass
class BinarySolution:
    alpha: np.ndarray
    rho: float
    violation: float
    iterations: int
    converged: bool


def smo_solve(K: np.ndarray, y: np.ndarray, upper: np.ndarray, tol: float = 1e-3,
              max_iter: int | None = None) -> BinarySolution:
    """Solve ``min 1/2 a'Qa - e'a`` s.t. ``0 <= a_i <= upper_i``, ``y'a = 0``.

    ``Q_ij = y_i y_j K_ij``. Working pairs are chosen by maximal violation for
    ``i`` and second-order gain for ``j``; stops when the maximal KKT violation
    ``m(a) - M(a)`` drops below ``tol``.
    """
    n = len(y)
    y = y.astype(np.float64)
    Q = K * np.outer(y, y)
    QD = np.diag(Q).copy()
    alpha = np.zeros(n)
    G = -np.ones(n)
    max_iter = max(10_000_000, 100 * n) if max_iter is None else max_iter
    it = 0
    gap = math.inf
    while it < max_iter:
        yG = -y * G
        up = ((y > 0) & (alpha < upper)) | ((y < 0) & (alpha > 0))
        low = ((y < 0) & (alpha < upper)) | ((y > 0) & (alpha > 0))
        if not up.any() or not low.any():
            gap = 0.0
            break
        cand = np.where(up, yG, -np.inf)
        i = int(np.argmax(cand))
        m = cand[i]
        M = float(np.min(np.where(low, yG, np.inf)))
        gap = m - M
        if gap < tol:
            break
        b = m - yG
        a = QD[i] + QD - 2.0 * y[i] * y * Q[i]
        a = np.where(a > 0, a, TAU)
        score = np.where(low & (yG < m), -(b * b) / a, np.inf)
        j = int(np.argmin(score))

        Ci, Cj = upper[i], upper[j]
        old_i, old_j = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = QD[i] + QD[j] + 2.0 * Q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = -diff
            if diff > Ci - Cj:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = Ci - diff
            elif alpha[j] > Cj:
                alpha[j] = Cj
                alpha[i] = Cj + diff
        else:
            quad = QD[i] + QD[j] - 2.0 * Q[i, j]
            quad = quad if quad > 0 else TAU
            delta = (G[i] - G[j]) / quad
            total = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if total > Ci:
                if alpha[i] > Ci:
                    alpha[i] = Ci
                    alpha[j] = total - Ci
            elif alpha[j] < 0:
                alpha[j] = 0.0
                alpha[i] = total
            if total > Cj:
                if alpha[j] > Cj:
                    alpha[j] = Cj
                    alpha[i] = total - Cj
            elif alpha[i] < 0:
                alpha[i] = 0.0
                alpha[j] = total
        G += Q[:, i] * (alpha[i] - old_i) + Q[:, j] * (alpha[j] - old_j)
        it += 1

    converged = gap < tol
    if not converged:
        warnings.warn(f"SMO stopped after {it} iterations with KKT gap {gap:.3g}", RuntimeWarning, stacklevel=2)

    yG = y * G
    at_upper = alpha >= upper
    at_lower = alpha <= 0
    free = ~at_upper & ~at_lower
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
        ub = float(yG[ub_mask].min()) if ub_mask.any() else math.inf
        lb = float(yG[lb_mask].max()) if lb_mask.any() else -math.inf
        rho = (ub + lb) / 2.0 if np.isfinite(ub) and np.isfinite(lb) else (ub if np.isfinite(ub) else lb)
    return BinarySolution(alpha, rho, float(gap), it, converged)


@dataclass
class SVMModel:
    """One-vs-rest RBF SVMs; ``dual_coef[c, i] = alpha_i * y_i`` for class ``c``."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    intercepts: np.ndarray
    gamma: float
    C: float
    n_classes: int
    violations: np.ndarray
    upper: np.ndarray = field(default=None, repr=False)  # per class, per support-vector box

    def decision_function(self, X) -> np.ndarray:
        K = rbf_kernel(X, self.support_vectors, self.gamma)
        return K @ self.dual_coef.T + self.intercepts

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)


def fit_svm_rbf(X, y, C: float = 1.0, gamma="scale", weights=None, tol: float = 1e-3,
                n_classes: int | None = None, max_iter: int | None = None) -> SVMModel:
    """One-vs-rest SMO with per-sample box ``C * weight(y_i)``."""
    X, y = _check_labeled(X, y)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    w = class_weights(y, n_classes) if weights is None else np.asarray(weights, dtype=np.float64)
    g = scale_gamma(X) if gamma == "scale" else float(gamma)
    if not g > 0 or not C > 0:
        raise ConfigError(f"SVM needs C > 0 and gamma > 0, got C={C}, gamma={g}")
    K = rbf_kernel(X, X, g)
    upper = C * w[y]
    coefs = np.zeros((n_classes, len(y)))
    intercepts = np.full(n_classes, -np.inf)
    violations = np.zeros(n_classes)
    for c in range(n_classes):
        if not np.any(y == c):
            continue  # absent class never wins the argmax
        yc = np.where(y == c, 1.0, -1.0)
        sol = smo_solve(K, yc, upper, tol=tol, max_iter=max_iter)
        coefs[c] = sol.alpha * yc
        intercepts[c] = -sol.rho
        violations[c] = sol.violation
    sv = np.any(coefs != 0, axis=0)
    return SVMModel(X[sv], coefs[:, sv], intercepts, g, C, n_classes, violations, upper[sv])


# -- logistic regression ---------------------------------------------------------------

@dataclass
class LRModel:
    W: np.ndarray  # (d, C)
    b: np.ndarray  # (C,)
    grad_norm: float
    converged: bool

    def predict_proba(self, X) -> np.ndarray:
        z = np.asarray(X, dtype=np.float64) @ self.W + self.b
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)


def logreg_objective(W, b, X, y, sample_w, l2: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted summed cross entropy ``+ l2/2 ||W||^2`` with gradients."""
    z = X @ W + b
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    n = len(y)
    loss = float(np.sum(sample_w * (lse - z[np.arange(n), y]))) + 0.5 * l2 * float(np.sum(W * W))
    P = np.exp(z - lse[:, None])
    P[np.arange(n), y] -= 1.0
    P *= sample_w[:, None]
    return loss, X.T @ P + l2 * W, P.sum(axis=0)


def fit_logreg(X, y, weights=None, l2: float = 1.0, n_classes: int | None = None,
               gtol: float = 1e-6, max_iter: int = 5000) -> LRModel:
    """Multinomial logistic regression by L-BFGS to gradient norm ``gtol``.

    Biases are unpenalised; they are centred afterwards (softmax is invariant
    to a common shift).
    """
    X, y = _check_labeled(X, y)
    n, d = X.shape
    C = int(y.max()) + 1 if n_classes is None else n_classes
    w = class_weights(y, C) if weights is None else np.asarray(weights, dtype=np.float64)
    sw = w[y]

    def fg(theta):
        W = theta[:d * C].reshape(d, C)
        b = theta[d * C:]
        loss, gW, gb = logreg_objective(W, b, X, y, sw, l2)
        return loss, np.concatenate([gW.ravel(), gb])

    res = minimize(fg, np.zeros(d * C + C), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": gtol * 1e-2, "ftol": 1e-16, "maxcor": 30})
    theta = res.x
    gnorm = float(np.linalg.norm(fg(theta)[1]))
    if gnorm >= gtol:
        # L-BFGS can stall on flat objectives; polish with Newton-free gradient steps is
        # pointless there, so report instead of pretending convergence
        msg = "separable data without regularisation" if l2 == 0 else "iteration cap"
        warnings.warn(f"logistic regression gradient norm {gnorm:.2e} >= {gtol:g} ({msg})",
                      RuntimeWarning, stacklevel=2)
    W = theta[:d * C].reshape(d, C)
    b = theta[d * C:]
    b = b - b.mean()
    return LRModel(W, b, gnorm, gnorm < gtol)


# -- KNN ------------------------------------------------------------------------------

@dataclass
class KNNModel:
    X: np.ndarray
    y: np.ndarray
    k: int = 10
    n_classes: int = 0
    eps: float = 1e-12


def fit_knn(X, y, k: int = 10, n_classes: int | None = None) -> KNNModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    n_classes = (int(y.max()) + 1 if len(y) else 0) if n_classes is None else n_classes
    return KNNModel(X, y, k, n_classes)


def knn_predict(model: KNNModel, Q, chunk: int = 256) -> np.ndarray:
    """Distance-weighted vote of the ``K`` nearest stored points (Euclidean).

    Weights are ``1 / (distance + eps)``; stored points at distance zero outvote
    everything else; ties go to the smaller label.
    """
    if model.X.shape[0] == 0:
        raise UsageError("KNN model holds no training points")
    Q = np.asarray(Q, dtype=np.float64)
    if Q.ndim == 1:
        Q = Q[None]
    if Q.shape[1] != model.X.shape[1]:
        raise ConfigError(f"query width {Q.shape[1]} != training width {model.X.shape[1]}")
    k = min(model.k, model.X.shape[0])
    C = max(model.n_classes, int(model.y.max()) + 1)
    out = np.empty(len(Q), dtype=np.int64)
    for start in range(0, len(Q), chunk):
        q = Q[start:start + chunk]
        dist = np.sqrt(((q[:, None, :] - model.X[None, :, :]) ** 2).sum(axis=-1))
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        for r in range(len(q)):
            nd = dist[r, order[r]]
            labels = model.y[order[r]]
            exact = nd == 0.0
            votes = np.zeros(C)
            if exact.any():
                np.add.at(votes, labels[exact], 1.0)
            else:
                np.add.at(votes, labels, 1.0 / (nd + model.eps))
            out[start + r] = int(np.argmax(votes))
    return out


# -- image-level probe and supervised baseline -------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-3
    backbone_lr: float | None = None  # baseline only; None means same as lr
    batch_size: int = 32
    max_epochs: int = 200
    val_fraction: float = 0.3
    stop_rel_improvement: float | None = 0.005
    resolution: int = 32


class EarlyStopper:
    """Stop when validation accuracy improves on the best so far by less than ``rel_tol`` (relative)."""

    def __init__(self, rel_tol: float | None):
        self.rel_tol = rel_tol
        self.best = None
        self.best_epoch = -1
        self.history: list[float] = []

    def update(self, acc: float) -> bool:
        self.history.append(acc)
        epoch = len(self.history) - 1
        if self.best is None:
            self.best, self.best_epoch = acc, epoch
            return False
        if self.best > 0:
            rel = (acc - self.best) / self.best
        else:
            rel = math.inf if acc > 0 else 0.0
        if acc > self.best:
            self.best, self.best_epoch = acc, epoch
        return self.rel_tol is not None and rel < self.rel_tol


@dataclass
class ProbeModel:
    weight: np.ndarray  # (d, C)
    bias: np.ndarray
    backbone: dict[str, np.ndarray]
    backbone_checksum: str
    bcfg: BackboneConfig
    resolution: int
    epochs_run: int = 0
    val_history: list[float] = field(default_factory=list)
    frozen: bool = True

    def features(self, images) -> np.ndarray:
        views = np.stack([center_view(im, self.resolution) for im in images])
        P = as_leaves(self.backbone)
        with T.no_grad():
            return forward_backbone(views.astype(self.weight.dtype, copy=False), P, self.bcfg).data

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.features(images) @ self.weight + self.bias, axis=1)


def _probe_view(image, cfg: ProbeConfig, policy: AugmentPolicy, rng) -> np.ndarray:
    h, w = image.shape[:2]
    box = sample_box(h, w, policy.global_scale, policy.ratio, rng)
    return augment(crop_resize(image, box, cfg.resolution), policy, rng, role="global0")


def _fit_image_classifier(backbone, images, labels, bcfg: BackboneConfig, cfg: ProbeConfig,
                          seed: int, train_backbone: bool, policy: AugmentPolicy | None,
                          n_classes: int | None) -> ProbeModel:
    images = np.asarray(images)
    y = np.asarray(labels, dtype=np.int64)
    if len(images) != len(y):
        raise ConfigError("images and labels misaligned")
    if len(np.unique(y)) < 2:
        raise DataError("need at least 2 classes")
    C = int(y.max()) + 1 if n_classes is None else n_classes
    policy = policy or AugmentPolicy()
    dtype = next(iter(backbone.values())).dtype
    params = {k: np.array(v, copy=True) for k, v in backbone.items() if k.startswith("backbone.")}
    frozen_sum = checksum(params)
    rng = np.random.default_rng(seed)

    counts = np.bincount(y, minlength=C)
    if np.any((counts > 0) & (counts < 2)):
        log.warning("class(es) with a single sample go to the training side of the validation split")
    tr_idx, va_idx = stratified_split(y, cfg.val_fraction, seed)
    weights = class_weights(y[tr_idx], C).astype(dtype)

    d = bcfg.embed_dim
    head = {"weight": _trunc_normal(rng, (d, C), 0.02).astype(dtype), "bias": np.zeros(C, dtype=dtype)}
    opt_head = OptimizerState(mode="adam", lr=cfg.lr)
    blr = cfg.lr if cfg.backbone_lr is None else cfg.backbone_lr
    opt_bb = OptimizerState(mode="adam", lr=blr)
    stopper = EarlyStopper(cfg.stop_rel_improvement)
    best = (head["weight"].copy(), head["bias"].copy(), {k: v.copy() for k, v in params.items()})

    val_views = (np.stack([center_view(im, cfg.resolution) for im in images[va_idx]]).astype(dtype)
                 if len(va_idx) else None)
    epochs = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(tr_idx)
        for start in range(0, len(order), cfg.batch_size):
            bidx = order[start:start + cfg.batch_size]
            views = np.stack([_probe_view(images[i], cfg, policy, rng) for i in bidx]).astype(dtype)
            H = {k: Tensor(v) for k, v in head.items()}
            for t in H.values():
                t.requires_grad = True
            if train_backbone:
                P = as_leaves(params, requires_grad=True)
                feats = forward_backbone(views, P, bcfg)
            else:
                with T.no_grad():
                    feats = Tensor(forward_backbone(views, as_leaves(params), bcfg).data)
            logits = T.matmul(feats, H["weight"]) + H["bias"]
            logp = T.log(T.softmax_t(logits, 1.0), eps=1e-12)
            sw = weights[y[bidx]]
            picked = T.gather(logp, y[bidx][:, None], axis=1)
            loss = -(picked * Tensor(sw[:, None])).sum() / float(sw.sum())
            loss.backward()
            optimizer_step(opt_head, head, {k: H[k].grad for k in head})
            if train_backbone:
                optimizer_step(opt_bb, params, {k: (P[k].grad if P[k].grad is not None else np.zeros_like(v))
                                                for k, v in params.items()})
        epochs = epoch + 1
        if val_views is None:
            best = (head["weight"].copy(), head["bias"].copy(), {k: v.copy() for k, v in params.items()})
            continue
        with T.no_grad():
            vf = forward_backbone(val_views, as_leaves(params), bcfg).data
        acc = balanced_accuracy(y[va_idx], np.argmax(vf @ head["weight"] + head["bias"], axis=1))
        prev_best = stopper.best
        stop = stopper.update(acc)
        if prev_best is None or acc > prev_best:
            best = (head["weight"].copy(), head["bias"].copy(), {k: v.copy() for k, v in params.items()})
        if stop:
            break

    weight, bias, bb = best
    if not train_backbone:
        assert checksum(bb) == frozen_sum, "frozen backbone changed during probe training"
    return ProbeModel(weight, bias, bb, checksum(bb), bcfg, cfg.resolution, epochs,
                      stopper.history, frozen=not train_backbone)


def fit_linear_probe(backbone, images, labels, bcfg: BackboneConfig, cfg: ProbeConfig = ProbeConfig(),
                     seed: int = 0, policy: AugmentPolicy | None = None,
                     n_classes: int | None = None) -> ProbeModel:
    """Linear layer on frozen backbone features, trained on augmented global crops (Adam)."""
    return _fit_image_classifier(backbone, images, labels, bcfg, cfg, seed, False, policy, n_classes)


def fit_dl_baseline(backbone, images, labels, bcfg: BackboneConfig, cfg: ProbeConfig = ProbeConfig(),
                    seed: int = 0, policy: AugmentPolicy | None = None,
                    n_classes: int | None = None) -> ProbeModel:
    """Same model as the probe, but every backbone weight is trained as well."""
    return _fit_image_classifier(backbone, images, labels, bcfg, cfg, seed, True, policy, n_classes)
