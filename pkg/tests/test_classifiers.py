import numpy as np
import pytest
from sklearn.svm import SVC

from dinobench.backbone import BackboneConfig, checksum, init_params
from dinobench.classifiers import (EarlyStopper, ProbeConfig, class_weights, fit_dl_baseline, fit_knn,
                                   fit_linear_probe, fit_logreg, fit_svm_rbf, knn_predict, logreg_objective,
                                   rbf_kernel, smo_solve)
from dinobench.errors import ConfigError, DataError


def blobs(n_per=30, C=3, d=4, spread=0.3, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(scale=4.0, size=(C, d))
    X = np.concatenate([c + spread * rng.normal(size=(n_per, d)) for c in centers])
    y = np.repeat(np.arange(C), n_per)
    return X, y


# -- class weights -----------------------------------------------------------------

def test_class_weights_formula():
    y = np.repeat([0, 1, 2], [10, 30, 60])
    w = class_weights(y)
    assert np.allclose(w, [100 / 30, 100 / 90, 100 / 180])
    assert np.allclose(np.bincount(y) * w, len(y) / 3)


def test_class_weights_scale_invariant():
    y = np.repeat([0, 1, 2], [3, 5, 9])
    y3 = np.repeat([0, 1, 2], [9, 15, 27])
    assert np.allclose(class_weights(y), class_weights(y3))


# -- SVM ------------------------------------------------------------------------------

def kkt_gap(model_alpha, y, K, upper):
    """Maximal violating-pair gap m(a) - M(a) recomputed from scratch."""
    Q = K * np.outer(y, y)
    G = Q @ model_alpha - 1.0
    f = y * G
    up = ((y > 0) & (model_alpha < upper)) | ((y < 0) & (model_alpha > 0))
    low = ((y < 0) & (model_alpha < upper)) | ((y > 0) & (model_alpha > 0))
    return float(np.max(-f[up]) - np.min(-f[low]))


def test_binary_svm_matches_sklearn():
    X, y = blobs(40, 2, 3, spread=2.5, seed=1)
    ours = fit_svm_rbf(X, y, tol=1e-8)
    ref = SVC(kernel="rbf", gamma="scale", C=1.0, class_weight="balanced", tol=1e-8).fit(X, y)
    Q = np.random.default_rng(2).normal(scale=3, size=(50, 3))
    dec = ours.decision_function(Q)[:, 1]
    assert np.abs(dec - ref.decision_function(Q)).max() < 1e-5


def test_svm_kkt_and_separable_training_accuracy():
    X, y = blobs(25, 4, 5, spread=0.5)
    for tol in (1e-3, 1e-6):
        m = fit_svm_rbf(X, y, tol=tol)
        assert np.all(m.violations < tol)
        assert np.mean(m.predict(X) == y) == 1.0


def test_smo_kkt_independent_check():
    X, y = blobs(20, 2, 2, spread=2.0, seed=3)
    yy = np.where(y == 1, 1.0, -1.0)
    K = rbf_kernel(X, X, 0.5)
    upper = np.full(len(y), 1.0)
    sol = smo_solve(K, yy, upper, tol=1e-6)
    assert kkt_gap(sol.alpha, yy, K, upper) < 1e-6
    assert abs(np.dot(sol.alpha, yy)) < 1e-9
    assert np.all((sol.alpha >= 0) & (sol.alpha <= upper))


def test_svm_duplicate_equals_doubled_weight():
    X, y = blobs(6, 2, 2, spread=1.5, seed=4)
    Xd = np.vstack([X, X[:1]])
    yd = np.append(y, y[0])
    gamma = 0.3
    w = np.ones(2)
    dup = fit_svm_rbf(Xd, yd, gamma=gamma, weights=w, tol=1e-10)
    # doubling sample 0's box is the same QP as duplicating it
    yy = np.where(y == 1, 1.0, -1.0)
    upper = np.ones(len(y))
    upper[0] = 2.0
    K = rbf_kernel(X, X, gamma)
    sol = smo_solve(K, yy, upper, tol=1e-10)
    Q = np.random.default_rng(0).normal(size=(20, 2)) * 3
    ref = rbf_kernel(Q, X, gamma) @ (sol.alpha * yy) - sol.rho
    assert np.abs(dup.decision_function(Q)[:, 1] - ref).max() < 1e-6


def test_svm_feature_permutation_invariant():
    X, y = blobs(15, 3, 4, spread=1.0, seed=5)
    perm = np.array([2, 0, 3, 1])
    a = fit_svm_rbf(X, y).predict(X)
    b = fit_svm_rbf(X[:, perm], y).predict(X[:, perm])
    assert np.array_equal(a, b)


def test_svm_single_class_rejected():
    with pytest.raises(DataError):
        fit_svm_rbf(np.ones((4, 2)), np.zeros(4, int))


def test_svm_iteration_cap_warns():
    X, y = blobs(20, 2, 2, spread=3.0)
    with pytest.warns(RuntimeWarning, match="SMO stopped"):
        fit_svm_rbf(X, y, tol=1e-12, max_iter=3)


# -- logistic regression ---------------------------------------------------------------

def test_logreg_gradient_and_convergence():
    X, y = blobs(20, 3, 3, spread=2.0, seed=6)
    m = fit_logreg(X, y, l2=1.0)
    assert m.converged and m.grad_norm < 1e-6
    assert abs(m.b.sum()) < 1e-12


def test_logreg_objective_gradient_finite_difference():
    rng = np.random.default_rng(0)
    X, y = blobs(10, 3, 4, spread=1.0)
    W = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    sw = class_weights(y)[y]
    _, gW, gb = logreg_objective(W, b, X, y, sw, 0.7)
    eps = 1e-6
    num = np.zeros_like(W)
    for i in range(4):
        for j in range(3):
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += eps
            Wm[i, j] -= eps
            num[i, j] = (logreg_objective(Wp, b, X, y, sw, 0.7)[0] - logreg_objective(Wm, b, X, y, sw, 0.7)[0]) / (2 * eps)
    assert np.abs(num - gW).max() < 1e-5
    assert abs(gb.sum()) < 1e-9  # softmax gradient sums to zero across classes


def test_logreg_beats_random_search_oracle():
    X, y = blobs(15, 3, 2, spread=2.0, seed=7)
    m = fit_logreg(X, y, l2=1.0)
    sw = class_weights(y)[y]
    best = logreg_objective(m.W, m.b, X, y, sw, 1.0)[0]
    rng = np.random.default_rng(0)
    for _ in range(2000):
        W = m.W + rng.normal(scale=0.05, size=m.W.shape)
        b = m.b + rng.normal(scale=0.05, size=m.b.shape)
        assert logreg_objective(W, b, X, y, sw, 1.0)[0] >= best - 1e-9


def test_logreg_iteration_cap_warns():
    X, y = blobs(10, 3, 3, spread=2.0)
    with pytest.warns(RuntimeWarning, match="gradient norm"):
        m = fit_logreg(X, y, l2=1.0, max_iter=2)
    assert not m.converged


def test_logreg_probabilities():
    X, y = blobs(10, 4, 3)
    P = fit_logreg(X, y).predict_proba(X)
    assert np.allclose(P.sum(1), 1.0, atol=1e-12)


# -- KNN --------------------------------------------------------------------------------

def brute_knn(Xtr, ytr, q, k, C, eps=1e-12):
    d = np.array([np.sqrt(np.sum((x - q) ** 2)) for x in Xtr])
    order = sorted(range(len(d)), key=lambda i: (d[i], i))[:min(k, len(d))]
    votes = np.zeros(C)
    exact = [i for i in order if d[i] == 0.0]
    if exact:
        for i in exact:
            votes[ytr[i]] += 1
    else:
        for i in order:
            votes[ytr[i]] += 1.0 / (d[i] + eps)
    return int(np.argmax(votes))


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    for rep in range(4):
        X = rng.normal(size=(50, 3))
        y = rng.integers(0, 4, 50)
        Q = rng.normal(size=(125, 3))
        m = fit_knn(X, y, k=10, n_classes=4)
        pred = knn_predict(m, Q)
        assert all(pred[i] == brute_knn(X, y, Q[i], 10, 4) for i in range(len(Q)))


def test_knn_caps_k_and_ties_to_smaller_label():
    X = np.array([[0.0], [2.0], [-2.0]])
    y = np.array([1, 0, 1])
    m = fit_knn(X, y, k=10)
    # 3 points all vote: label 1 has two at distance 1 and 3 vs label 0 at distance 1
    assert knn_predict(m, np.array([[1.0]]))[0] == 1
    X2 = np.array([[-1.0], [1.0]])
    assert knn_predict(fit_knn(X2, np.array([1, 0]), k=2), np.array([[0.0]]))[0] == 0


def test_knn_exact_match_dominates():
    X = np.array([[0.0], [0.1], [0.1], [0.1]])
    y = np.array([2, 0, 0, 0])
    assert knn_predict(fit_knn(X, y, k=4), np.array([[0.0]]))[0] == 2


def test_knn_row_permutation_invariant():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    y = rng.integers(0, 3, 40)
    Q = rng.normal(size=(60, 2))
    perm = rng.permutation(40)
    assert np.array_equal(knn_predict(fit_knn(X, y), Q), knn_predict(fit_knn(X[perm], y[perm]), Q))


def test_knn_errors():
    with pytest.raises(ConfigError):
        fit_knn(np.ones((2, 2)), np.array([0, 1]), k=0)
    with pytest.raises(ConfigError):
        knn_predict(fit_knn(np.ones((2, 2)), np.array([0, 1])), np.ones((1, 3)))


# -- probe and baseline -----------------------------------------------------------------

def test_early_stopper_best_so_far():
    s = EarlyStopper(0.005)
    assert not s.update(0.5)
    assert not s.update(0.6)
    assert s.update(0.6)  # zero improvement
    s = EarlyStopper(0.005)
    s.update(0.8)
    s.update(0.7)  # worse than best: stop
    assert s.best == 0.8 and s.best_epoch == 0


TINY = BackboneConfig(patch_size=8, embed_dim=16, depth=1, num_heads=2, img_size=16,
                      head_hidden=8, head_bottleneck=4, out_dim=8)


def small_images(n_per=4, C=2, seed=0):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(size=(n_per * C, 16, 16, 3)).astype(np.float32)
    y = np.repeat(np.arange(C), n_per)
    imgs[y == 1] *= 0.3
    return imgs, y


def test_probe_frozen_and_width():
    params = init_params(TINY, np.random.default_rng(0))
    before = checksum({k: v for k, v in params.items() if k.startswith("backbone.")})
    imgs, y = small_images()
    m = fit_linear_probe(params, imgs, y, TINY, ProbeConfig(max_epochs=3, resolution=16), seed=0)
    assert m.weight.shape == (16, 2)
    assert m.backbone_checksum == before
    assert checksum({k: v for k, v in params.items() if k.startswith("backbone.")}) == before


def test_probe_plateau_stops_after_first_comparison():
    params = init_params(TINY, np.random.default_rng(0))
    imgs, y = small_images()
    # zero learning rate keeps validation accuracy constant
    m = fit_linear_probe(params, imgs, y, TINY, ProbeConfig(lr=0.0, max_epochs=50, resolution=16), seed=0)
    assert m.epochs_run == 2


def test_probe_singleton_class_warns(caplog):
    params = init_params(TINY, np.random.default_rng(0))
    imgs, y = small_images(3, 2)
    y = y.copy()
    imgs = np.concatenate([imgs, imgs[:1]])
    y = np.append(y, 2)
    fit_linear_probe(params, imgs, y, TINY, ProbeConfig(max_epochs=1, resolution=16), seed=0)
    assert "single sample" in caplog.text


def test_baseline_changes_backbone_and_lr0_is_frozen():
    params = init_params(TINY, np.random.default_rng(0))
    imgs, y = small_images()
    before = checksum({k: v for k, v in params.items() if k.startswith("backbone.")})
    m = fit_dl_baseline(params, imgs, y, TINY, ProbeConfig(max_epochs=1, resolution=16, stop_rel_improvement=None), seed=0)
    assert m.backbone_checksum != before
    frozen = fit_dl_baseline(params, imgs, y, TINY, ProbeConfig(max_epochs=2, resolution=16, backbone_lr=0.0), seed=0)
    assert frozen.backbone_checksum == before
    probe = fit_linear_probe(params, imgs, y, TINY, ProbeConfig(max_epochs=2, resolution=16), seed=0)
    assert np.allclose(frozen.weight, probe.weight, atol=1e-6)


def test_baseline_overfits_small_set():
    params = init_params(TINY, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    imgs = rng.uniform(size=(20, 16, 16, 3)).astype(np.float32)
    y = np.repeat([0, 1], 10)
    imgs[y == 1, :, :8] = 1.0
    imgs[y == 0, :, 8:] = 0.0
    cfg = ProbeConfig(lr=3e-3, max_epochs=200, resolution=16, stop_rel_improvement=None, val_fraction=0.3)
    from dinobench.augment import AugmentPolicy
    pol = AugmentPolicy.identity(global_scale=(1.0, 1.0), ratio=(1.0, 1.0), global_size=16, local_size=8)
    m = fit_dl_baseline(params, imgs, y, TINY, cfg, seed=0, policy=pol)
    assert np.mean(m.predict(imgs) == y) == 1.0
