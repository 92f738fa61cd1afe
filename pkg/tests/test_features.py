import warnings

import numpy as np
import pytest
from scipy import stats

from dinobench.backbone import BackboneConfig, checksum, init_params
from dinobench.errors import ConfigError
from dinobench.features import (extract_features, fit_pca, fit_pipeline, fit_power_transform, golden_section_max,
                                yeo_johnson, yeo_johnson_llf)


def lognormal(n=1000, d=16, seed=0):
    rng = np.random.default_rng(seed)
    return np.exp(rng.normal(size=(n, d)) @ rng.normal(scale=0.5, size=(d, d)))


def test_pca_on_decorrelated_data_is_signed_permutation():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5000, 4)) * np.array([1.0, 4.0, 2.0, 0.5])
    X -= X.mean(0)
    # exact decorrelation so the covariance is diagonal
    u, s, vt = np.linalg.svd(X, full_matrices=False)
    X = u * np.array([1.0, 4.0, 2.0, 0.5]) * np.sqrt(len(X) - 1)
    pca = fit_pca(X)
    P = np.abs(pca.components)
    assert np.allclose(P, np.eye(4)[[1, 2, 0, 3]], atol=1e-8)
    assert np.allclose(np.abs(pca.components).max(1), pca.components.max(1))


def test_pca_covariance_diagonal_and_orthonormal():
    X = lognormal()
    pca = fit_pca(X)
    Z = pca.transform(X)
    cov = np.cov(Z, rowvar=False)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() < 1e-8
    assert np.allclose(pca.components @ pca.components.T, np.eye(16), atol=1e-8)
    assert Z.shape == X.shape
    assert np.all(np.diff(pca.variances) <= 1e-12)


def test_pca_round_trip():
    X = lognormal(200, 8, seed=3)
    pca = fit_pca(X)
    assert np.abs(pca.inverse_transform(pca.transform(X)) - X).max() < 1e-8


def test_pca_rank_deficient_flags_zero_variance():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 5))
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        pca = fit_pca(X)
    assert pca.components.shape == (5, 5)
    assert pca.zero_variance.tolist() == [False, False, True, True, True]


def test_pca_needs_two_samples():
    with pytest.raises(ConfigError):
        fit_pca(np.ones((1, 3)))


def test_yeo_johnson_lambda_one_is_identity():
    x = np.linspace(-3, 3, 41)
    assert np.allclose(yeo_johnson(x, 1.0), x, atol=1e-14)


def test_yeo_johnson_matches_scipy():
    x = np.random.default_rng(0).normal(size=300) * 2
    for lam in (-1.5, 0.0, 0.7, 2.0, 3.3):
        assert np.allclose(yeo_johnson(x, lam), stats.yeojohnson(x, lam), atol=1e-12)
        assert yeo_johnson_llf(x, lam) == pytest.approx(stats.yeojohnson_llf(lam, x), rel=1e-10)


def test_yeo_johnson_monotone():
    x = np.sort(np.random.default_rng(1).normal(size=200) * 3)
    for lam in (-4.0, -0.5, 0.0, 1.0, 2.0, 4.5):
        assert np.all(np.diff(yeo_johnson(x, lam)) >= 0)


def test_golden_section_on_parabola():
    assert golden_section_max(lambda l: -(l - 1.234) ** 2, -5, 5) == pytest.approx(1.234, abs=1e-4)


def test_lambda_standard_normal_near_one_and_matches_grid_scan():
    x = np.random.default_rng(0).normal(size=10000)
    pt = fit_power_transform(x[:, None])
    lam = pt.lambdas[0]
    assert abs(lam - 1.0) < 0.2
    grid = np.linspace(-5, 5, 10001)
    scan = grid[np.argmax([yeo_johnson_llf(x, g) for g in grid])]
    assert abs(lam - scan) < 2e-3


def test_lambda_matches_grid_scan_on_skewed_data():
    x = lognormal(500, 1, seed=4)[:, 0]
    lam = fit_power_transform(x[:, None]).lambdas[0]
    grid = np.linspace(-5, 5, 20001)
    scan = grid[np.argmax([yeo_johnson_llf(x, g) for g in grid])]
    assert abs(lam - scan) < 1e-3


def test_pipeline_statistics():
    X = lognormal()
    pipe, Z = fit_pipeline(X)
    assert np.abs(Z.mean(0)).max() < 1e-8
    assert np.abs(Z.var(0) - 1).max() < 1e-6
    assert Z.shape == X.shape
    assert np.array_equal(pipe.transform(X), Z)


def test_constant_column_maps_to_zero():
    X = np.column_stack([np.random.default_rng(0).normal(size=50), np.full(50, 3.0)])
    with pytest.warns(RuntimeWarning, match="constant"):
        pt = fit_power_transform(X)
    assert pt.lambdas[1] == 1.0
    assert np.all(pt.transform(X)[:, 1] == 0.0)


def test_transform_does_not_refit():
    X = lognormal(300, 6)
    pipe, _ = fit_pipeline(X[:200])
    before = pipe.fingerprint()
    pipe.transform(X[200:])
    assert pipe.fingerprint() == before


def test_width_mismatch():
    pipe, _ = fit_pipeline(lognormal(50, 4))
    with pytest.raises(ConfigError):
        pipe.transform(np.ones((3, 5)))


def test_extract_features_rows_width_and_frozen():
    cfg = BackboneConfig(embed_dim=16, depth=1, num_heads=2, head_hidden=8, head_bottleneck=4, out_dim=8)
    params = init_params(cfg, np.random.default_rng(0))
    before = checksum(params)
    imgs = np.random.default_rng(1).uniform(size=(5, 40, 36, 3)).astype(np.float32)
    fm = extract_features(params, imgs, [f"i{k}" for k in range(5)], cfg, 32)
    assert fm.values.shape == (5, 16)
    assert checksum(params) == before
    again = extract_features(params, imgs[:1], ["x"], cfg, 32)
    assert np.allclose(again.values[0], fm.values[0], atol=1e-5)


def test_extract_channel_mismatch():
    cfg = BackboneConfig(embed_dim=16, depth=1, num_heads=2, head_hidden=8, head_bottleneck=4, out_dim=8)
    params = init_params(cfg, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        extract_features(params, np.zeros((2, 32, 32, 1), np.float32), ["a", "b"], cfg, 32)
