import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradegap.errors import ConvergenceError, RankDeficiencyError
from gradegap.regression import crve, demean, factorize, fit, ssc_factor


def _dummies(codes):
    levels = np.unique(codes)
    return (codes[:, None] == levels[None, :]).astype(float)


def _instance(seed, n=None, p=2, g1=4, g2=3, weights=False):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(20, 61))
    a = rng.integers(0, g1, n)
    b = rng.integers(0, g2, n)
    X = rng.standard_normal((n, p))
    y = X @ rng.standard_normal(p) + 0.5 * a - 0.3 * b + rng.standard_normal(n)
    w = rng.uniform(0.5, 2.0, n) if weights else None
    return y, X, a, b, w


def _brute(y, X, a, b, w=None):
    """Explicit-dummy weighted least squares; returns slopes and the design."""
    Z = np.column_stack([X, _dummies(a), _dummies(b)[:, 1:]])
    w = np.ones(len(y)) if w is None else w
    coef, *_ = np.linalg.lstsq(Z * np.sqrt(w)[:, None], y * np.sqrt(w), rcond=None)
    return coef[: X.shape[1]], Z, coef


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_absorbed_fe_matches_explicit_dummies(seed, weighted):
    y, X, a, b, w = _instance(seed, weights=weighted)
    res = fit(y, X, ["x1", "x2"], fe=[a, b], weights=w)
    slopes, _, _ = _brute(y, X, a, b, w)
    np.testing.assert_allclose(res.coef, slopes, rtol=0, atol=1e-8)


def _direct_cluster_sandwich(y, X, a, b, clusters):
    slopes, Z, coef = _brute(y, X, a, b)
    e = y - Z @ coef
    bread = np.linalg.inv(Z.T @ Z)
    meat = np.zeros((Z.shape[1], Z.shape[1]))
    for g in np.unique(clusters):
        s = Z[clusters == g].T @ e[clusters == g]
        meat += np.outer(s, s)
    V = bread @ meat @ bread
    return V[: X.shape[1], : X.shape[1]]


@pytest.mark.parametrize("seed", range(10))
def test_one_way_crve_matches_direct_sandwich(seed):
    y, X, a, b, _ = _instance(seed)
    clusters = np.random.default_rng(seed + 1).integers(0, 8, len(y))
    res = fit(y, X, ["x1", "x2"], fe=[a, b], clusters=[clusters], small_sample=False)
    np.testing.assert_allclose(res.cov, _direct_cluster_sandwich(y, X, a, b, clusters), rtol=0, atol=1e-10)


def test_small_sample_factor_applied():
    y, X, a, b, _ = _instance(3)
    cl = np.arange(len(y)) % 7
    raw = fit(y, X, ["x1", "x2"], fe=[a, b], clusters=[cl], small_sample=False)
    adj = fit(y, X, ["x1", "x2"], fe=[a, b], clusters=[cl])
    np.testing.assert_allclose(adj.cov, raw.cov * ssc_factor(7, len(y), 3), rtol=1e-12)
    assert adj.df_resid == 6


def test_singleton_clusters_equal_hc():
    y, X, a, b, _ = _instance(5)
    res = fit(y, X, ["x1", "x2"], fe=[a, b], small_sample=False)
    np.testing.assert_allclose(res.cov, _direct_cluster_sandwich(y, X, a, b, np.arange(len(y))), atol=1e-10)


def test_two_way_reduces_to_one_way_for_identical_partitions():
    y, X, a, b, _ = _instance(8, n=60)
    cl = np.random.default_rng(0).integers(0, 9, 60)
    one = fit(y, X, ["x1", "x2"], fe=[a, b], clusters=[cl])
    two = fit(y, X, ["x1", "x2"], fe=[a, b], clusters=[cl, cl.copy()])
    np.testing.assert_allclose(two.cov, one.cov, rtol=1e-12, atol=1e-15)


def test_two_way_covariance_is_psd():
    rng = np.random.default_rng(2)
    n = 400
    X = rng.standard_normal((n, 3))
    y = X @ [1.0, 0.0, -1.0] + rng.standard_normal(n)
    res = fit(y, X, ["a", "b", "c"], clusters=[rng.integers(0, 30, n), rng.integers(0, 20, n)])
    assert np.allclose(res.cov, res.cov.T)
    assert np.linalg.eigvalsh(res.cov).min() >= -1e-14


def test_crve_inclusion_exclusion_by_hand():
    rng = np.random.default_rng(4)
    s = rng.standard_normal((12, 2))
    bread = np.eye(2)
    c1 = np.repeat(np.arange(4), 3)
    c2 = np.tile(np.arange(3), 4)
    V, info = crve(s, bread, [c1, c2], k=2, small_sample=False)
    expected = sum(np.outer(s[c1 == g].sum(0), s[c1 == g].sum(0)) for g in range(4))
    expected += sum(np.outer(s[c2 == g].sum(0), s[c2 == g].sum(0)) for g in range(3))
    expected -= s.T @ s  # intersections are singletons here
    if not info["eigen_repaired"]:
        np.testing.assert_allclose(V, expected, atol=1e-12)
    assert info["n_clusters"][:2] == [4, 3]


def test_fe_linear_combination_column_is_absorbed():
    y, X, a, b, _ = _instance(11, n=50)
    base = fit(y, X, ["x1", "x2"], fe=[a, b])
    combo = 2.0 * (a == 1) - (b == 2) + 3.0
    res = fit(y, np.column_stack([X, combo]), ["x1", "x2", "combo"], fe=[a, b])
    assert res.dropped == ["combo"]
    assert any("combo" in n for n in res.notices)
    np.testing.assert_allclose(res.coef[:2], base.coef, atol=1e-10)
    assert res.coef[2] == 0.0


def test_protected_collinear_column_raises():
    y, X, a, b, _ = _instance(12, n=40)
    with pytest.raises(RankDeficiencyError) as exc:
        fit(y, np.column_stack([X, (a == 0).astype(float)]), ["x1", "x2", "d"], fe=[a, b], protect=["d"])
    assert exc.value.columns == ["d"]


def test_single_level_fe_dropped_with_notice():
    y, X, a, b, _ = _instance(13, n=40)
    res = fit(y, X, ["x1", "x2"], fe=[a, np.zeros(40), b], fe_names=["a", "const", "b"])
    ref = fit(y, X, ["x1", "x2"], fe=[a, b])
    assert any("const" in n for n in res.notices)
    np.testing.assert_allclose(res.coef, ref.coef, atol=1e-12)


def test_equal_weights_equal_ols():
    y, X, a, b, _ = _instance(14)
    ols = fit(y, X, ["x1", "x2"], fe=[a, b], clusters=[a])
    wls = fit(y, X, ["x1", "x2"], fe=[a, b], weights=np.full(len(y), 3.7), clusters=[a])
    np.testing.assert_allclose(wls.coef, ols.coef, atol=1e-10)
    np.testing.assert_allclose(wls.cov, ols.cov, atol=1e-10)


def test_no_fe_adds_intercept():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((30, 1))
    y = 2.0 + 3.0 * X[:, 0]
    res = fit(y, X, ["x"])
    assert res.names == ["x", "_cons"]
    np.testing.assert_allclose(res.coef, [3.0, 2.0], atol=1e-12)
    np.testing.assert_allclose(res.cov, 0.0, atol=1e-20)


def test_demeaning_nonconvergence_raises():
    rng = np.random.default_rng(1)
    n = 300
    a, b = rng.integers(0, 40, n), rng.integers(0, 40, n)
    with pytest.raises(ConvergenceError, match="did not converge"):
        demean(rng.standard_normal(n), [a, b], max_sweeps=1)


def test_factorize_sorted_codes():
    assert factorize(np.array(["b", "a", "b"])).tolist() == [1, 0, 1]
    assert factorize(np.array([1, 1, 2]), np.array(["x", "y", "x"])).tolist() == [0, 1, 2]
