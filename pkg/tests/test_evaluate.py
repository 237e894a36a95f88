import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats
from sklearn.linear_model import Ridge

from lexsel.data import AcceptabilityMatrix, CountsTable, FeatureMatrix, item_key
from lexsel.errors import ConfigError, DegenerateWarning
from lexsel.evaluate import (
    ALPHA_GRID,
    CVReport,
    covariate,
    error_correlation,
    fold_indices,
    item_targets,
    nested_cv,
    per_frame_r2,
    r2,
    ridge_fit,
    verb_targets,
)


def _std(X):
    return (X - X.mean(0)) / X.std(0)


def _data(seed, n=60, p=5, t=3, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3, p) + rng.normal(0, 2, p)
    W = rng.normal(size=(p, t))
    Y = X @ W + rng.normal(0, noise, (n, t)) + 1.0
    return X, Y


# ------------------------------------------------------------------ ridge


def test_ridge_ols_limit():
    X, Y = _data(0)
    m = ridge_fit(X, Y, 0.0)
    A = np.hstack([np.ones((len(X), 1)), X])
    ols = A @ np.linalg.lstsq(A, Y, rcond=None)[0]
    assert np.max(np.abs(m.predict(X) - ols)) < 1e-8


def test_ridge_full_shrinkage():
    X, Y = _data(1)
    m = ridge_fit(X, Y, 1e9)
    assert np.max(np.abs(m.weights)) < 1e-6
    np.testing.assert_allclose(m.predict(X), np.broadcast_to(Y.mean(0), Y.shape), atol=1e-5)


def test_ridge_hand_system():
    X = np.array([[1.0, 2.0], [2.0, 0.0], [3.0, 1.0], [4.0, 5.0], [0.0, 1.0]])
    Y = np.array([1.0, 3.0, 2.0, 6.0, 0.5])
    m = ridge_fit(X, Y, 1.0)
    Xs = _std(X)
    w = np.linalg.solve(Xs.T @ Xs + np.eye(2), Xs.T @ (Y - Y.mean()))
    np.testing.assert_allclose(m.weights[:, 0], w, atol=1e-12)
    sk = Ridge(alpha=1.0).fit(Xs, Y)
    np.testing.assert_allclose(m.weights[:, 0], sk.coef_, atol=1e-10)
    np.testing.assert_allclose(m.predict(X)[:, 0], sk.predict(Xs), atol=1e-10)


def test_ridge_rank_deficient_warns():
    X, Y = _data(2)
    X = np.hstack([X, X[:, :1] * 2 + 1])
    with pytest.warns(DegenerateWarning, match="pseudoinverse"):
        ridge_fit(X, Y, 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.integers(0, 4), st.floats(-50, 50).filter(lambda s: abs(s) > 0.01),
       st.floats(-100, 100), st.sampled_from([0.1, 1.0, 10.0]))
def test_ridge_affine_invariance(seed, col, scale, shift, alpha):
    X, Y = _data(seed)
    X2 = X.copy()
    X2[:, col] = X2[:, col] * scale + shift
    a = ridge_fit(X, Y, alpha).predict(X)
    b = ridge_fit(X2, Y, alpha).predict(X2)
    assert np.max(np.abs(a - b)) < 1e-8


def test_ridge_monotone_shrinkage():
    X, Y = _data(3, noise=2.0)
    norms = [np.linalg.norm(ridge_fit(X, Y, a).weights) for a in (0.0,) + ALPHA_GRID + (100.0, 1e4)]
    assert all(n1 >= n2 for n1, n2 in zip(norms, norms[1:]))


def test_ridge_constant_column():
    X, Y = _data(4)
    X = np.hstack([X, np.full((len(X), 1), 3.0)])
    m = ridge_fit(X, Y, 1.0)
    assert np.all(np.isfinite(m.weights)) and np.all(m.scale > 0)


# ------------------------------------------------------------------ R^2


def test_r2_examples():
    assert r2([1, 2, 3], [1, 2, 3]) == 1.0
    assert r2([2, 2, 2], [1, 2, 3], baseline=2.0) == 0.0
    assert r2([1, 2, 4], [1, 2, 3], baseline=2.0) == pytest.approx(0.5)
    with pytest.warns(DegenerateWarning):
        assert np.isnan(r2([1, 1], [1, 1]))


def test_per_frame_r2():
    rng = np.random.default_rng(0)
    truth = rng.normal(size=(40, 4))
    pred = truth + rng.normal(0, 0.3, truth.shape)
    pf = per_frame_r2(pred, truth, frames=("a", "b", "c", "d"))
    assert list(pf) == ["a", "b", "c", "d"]
    bad = pred.copy()
    bad[:, 2] += rng.normal(0, 3, 40)
    pf2 = per_frame_r2(bad, truth, frames=("a", "b", "c", "d"))
    assert pf2["c"] < pf["c"] - 0.5
    for f in "abd":
        assert pf2[f] == pf[f]
    # identical columns share the global value
    same = np.repeat(truth[:, :1], 3, axis=1)
    psame = np.repeat(pred[:, :1], 3, axis=1)
    vals = list(per_frame_r2(psame, same).values())
    assert np.allclose(vals, r2(psame, same))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_pooled_r2_is_ss_weighted_per_frame(seed):
    rng = np.random.default_rng(seed)
    truth = rng.normal(size=(30, 5)) * rng.uniform(0.2, 3, 5)
    pred = truth + rng.normal(0, 1, truth.shape)
    base = rng.normal(0, 0.2, 5)
    pf = np.array(list(per_frame_r2(pred, truth, base).values()))
    ss = np.sum((truth - base) ** 2, axis=0)
    assert r2(pred, truth, base) == pytest.approx(np.sum(ss * pf) / ss.sum(), abs=1e-12)


# ------------------------------------------------------------------ nested CV


def _fm(X, prefix="r"):
    return FeatureMatrix(tuple(f"{prefix}{i}" for i in range(len(X))), X)


def test_cv_realizable():
    X, Y = _data(5, n=100, noise=0.0)
    rep = nested_cv(_fm(X), _fm(Y), seed=1)
    assert rep.mean_r2 > 0.999
    assert len(rep.outer_fold_r2) == 10 and len(rep.chosen_alpha) == 10
    assert rep.mean_r2 == pytest.approx(np.mean(rep.outer_fold_r2), abs=1e-12)


def test_cv_permutation_null():
    X, Y = _data(6, n=120, noise=0.5)
    rng = np.random.default_rng(0)
    vals = []
    for i in range(10):
        rep = nested_cv(_fm(X), _fm(Y[rng.permutation(len(Y))]), seed=i)
        vals.append(rep.mean_r2)
    assert np.mean(vals) <= 0.05
    assert max(vals) <= 0.05


def test_cv_deterministic_and_folds_partition():
    X, Y = _data(7, n=53)
    a = nested_cv(_fm(X), _fm(Y), seed=3)
    b = nested_cv(_fm(X), _fm(Y), seed=3)
    assert a.to_json() == b.to_json()
    flat = [k for f in a.folds for k in f]
    assert sorted(flat) == sorted(f"r{i}" for i in range(53))
    # every held-out cell appears once, from the fold that held it out
    assert len(a.errors) == 53 * 3
    fold_of = {k: i for i, f in enumerate(a.folds) for k in f}
    assert len({e[0] for e in a.errors}) == 53
    assert nested_cv(_fm(X), _fm(Y), seed=4).folds != a.folds
    assert all(fold_of[e[0]] >= 0 for e in a.errors)


def test_fold_indices():
    f = fold_indices(23, 10, 0)
    assert sorted(np.concatenate(f).tolist()) == list(range(23))
    assert [len(x) for x in f] == [3, 3, 3, 2, 2, 2, 2, 2, 2, 2]
    with pytest.raises(ConfigError):
        fold_indices(5, 10, 0)


def test_cv_ties_choose_larger_alpha():
    # a constant feature predicts nothing, so every alpha scores the same
    X = np.full((40, 1), 2.0)
    Y = np.random.default_rng(0).normal(size=(40, 2))
    rep = nested_cv(_fm(X), _fm(Y), alpha_grid=(0.1, 5.0, 1.0), seed=0, outer=4, inner=4)
    assert rep.chosen_alpha == [5.0] * 4


def test_cv_report_roundtrip(tmp_path):
    X, Y = _data(9, n=30)
    rep = nested_cv(_fm(X), _fm(Y), seed=0, outer=5, inner=5)
    rep.save(tmp_path / "r.json")
    back = CVReport.load(tmp_path / "r.json")
    assert back.to_json() == rep.to_json()
    assert rep.ci[0] <= rep.mean_r2 <= rep.ci[1]


def test_cv_errors():
    X, Y = _data(0, n=8)
    with pytest.raises(ConfigError):
        nested_cv(_fm(X), _fm(Y))
    with pytest.raises(ConfigError):
        nested_cv(_fm(X), _fm(Y), alpha_grid=(), outer=2, inner=2)


def test_sentence_level_permutation_null():
    rng = np.random.default_rng(1)
    keys = tuple(item_key(f"v{i // 5}", f"f{i % 5}") for i in range(200))
    X = FeatureMatrix(keys, rng.normal(size=(200, 16)))
    y = FeatureMatrix(keys, rng.normal(size=(200, 1)), ("acceptability",))
    rep = nested_cv(X, y, seed=0)
    assert rep.mean_r2 <= 0.05
    ks, errs = rep.absolute_errors()
    assert len(ks) == 200 and set(ks) == set(keys)


# ------------------------------------------------------------------ targets / error analysis


def _acc():
    acc = np.array([[0.1, 1.2, -0.3], [2.0, np.nan, 0.4], [0.5, 0.6, 0.7]])
    var = np.array([[0.3, 0.5, 0.2], [0.6, np.nan, 0.3], [0.4, 0.4, 0.5]])
    return AcceptabilityMatrix(("a", "b", "c"), ("x", "y", "z"), acc, var)


def test_targets():
    with pytest.warns(DegenerateWarning):
        vt = verb_targets(_acc())
    assert vt.row_keys == ("a", "c") and vt.columns == ("x", "y", "z")
    it = item_targets(_acc())
    assert len(it) == 8 and it.row_keys[0] == item_key("a", "x")


def test_covariates():
    keys = [item_key("a", "y"), item_key("c", "z")]
    assert covariate(keys, "variability", _acc()).tolist() == [0.5, 0.5]
    counts = CountsTable.from_dense(("a", "c"), ("x",), [[3], [7]])
    assert covariate(keys, "frequency", counts=counts).tolist() == [3, 7]
    with pytest.raises(ConfigError):
        covariate(keys, "length")


def test_error_correlation():
    rng = np.random.default_rng(0)
    e = rng.exponential(size=300)
    rho, ci = error_correlation(e, e, replicates=99)
    assert rho == 1.0 and ci.lo == ci.hi == 1.0
    cov = -e + rng.normal(0, 1, 300)
    rho, ci = error_correlation(e, cov, replicates=199, seed=2)
    assert rho == pytest.approx(stats.spearmanr(e, cov)[0], abs=1e-12)
    assert ci.lo < rho < ci.hi < 0
    rho2, ci2 = error_correlation(e, cov, replicates=199, seed=2)
    assert (ci.lo, ci.hi) == (ci2.lo, ci2.hi)
    with pytest.warns(DegenerateWarning):
        assert np.isnan(error_correlation(e, np.ones(300))[0])
