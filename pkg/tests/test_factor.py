import warnings

import numpy as np
import pytest
from scipy.special import betaln, logit

from helpers import central_gradient, random_counts
from lexsel.data import CountsTable, DataError, item_key
from lexsel.errors import DomainError
from lexsel.factor import (
    FactorConfig,
    LFAParams,
    assemble_features,
    default_base,
    glove_fit,
    glove_loss,
    glove_weight,
    lda_fit,
    lfa_fit,
    lfa_objective,
    load_sentence_features,
)
from lexsel.freq import bnb_log_posterior, bnb_map


@pytest.fixture(scope="module")
def counts():
    return random_counts(4, V=25, F=12, scale=6)


# ------------------------------------------------------------------ LDA


def test_lda_single_component():
    ct = CountsTable.from_dense(list("abc"), list("wxyz"), [[5, 3, 0, 1], [2, 6, 0, 0], [0, 1, 4, 4]])
    fit = lda_fit(ct, 1)
    np.testing.assert_allclose(fit.theta, 1.0)
    c = ct.dense().sum(axis=0)
    # prior 1/K = 1 pseudo-count per frame
    np.testing.assert_allclose(fit.phi[0], (c + 1) / (c.sum() + 4), rtol=1e-10)


def test_lda_two_blocks():
    ct = CountsTable.from_dense(list("abcd"), list("1234"),
                                [[5, 3, 0, 0], [2, 6, 0, 0], [0, 0, 4, 4], [0, 0, 7, 1]])
    th = lda_fit(ct, 2).theta
    k = th[0].argmax()
    assert th[0, k] > 0.9 and th[1, k] > 0.9
    assert th[2, 1 - k] > 0.9 and th[3, 1 - k] > 0.9


def test_lda_bound_monotone(counts):
    b = np.array(lda_fit(counts, 4).diagnostics["bound"])
    assert len(b) > 2
    assert np.all(np.diff(b) >= -1e-9 * np.abs(b[1:]))


@pytest.mark.parametrize("iters", [1, 2, 5])
def test_lda_simplices_each_iteration(counts, iters):
    fit = lda_fit(counts, 3, FactorConfig(max_iters=iters))
    for m in (fit.theta, fit.phi):
        assert np.all(m >= 0)
        assert np.all(np.abs(m.sum(axis=1) - 1) < 1e-8)


def test_lda_overcomplete_warns():
    ct = random_counts(0, V=6, F=3)
    with pytest.warns(UserWarning, match="exceeds"):
        lda_fit(ct, 5)


def test_lda_deterministic(counts):
    np.testing.assert_array_equal(lda_fit(counts, 3).theta, lda_fit(counts, 3).theta)


# ------------------------------------------------------------------ LFA


def test_lfa_gradient(counts):
    C = counts.dense().astype(float)
    rng = np.random.default_rng(0)
    V, F = C.shape
    K = 3
    for l2, g in [(0.0, 0.0), (0.01, 0.1)]:
        U, A, rho = rng.normal(0, 0.5, (V, K)), rng.normal(0, 0.5, (K, F)), rng.normal(1, 0.5, V)
        x = np.concatenate([U.ravel(), A.ravel(), rho])

        def f(z):
            return lfa_objective(C, z[:V * K].reshape(V, K), z[V * K:V * K + K * F].reshape(K, F), z[V * K + K * F:], l2, g)[0]

        _, dU, dA, dr = lfa_objective(C, U, A, rho, l2, g)
        an = np.concatenate([dU.ravel(), dA.ravel(), dr])
        idx = rng.choice(len(x), 40, replace=False)
        fd = central_gradient(f, x, idx)
        assert np.max(np.abs(fd - an[idx]) / np.maximum(1, np.abs(fd))) < 1e-4


def test_lfa_gauge_invariance(counts):
    fit = lfa_fit(counts, 3)
    Q = np.linalg.qr(np.random.default_rng(1).normal(size=(3, 3)))[0] @ np.diag([2.0, 0.5, 1.5])
    other = LFAParams(fit.verbs, fit.frames, fit.U @ Q, np.linalg.inv(Q) @ fit.A, fit.rate)
    assert np.max(np.abs(other.reconstruction() - fit.reconstruction())) < 1e-8


def test_lfa_nests_bnb():
    ct = random_counts(7, V=10, F=5)
    C = ct.dense().astype(float)
    b = bnb_map(ct, 0.1)
    U0 = logit(b.pi)
    rho = b.rate + np.log(-np.expm1(-b.rate))
    # K = F with A = I reproduces the per-cell model exactly (up to the Beta constant)
    at_bnb = lfa_objective(C, U0, np.eye(5), rho, 0.0, 0.1)[0]
    post = bnb_log_posterior(C, U0, rho, 0.1)[0].sum()
    assert at_bnb == pytest.approx(post + C.size * betaln(1.1, 1.1), rel=1e-12)
    fit = lfa_fit(ct, 5, FactorConfig(l2=0.0), init={"U": U0, "A": np.eye(5), "rate": b.rate})
    assert fit.diagnostics["objective"] >= at_bnb - 1e-9


def test_lfa_zero_row():
    c = random_counts(2, V=6, F=5).dense().astype(float)
    c[0] = 0
    rng = np.random.default_rng(3)
    # at any positive rate the likelihood pushes every pi in the row down
    for _ in range(5):
        U, A, rho = rng.normal(size=(6, 2)), rng.normal(size=(2, 5)), rng.normal(size=6)
        eta = U @ A
        _, dU, dA, _ = lfa_objective(c, U, A, rho)
        G = c * (1 - 1 / (1 + np.exp(-eta))) - np.logaddexp(0, rho)[:, None] / (1 + np.exp(-eta))
        assert np.all(G[0] < 0)
        np.testing.assert_allclose(dU[0], G[0] @ A.T)
    # jointly, the row's rate collapses, leaving its pi unidentified
    fit = lfa_fit(CountsTable.from_dense([f"v{i}" for i in range(6)], [f"f{j}" for j in range(5)], c), 2)
    assert fit.rate[0] < 1e-3


def test_lfa_deterministic(counts):
    a, b = lfa_fit(counts, 2), lfa_fit(counts, 2)
    np.testing.assert_array_equal(a.U, b.U)
    assert not np.array_equal(a.U, lfa_fit(counts, 2, FactorConfig(seed=1)).U)


# ------------------------------------------------------------------ GloVe


def test_glove_weight():
    assert glove_weight(10) == 1.0
    assert glove_weight(50) == 1.0
    assert glove_weight(5) == pytest.approx(0.5 ** 0.75)
    assert glove_weight(5) == pytest.approx(0.5946, abs=1e-4)


def test_glove_rank_one():
    c = np.outer(np.arange(1, 7), [1, 2, 3, 5, 8])
    fit = glove_fit(c, 1)
    resid = fit.W @ fit.W2.T + fit.b[:, None] + fit.b2[None, :] - np.log(c)
    assert np.abs(resid).max() < 1e-3


def test_glove_swap_invariance(counts):
    C = counts.dense()
    rng = np.random.default_rng(0)
    W, W2 = rng.normal(size=(25, 4)), rng.normal(size=(12, 4))
    b, b2 = rng.normal(size=25), rng.normal(size=12)
    assert glove_loss(C, W, W2, b, b2) == pytest.approx(glove_loss(C.T, W2, W, b2, b), rel=1e-14)


def test_glove_ignores_zero_cells(counts):
    C = counts.dense().astype(float)
    rng = np.random.default_rng(1)
    args = rng.normal(size=(25, 2)), rng.normal(size=(12, 2)), rng.normal(size=25), rng.normal(size=12)
    base = glove_loss(C, *args)
    # changing the model's prediction only at zero cells cannot matter, which
    # we check by perturbing a verb whose row is all zero
    C2 = np.vstack([C, np.zeros(12)])
    W, W2, b, b2 = args
    for shift in (0.0, 5.0):
        ext = (np.vstack([W, np.full(2, shift)]), W2, np.append(b, shift), b2)
        assert glove_loss(C2, *ext) == pytest.approx(base)


def test_glove_deterministic(counts):
    np.testing.assert_array_equal(glove_fit(counts, 3).W, glove_fit(counts, 3).W)


# ------------------------------------------------------------------ assembly


def test_assemble_lda_with_base():
    ct = random_counts(3, V=15, F=163, scale=3, zero_frac=0.5)
    fit = lda_fit(ct, 5)
    fm = assemble_features(fit, default_base(ct, "lda"))
    assert fm.dim == 326 and len(fm) == 15
    np.testing.assert_allclose(fm.values[:, :163].sum(axis=1), 1, atol=1e-10)
    assert assemble_features(fit).dim == 163
    assert assemble_features(fit, mode="latent").dim == 5


def test_assemble_glove_and_lfa(counts):
    g = glove_fit(counts, 15)
    assert assemble_features(g).dim == 15
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        l = lfa_fit(counts, 2)
        fm = assemble_features(l, default_base(counts, "lfa"))
    assert fm.dim == 24
    assert assemble_features(l, mode="latent").dim == 2


def test_assemble_misaligned(counts):
    fit = lda_fit(counts, 2)
    other = default_base(random_counts(4, V=5, F=12), "lda")
    with pytest.raises(DomainError):
        assemble_features(fit, other)


# ------------------------------------------------------------------ sentence features


def _write(path, rows):
    path.write_text("".join("\t".join(map(str, r)) + "\n" for r in rows))
    return path


def test_sentence_features_basic(tmp_path):
    p = _write(tmp_path / "e.tsv", [("think", "NP V S", 0.1, 0.2, 0.3), ("know", "NP V S", 1, 2, 3)])
    fm = load_sentence_features(p)
    assert fm.row_keys == (item_key("think", "NP V S"), item_key("know", "NP V S"))
    assert fm.dim == 3
    h = _write(tmp_path / "h.tsv", [("verb", "frame", "a", "b"), ("x", "y", 1, 2)])
    assert load_sentence_features(h).columns == ("a", "b")


def test_sentence_features_errors(tmp_path):
    with pytest.raises(DataError):
        load_sentence_features(_write(tmp_path / "empty.tsv", []))
    with pytest.raises(DataError):
        load_sentence_features(_write(tmp_path / "dup.tsv", [("a", "f", 1), ("a", "f", 2)]))
    with pytest.raises(DataError, match="line 2"):
        load_sentence_features(_write(tmp_path / "rag.tsv", [("a", "f", 1, 2), ("b", "f", 1)]))


@pytest.mark.slow
def test_sentence_features_large(tmp_path):
    rng = np.random.default_rng(0)
    n, d = 50_000, 768
    p = tmp_path / "big.tsv"
    vals = rng.normal(size=(n, d)).astype(np.float32)
    with open(p, "w") as fh:
        for i in range(n):
            fh.write(f"v{i // 50}\tf{i % 50}\t" + "\t".join(f"{x:.5g}" for x in vals[i]) + "\n")
    fm = load_sentence_features(p)
    assert fm.values.shape == (50_000, 768)
    np.testing.assert_allclose(fm.values[123], vals[123], rtol=1e-4)
