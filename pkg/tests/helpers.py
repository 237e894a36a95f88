"""Synthetic data generators shared by the test modules.

Ratings are forward-simulated from the cumulative-logit model written out
here independently of the package (plain logistic CDF differences), so
fits can be checked against known parameters.
"""

import numpy as np

from lexsel.data import CountsTable, RatingsTable


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def true_probabilities(cuts, a):
    """Category probabilities from cutpoints ``cuts`` (K-1,) at latent ``a``."""
    cdf = np.concatenate([[0.0], _logistic(np.asarray(cuts) - a), [1.0]])
    return np.diff(cdf)


def random_cutpoints(rng, P, K=7):
    base = np.linspace(-3, 3, K - 1)
    return np.array([
        np.sort(base * np.exp(rng.normal(0, 0.2)) + rng.normal(0, 0.5) + rng.normal(0, 0.2, K - 1))
        for _ in range(P)
    ])


def simulate_ratings(seed, P=100, V=20, F=10, per_item=5, sds=(3.0, 3.0, 2.0), design="random"):
    """Ratings drawn from a known ordinal model.

    ``design="random"``: each item is rated by ``per_item`` distinct random
    participants, and each verb forms its own list.
    ``design="lists"``: items are dealt into lists of ``F`` items and
    ``per_item`` participants complete each list, so co-list pairs exist.
    Returns (table, true acceptability V x F, true cutpoints P x 6).
    """
    rng = np.random.default_rng(seed)
    a = rng.normal(0, sds[0], (V, 1)) + rng.normal(0, sds[1], (1, F)) + rng.normal(0, sds[2], (V, F))
    cuts = random_cutpoints(rng, P)
    recs = []

    def draw(p, v, f):
        return int(rng.choice(len(cuts[p]) + 1, p=true_probabilities(cuts[p], a[v, f]))) + 1

    if design == "random":
        for v in range(V):
            for f in range(F):
                for p in rng.choice(P, per_item, replace=False):
                    recs.append((f"p{p}", f"l{v}", f"v{v}", f"f{f}", draw(p, v, f)))
    else:
        cells = rng.permutation(V * F)
        lists = np.array_split(cells, max(1, V * F // F))
        p = 0
        for li, cell_ids in enumerate(lists):
            for _ in range(per_item):
                for c in cell_ids:
                    v, f = divmod(int(c), F)
                    recs.append((f"p{p % P}", f"l{li}", f"v{v}", f"f{f}", draw(p % P, v, f)))
                p += 1
    return RatingsTable.from_records(recs), a, cuts


def aligned_acceptability(params, V, F):
    """Fitted acceptability reordered to the generator's (v, f) grid."""
    vi = {v: i for i, v in enumerate(params.verbs)}
    fi = {f: i for i, f in enumerate(params.frames)}
    rows = [vi[f"v{v}"] for v in range(V)]
    cols = [fi[f"f{f}"] for f in range(F)]
    return params.acceptability[np.ix_(rows, cols)]


def random_counts(seed, V=8, F=6, scale=5.0, zero_frac=0.3):
    rng = np.random.default_rng(seed)
    c = rng.poisson(scale, (V, F)) * (rng.random((V, F)) > zero_frac)
    c[:, 0] += 1  # no empty rows
    return CountsTable.from_dense([f"v{i}" for i in range(V)], [f"f{j}" for j in range(F)], c)


def central_gradient(fun, x, idx, h=1e-5):
    """Central finite differences of scalar ``fun`` at coordinates ``idx``."""
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        e = np.zeros_like(x)
        e[i] = h
        out[n] = (fun(x + e) - fun(x - e)) / (2 * h)
    return out


def dc_gradient_map(counts_row, lam):
    """Dirichlet-categorical MAP by numerical optimization over softmax logits.

    Maximizes sum_f (c_f + lam) log theta_f, the log posterior under a
    symmetric Dirichlet(lam + 1) prior, without using the closed form.
    """
    from scipy import optimize
    from scipy.special import log_softmax, softmax

    w = np.asarray(counts_row, dtype=float) + lam

    def neg(z):
        return -(w @ log_softmax(z)), -(w - w.sum() * softmax(z))

    res = optimize.minimize(neg, np.zeros(len(w)), jac=True, method="BFGS",
                            options={"gtol": 1e-12, "maxiter": 10000})
    return softmax(res.x)
