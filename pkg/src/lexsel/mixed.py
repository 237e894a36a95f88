"""Gaussian linear mixed model with crossed random intercepts.

    y = X beta + sum_g Z_g b_g + e,   b_g ~ N(0, s2 * theta_g I),   e ~ N(0, s2 I)

Variance ratios theta_g are found by maximizing the profiled likelihood;
random effects come from the penalized least-squares (mixed-model)
equations, as in lme4.  A row of Z_g may have more than one nonzero, which
lets an observation involve several members of the same grouping factor
(a correlation between two participants, say).
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize


@dataclass(frozen=True)
class MixedFit:
    beta: np.ndarray
    blups: tuple          # one array per grouping factor
    theta: np.ndarray     # variance ratios sigma_g^2 / sigma^2
    sigma2: float
    deviance: float       # -2 log likelihood (ML)
    converged: bool


def _solve(y, X, Z, lam):
    """Penalized least squares at relative std-devs ``lam`` (one per column of Z)."""
    ZL = Z * lam
    q = Z.shape[1]
    p = X.shape[1]
    A = np.empty((q + p, q + p))
    A[:q, :q] = ZL.T @ ZL + np.eye(q)
    A[:q, q:] = ZL.T @ X
    A[q:, :q] = A[:q, q:].T
    A[q:, q:] = X.T @ X
    rhs = np.concatenate([ZL.T @ y, X.T @ y])
    cho = linalg.cho_factor(A, lower=True)
    sol = linalg.cho_solve(cho, rhs)
    u, beta = sol[:q], sol[q:]
    resid = y - X @ beta - ZL @ u
    prss = resid @ resid + u @ u
    logdet = 2.0 * np.sum(np.log(np.diag(cho[0][:q, :q])))
    return u, beta, prss, logdet


def profiled_deviance(y, X, Z, lam):
    n = len(y)
    _, _, prss, logdet = _solve(y, X, Z, lam)
    return logdet + n * (1.0 + np.log(2.0 * np.pi * prss / n))


def fit_crossed(y, Z_groups, X=None) -> MixedFit:
    """ML fit of random intercepts for each design matrix in ``Z_groups``."""
    y = np.asarray(y, dtype=float)
    n = len(y)
    if X is None:
        X = np.ones((n, 1))
    sizes = [Zg.shape[1] for Zg in Z_groups]
    Z = np.hstack([np.asarray(Zg, dtype=float) for Zg in Z_groups])
    beta0 = np.linalg.lstsq(X, y, rcond=None)[0]
    if np.allclose(X @ beta0, y, rtol=0, atol=1e-12 * max(1.0, np.abs(y).max())):
        # fixed effects fit exactly: no variance left for the random terms
        blups = tuple(np.zeros(s) for s in sizes)
        return MixedFit(beta0, blups, np.zeros(len(sizes)), 0.0, -np.inf, True)

    def expand(h):
        return np.repeat(h, sizes)

    def dev(h):
        return profiled_deviance(y, X, Z, expand(h))

    best = None
    for start in (0.5, 1.0, 2.0):
        res = optimize.minimize(
            dev, np.full(len(sizes), start), method="L-BFGS-B",
            bounds=[(0.0, None)] * len(sizes),
        )
        if best is None or res.fun < best.fun:
            best = res
    h = best.x
    u, beta, prss, _ = _solve(y, X, Z, expand(h))
    b = expand(h) * u
    blups = tuple(np.split(b, np.cumsum(sizes)[:-1]))
    return MixedFit(beta, blups, h**2, prss / n, float(best.fun), bool(best.success))
