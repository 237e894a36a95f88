"""Abstraction models over the verb x frame count matrix.

* LDA: verbs as documents, frames as word types, counts as multiplicities;
  batch mean-field variational EM with symmetric priors 1/K.
* LFA: logistic factor analysis, pi_vf = sigmoid(u_v . a_f), with a
  negative binomial likelihood and per-verb rates.
* GloVe: weighted least squares on log counts over nonzero cells.

Plus assembly of regression features from the fitted models and ingestion
of externally computed sentence embeddings.
"""

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import digamma, expit, gammaln, log_expit

from .data import CountsTable, DataError, FeatureMatrix, item_key
from .errors import ConfigError, ConvergenceWarning, DomainError
from .freq import bnb_map, dc_map

log = logging.getLogger(__name__)

K_GRID = (2, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50)
MODELS = ("lda", "lfa", "glove")


@dataclass(frozen=True)
class FactorConfig:
    seed: int = 0
    max_iters: int = 100          # EM iterations (LDA) / optimizer iterations x 50 (LFA, GloVe)
    inner_tol: float = 1e-4       # LDA per-document mean change in gamma
    inner_iters: int = 100
    tol: float = 1e-9             # relative objective change (LFA, GloVe)
    l2: float = 1e-2              # LFA ridge on U and A
    prior_gamma: float = 0.1      # LFA Beta(g + 1, g + 1) prior on each pi_vf
    c_cutoff: float = 10.0        # GloVe weighting
    alpha_exp: float = 0.75

    def __post_init__(self):
        if self.c_cutoff <= 0:
            raise DomainError("c_cutoff must be positive")
        if self.max_iters < 1 or self.inner_iters < 1:
            raise DomainError("iteration limits must be positive")


def _check_k(K):
    if int(K) != K or K < 1:
        raise DomainError(f"K must be a positive integer, got {K}")


# ------------------------------------------------------------------ LDA


@dataclass(frozen=True, eq=False)
class LDAParams:
    verbs: tuple
    frames: tuple
    theta: np.ndarray     # V x K, rows are P(k | v)
    phi: np.ndarray       # K x F, rows are P(f | k)
    K: int
    alpha: float
    eta: float
    diagnostics: dict = field(default_factory=dict)

    def reconstruction(self) -> np.ndarray:
        return self.theta @ self.phi


def _dirichlet_expectation(x):
    return digamma(x) - digamma(x.sum(axis=1, keepdims=True))


def _lda_bound(C, gamma, lam, alpha, eta):
    """Evidence lower bound with the topic assignments optimized out."""
    Elt = _dirichlet_expectation(gamma)
    Elb = _dirichlet_expectation(lam)
    K = gamma.shape[1]
    F = lam.shape[1]
    # sum_d sum_f c_df log sum_k exp(Elog theta_dk + Elog beta_kf), stably
    m = Elt.max(axis=1, keepdims=True) + Elb.max(axis=0, keepdims=True)
    norm = np.log(np.exp(Elt - Elt.max(axis=1, keepdims=True)) @ np.exp(Elb - Elb.max(axis=0, keepdims=True))) + m
    b = np.sum(C * norm)
    b += np.sum((alpha - gamma) * Elt) + np.sum(gammaln(gamma) - gammaln(alpha))
    b += np.sum(gammaln(alpha * K) - gammaln(gamma.sum(axis=1)))
    b += np.sum((eta - lam) * Elb) + np.sum(gammaln(lam) - gammaln(eta))
    b += np.sum(gammaln(eta * F) - gammaln(lam.sum(axis=1)))
    return float(b)


def lda_fit(counts: CountsTable, K: int, cfg: FactorConfig = FactorConfig()) -> LDAParams:
    """Batch variational EM; the bound is non-decreasing across iterations."""
    _check_k(K)
    C = counts.dense().astype(float)
    V, F = C.shape
    if K > F:
        warnings.warn(f"K={K} exceeds the number of frames ({F})", UserWarning, stacklevel=2)
    alpha = eta = 1.0 / K
    rng = np.random.default_rng(cfg.seed)
    lam = rng.gamma(100.0, 1.0 / 100.0, (K, F))
    gamma = np.full((V, K), alpha) + C.sum(axis=1, keepdims=True) / K
    trace = []
    for it in range(1, cfg.max_iters + 1):
        eb = np.exp(_dirichlet_expectation(lam))
        # E-step for every verb at once, warm-started from the last gamma
        for _ in range(cfg.inner_iters):
            et = np.exp(_dirichlet_expectation(gamma))
            norm = et @ eb + 1e-100
            new = alpha + et * ((C / norm) @ eb.T)
            change = np.abs(new - gamma).mean(axis=1)
            gamma = new
            if change.max() < cfg.inner_tol:
                break
        et = np.exp(_dirichlet_expectation(gamma))
        norm = et @ eb + 1e-100
        lam = eta + eb * (et.T @ (C / norm))
        trace.append(_lda_bound(C, gamma, lam, alpha, eta))
        if it > 1 and abs(trace[-1] - trace[-2]) <= 1e-10 * abs(trace[-1]):
            break
    theta = gamma / gamma.sum(axis=1, keepdims=True)
    phi = lam / lam.sum(axis=1, keepdims=True)
    return LDAParams(counts.verbs, counts.frames, theta, phi, int(K), alpha, eta,
                     {"bound": trace, "iterations": len(trace)})


# ------------------------------------------------------------------ LFA


@dataclass(frozen=True, eq=False)
class LFAParams:
    verbs: tuple
    frames: tuple
    U: np.ndarray         # V x K
    A: np.ndarray         # K x F
    rate: np.ndarray      # V
    diagnostics: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.U.shape[1]

    def reconstruction(self) -> np.ndarray:
        return expit(self.U @ self.A)


def lfa_objective(C, U, A, rho, l2=0.0, prior_gamma=0.0):
    """NegBin log likelihood plus optional priors, with gradients.

    ``prior_gamma`` adds a Beta(g + 1, g + 1) log prior on every pi_vf (up to
    a constant), the prior of the per-cell BNB model; ``l2`` a ridge on U, A.
    Returns (value, dU, dA, drho) with r = softplus(rho).
    """
    eta = U @ A
    r = np.logaddexp(0.0, rho)
    rr = r[:, None]
    lp, lq = log_expit(eta), log_expit(-eta)
    val = np.sum(gammaln(C + rr) - gammaln(rr) - gammaln(C + 1) + rr * lq + C * lp)
    val += prior_gamma * np.sum(lp + lq) - l2 * (np.sum(U * U) + np.sum(A * A))
    pi = expit(eta)
    G = C * (1 - pi) - rr * pi + prior_gamma * (1 - 2 * pi)
    dU = G @ A.T - 2 * l2 * U
    dA = U.T @ G - 2 * l2 * A
    dr = np.sum(digamma(C + rr) - digamma(rr) + lq, axis=1) * expit(rho)
    return float(val), dU, dA, dr


def lfa_fit(counts: CountsTable, K: int, cfg: FactorConfig = FactorConfig(), init=None) -> LFAParams:
    """Maximize the LFA log likelihood by L-BFGS over (U, A, softplus^-1 r).

    ``init`` may supply any of ``U``, ``A``, ``rate`` as starting values.
    """
    _check_k(K)
    C = counts.dense().astype(float)
    V, F = C.shape
    rng = np.random.default_rng(cfg.seed)
    init = init or {}
    U0 = np.asarray(init.get("U", rng.normal(0, 0.1, (V, K))), dtype=float)
    A0 = np.asarray(init.get("A", rng.normal(0, 0.1, (K, F))), dtype=float)
    if U0.shape != (V, K) or A0.shape != (K, F):
        raise DomainError("initial U/A do not match the counts and K")
    occupied = np.maximum((C > 0).sum(axis=1), 1)
    r0 = np.asarray(init.get("rate", np.maximum(C.sum(axis=1) / occupied, 0.1)), dtype=float)
    rho0 = r0 + np.log(-np.expm1(-r0))
    sizes = [V * K, K * F]

    def unpack(x):
        return x[: sizes[0]].reshape(V, K), x[sizes[0]: sizes[0] + sizes[1]].reshape(K, F), x[sum(sizes):]

    def neg(x):
        U, A, rho = unpack(x)
        val, dU, dA, dr = lfa_objective(C, U, A, rho, cfg.l2, cfg.prior_gamma)
        return -val, -np.concatenate([dU.ravel(), dA.ravel(), dr])

    res = optimize.minimize(
        neg, np.concatenate([U0.ravel(), A0.ravel(), rho0]), jac=True, method="L-BFGS-B",
        options={"maxiter": 50 * cfg.max_iters, "ftol": cfg.tol, "gtol": 1e-6},
    )
    if not res.success:
        warnings.warn(f"LFA (K={K}) did not converge: {res.message}", ConvergenceWarning, stacklevel=2)
    U, A, rho = unpack(res.x)
    r = np.logaddexp(0.0, rho)
    diag = {"objective": float(-res.fun), "iterations": int(res.nit), "converged": bool(res.success),
            "grad_norm": float(np.linalg.norm(res.jac))}
    return LFAParams(counts.verbs, counts.frames, U, A, r, diag)


# ------------------------------------------------------------------ GloVe


@dataclass(frozen=True, eq=False)
class GloveParams:
    verbs: tuple
    frames: tuple
    W: np.ndarray         # V x K
    W2: np.ndarray        # F x K
    b: np.ndarray
    b2: np.ndarray
    c_cutoff: float = 10.0
    alpha_exp: float = 0.75
    diagnostics: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return self.W.shape[1]


def glove_weight(c, c_cutoff=10.0, alpha_exp=0.75):
    """f(c) = min(1, c / c_cutoff) ** alpha_exp."""
    return np.minimum(1.0, np.asarray(c, dtype=float) / c_cutoff) ** alpha_exp


def glove_loss(C, W, W2, b, b2, c_cutoff=10.0, alpha_exp=0.75, with_grad=False):
    """Weighted squared error of w_v . w'_f + b_v + b'_f against log c_vf, over c > 0."""
    C = np.asarray(C, dtype=float)
    nz = C > 0
    logc = np.log(np.where(nz, C, 1.0))
    wt = np.where(nz, glove_weight(C, c_cutoff, alpha_exp), 0.0)
    err = W @ W2.T + b[:, None] + b2[None, :] - logc
    val = float(np.sum(wt * err * err))
    if not with_grad:
        return val
    g = 2 * wt * err
    return val, g @ W2, g.T @ W, g.sum(axis=1), g.sum(axis=0)


def glove_fit(counts, K: int, cfg: FactorConfig = FactorConfig()) -> GloveParams:
    """Minimize the GloVe loss by L-BFGS from a seeded small random start."""
    _check_k(K)
    if isinstance(counts, CountsTable):
        verbs, frames, C = counts.verbs, counts.frames, counts.dense().astype(float)
    else:
        C = np.asarray(counts, dtype=float)
        verbs = tuple(f"v{i}" for i in range(C.shape[0]))
        frames = tuple(f"f{j}" for j in range(C.shape[1]))
    V, F = C.shape
    rng = np.random.default_rng(cfg.seed)
    x0 = np.concatenate([rng.normal(0, 0.1, V * K + F * K), np.zeros(V + F)])

    def unpack(x):
        W = x[: V * K].reshape(V, K)
        W2 = x[V * K: V * K + F * K].reshape(F, K)
        return W, W2, x[V * K + F * K: V * K + F * K + V], x[V * K + F * K + V:]

    def fun(x):
        val, *grads = glove_loss(C, *unpack(x), cfg.c_cutoff, cfg.alpha_exp, with_grad=True)
        return val, np.concatenate([g.ravel() for g in grads])

    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 50 * cfg.max_iters, "ftol": cfg.tol, "gtol": 1e-9})
    if not res.success and res.fun > 1e-12:
        warnings.warn(f"GloVe (K={K}) did not converge: {res.message}", ConvergenceWarning, stacklevel=2)
    W, W2, b, b2 = unpack(res.x)
    return GloveParams(verbs, frames, W, W2, b, b2, cfg.c_cutoff, cfg.alpha_exp,
                       {"loss": float(res.fun), "iterations": int(res.nit), "converged": bool(res.success)})


# ------------------------------------------------------------------ features


def fit_model(counts: CountsTable, model: str, K: int, cfg: FactorConfig = FactorConfig()):
    if model == "lda":
        return lda_fit(counts, K, cfg)
    if model == "lfa":
        return lfa_fit(counts, K, cfg)
    if model == "glove":
        return glove_fit(counts, K, cfg)
    raise DomainError(f"unknown factor model {model!r}; expected one of {MODELS}")


def default_base(counts: CountsTable, model: str):
    """The normalized-count block concatenated with each model's features."""
    if model == "lda":
        return dc_map(counts, 0.0).to_features()
    if model == "lfa":
        return bnb_map(counts, 0.1).to_features()
    return None


def assemble_features(fit, base: FeatureMatrix = None, mode: str = "reconstruction") -> FeatureMatrix:
    """Regression inputs from a fitted factor model.

    reconstruction: LDA theta @ phi, LFA sigmoid(U A); latent: theta or U.
    GloVe always yields the verb vectors W.  ``base`` (if any) is appended.
    """
    if mode not in ("reconstruction", "latent"):
        raise DomainError(f"unknown assembly mode {mode!r}")
    if isinstance(fit, LDAParams):
        name = "lda"
        if mode == "reconstruction":
            x, cols = fit.reconstruction(), fit.frames
        else:
            x, cols = fit.theta, tuple(f"k{k}" for k in range(fit.K))
    elif isinstance(fit, LFAParams):
        name = "lfa"
        if mode == "reconstruction":
            x, cols = fit.reconstruction(), fit.frames
        else:
            x, cols = fit.U, tuple(f"k{k}" for k in range(fit.K))
    elif isinstance(fit, GloveParams):
        name = "glove"
        x, cols = fit.W, tuple(f"k{k}" for k in range(fit.K))
    else:
        raise DomainError(f"cannot assemble features from {type(fit).__name__}")
    fm = FeatureMatrix(fit.verbs, x, cols, {"model": name, "hyperparameter": int(fit.K), "mode": mode})
    if base is None:
        return fm
    if set(base.row_keys) != set(fit.verbs):
        raise DomainError("base features and model cover different verbs")
    out = fm.concat(base, prefix=(name, base.meta.get("model", "base")))
    return FeatureMatrix(out.row_keys, out.values, out.columns, dict(fm.meta, base=base.meta))


# ------------------------------------------------------------------ sentence features


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_sentence_features(path) -> FeatureMatrix:
    """Item-level embeddings: ``verb<TAB>frame<TAB>x1 ... xd`` per line.

    A header line is allowed (detected by a non-numeric third field).  Row
    keys are item keys built from (verb, frame).
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\n").rstrip("\r") for ln in fh]
    lines = [(n + 1, ln) for n, ln in enumerate(lines) if ln.strip()]
    if not lines:
        raise DataError("empty feature file", path=path)
    first = lines[0][1].split("\t")
    if len(first) < 3:
        raise DataError("need verb, frame and at least one value per row", line=lines[0][0], path=path)
    columns = None
    if not _is_number(first[2]):
        columns = tuple(first[2:])
        lines = lines[1:]
        if not lines:
            raise DataError("feature file has a header but no rows", path=path)
    width = len(lines[0][1].split("\t"))
    keys, seen = [], set()
    values = np.empty((len(lines), width - 2))
    for i, (n, ln) in enumerate(lines):
        parts = ln.split("\t")
        if len(parts) != width:
            raise DataError(f"ragged row: expected {width} fields, got {len(parts)}", line=n, path=path)
        key = item_key(parts[0], parts[1])
        if key in seen:
            raise DataError(f"duplicate item {parts[0]!r}, {parts[1]!r}", line=n, path=path)
        seen.add(key)
        keys.append(key)
        try:
            values[i] = np.array(parts[2:], dtype=float)
        except ValueError:
            raise DataError("non-numeric feature value", line=n, path=path) from None
    if columns is not None and len(columns) != values.shape[1]:
        raise DataError("header width does not match rows", path=path)
    return FeatureMatrix(tuple(keys), values, columns, {"model": "sentence", "source": str(path)})
