"""Direct normalizations of verb-frame counts.

Four verb-level representations over frames:

* ``dc``  Dirichlet-categorical MAP (add-lambda smoothing of each verb row)
* ``bnb`` beta-negative-binomial MAP of a per-cell "acceptable" probability
* ``pmi`` pointwise mutual information from the add-lambda joint
* ``g``   PMI scaled by P(f | v)

Each produces a verb x frame matrix wrapped as a :class:`FeatureMatrix`.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, digamma, expit, gammaln, logit, xlogy

from .data import CountsTable, FeatureMatrix
from .errors import ConvergenceWarning, DegenerateWarning, DomainError
from .normalize import FitConfig

log = logging.getLogger(__name__)

MODELS = ("dc", "bnb", "pmi", "g")
DEFAULT_GRID = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0)
PI_EPS = 1e-12


def _check_smoothing(lam):
    if not np.isfinite(lam) or lam < 0:
        raise DomainError(f"smoothing must be a finite nonnegative number, got {lam}")


# ------------------------------------------------------------------ DC


@dataclass(frozen=True, eq=False)
class DCParams:
    verbs: tuple
    frames: tuple
    theta: np.ndarray
    lam: float

    def to_features(self) -> FeatureMatrix:
        return FeatureMatrix(self.verbs, self.theta, self.frames, {"model": "dc", "hyperparameter": self.lam})


def dc_map(counts: CountsTable, lam: float) -> DCParams:
    """theta_vf = (c_vf + lam) / (n_v + F * lam)."""
    _check_smoothing(lam)
    c = counts.dense().astype(float)
    tot = c.sum(axis=1)
    if lam == 0 and np.any(tot == 0):
        bad = [counts.verbs[i] for i in np.flatnonzero(tot == 0)[:5]]
        raise DomainError(f"zero-count verbs need lambda > 0: {bad}")
    theta = (c + lam) / (tot + counts.n_frames * lam)[:, None]
    return DCParams(counts.verbs, counts.frames, theta, float(lam))


# ------------------------------------------------------------------ BNB


@dataclass(frozen=True, eq=False)
class BNBParams:
    verbs: tuple
    frames: tuple
    pi: np.ndarray
    rate: np.ndarray
    gamma: float
    diagnostics: dict = field(default_factory=dict)

    def to_features(self) -> FeatureMatrix:
        return FeatureMatrix(self.verbs, self.pi, self.frames, {"model": "bnb", "hyperparameter": self.gamma})


def negbin_logpmf(c, pi, r):
    """log NegBin(c; pi, r) = log C(c + r - 1, c) + r log(1 - pi) + c log pi."""
    return gammaln(c + r) - gammaln(r) - gammaln(c + 1) + xlogy(r, 1 - pi) + xlogy(c, pi)


def bnb_log_posterior(c, logit_pi, rho, gamma):
    """Per-verb log posterior and its gradient.

    c: (V, F) counts; logit_pi: (V, F); rho: (V,) with r = softplus(rho).
    Returns (value (V,), d/dlogit_pi (V, F), d/drho (V,)).
    """
    pi = expit(logit_pi)
    r = np.logaddexp(0.0, rho)
    rr = r[:, None]
    val = negbin_logpmf(c, pi, rr) + gamma * (np.log(pi) + np.log1p(-pi)) - betaln(gamma + 1, gamma + 1)
    # d/dpi (c log pi + r log(1-pi) + g log pi + g log(1-pi)) times dpi/dlogit = pi(1-pi)
    d_lp = (c + gamma) * (1 - pi) - (rr + gamma) * pi
    d_r = np.sum(digamma(c + rr) - digamma(rr) + np.log1p(-pi), axis=1)
    return val.sum(axis=1), d_lp, d_r * expit(rho)


def _profiled_pi(c, r, gamma):
    """argmax over pi of the per-cell posterior at fixed r."""
    pi = (c + gamma) / (c + r[:, None] + 2 * gamma)
    return np.clip(pi, PI_EPS, 1 - PI_EPS)


def _profiled(c, rho, gamma):
    r = np.logaddexp(0.0, rho)
    pi = _profiled_pi(c, r, gamma)
    val, _, d_rho = bnb_log_posterior(c, logit(pi), rho, gamma)
    # envelope theorem: pi is at its optimum, so only the partial in r remains
    return val, d_rho, pi


def bnb_map(counts: CountsTable, gamma: float, cfg: FitConfig = FitConfig(), rate_max: float = 1e8,
            rate=None) -> BNBParams:
    """MAP (pi, r) per verb under Beta(gamma + 1, gamma + 1) priors on pi.

    pi has a closed form given r, so each verb reduces to a one-dimensional
    problem in rho = softplus^-1(r), solved by gradient ascent with step
    halving (the objective never decreases).  Rates are capped at
    ``rate_max``; with gamma = 0 the likelihood keeps improving as r grows
    whenever every cell's mean can match its count, and capped verbs are
    reported in the diagnostics.  A given ``rate`` (scalar or per verb)
    holds r fixed, leaving only the closed-form pi.
    """
    _check_smoothing(gamma)
    c = counts.dense().astype(float)
    V, F = c.shape
    if rate is not None:
        r = np.broadcast_to(np.asarray(rate, dtype=float), (V,)).copy()
        if np.any(r <= 0):
            raise DomainError("rates must be positive")
        pi = _profiled_pi(c, r, gamma)
        val = bnb_log_posterior(c, logit(pi), r + np.log(-np.expm1(-r)), gamma)[0]
        diag = {"objective": float(val.sum()), "iterations": 0, "converged": True,
                "trace": [float(val.sum())], "rate_capped": []}
        return BNBParams(counts.verbs, counts.frames, pi, r, float(gamma), diag)
    occupied = np.maximum((c > 0).sum(axis=1), 1)
    r0 = np.maximum(c.sum(axis=1) / occupied, 0.1)  # mean count per occupied cell
    rho = r0 + np.log(-np.expm1(-r0))
    rho_max = rate_max  # softplus(x) ~ x for large x
    step = np.ones(V)
    val, grad, _ = _profiled(c, rho, gamma)
    trace = [float(val.sum())]
    quiet = 0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        prop = np.minimum(rho + step * grad, rho_max)
        nval, ngrad, _ = _profiled(c, prop, gamma)
        ok = nval >= val
        rho = np.where(ok, prop, rho)
        val = np.where(ok, nval, val)
        grad = np.where(ok, ngrad, grad)
        step = np.where(ok, step * 1.5, step * 0.5)
        total = float(val.sum())
        if abs(total - trace[-1]) / (V * F) < cfg.tolerance:
            quiet += 1
        else:
            quiet = 0
        trace.append(total)
        if quiet >= cfg.patience:
            converged = True
            break
    r = np.logaddexp(0.0, rho)
    pi = _profiled_pi(c, r, gamma)
    capped = rho >= rho_max
    if np.any(capped):
        warnings.warn(f"{int(capped.sum())} verbs reached the rate cap {rate_max:g} (gamma={gamma})",
                      DegenerateWarning, stacklevel=2)
    if not converged:
        warnings.warn(f"bnb fit did not converge in {cfg.max_iters} iterations (gamma={gamma})",
                      ConvergenceWarning, stacklevel=2)
    diag = {"objective": total, "iterations": it, "converged": converged, "trace": trace,
            "rate_capped": [counts.verbs[i] for i in np.flatnonzero(capped)]}
    return BNBParams(counts.verbs, counts.frames, pi, r, float(gamma), diag)


# ------------------------------------------------------------------ PMI / G


@dataclass(frozen=True, eq=False)
class InfoScores:
    verbs: tuple
    frames: tuple
    pmi: np.ndarray
    g: np.ndarray
    lam: float
    joint: np.ndarray = field(repr=False, default=None)

    @property
    def undefined(self) -> np.ndarray:
        """Cells whose PMI is the -inf sentinel (zero count at lambda = 0)."""
        return np.isneginf(self.pmi)

    def to_features(self, kind="pmi", indicator=True) -> FeatureMatrix:
        """Verb x frame scores with -inf cells imputed as zero.

        With ``indicator`` an extra 0/1 column is appended for each frame
        that has any imputed cell.
        """
        x = np.array(self.pmi if kind == "pmi" else self.g, dtype=float)
        bad = self.undefined
        x[bad] = 0.0
        cols = list(self.frames)
        if indicator and bad.any():
            which = np.flatnonzero(bad.any(axis=0))
            x = np.hstack([x, bad[:, which].astype(float)])
            cols += [f"undefined:{self.frames[j]}" for j in which]
        return FeatureMatrix(self.verbs, x, tuple(cols), {"model": kind, "hyperparameter": self.lam})


def info_scores(counts: CountsTable, lam: float) -> InfoScores:
    """PMI and G from the add-lambda MAP of the full verb x frame joint.

    Smoothing each cell of the joint and smoothing each verb row (with
    verb marginals smoothed by F * lambda) give the same joint, so there is
    a single reading of the smoothing here.
    """
    _check_smoothing(lam)
    c = counts.dense().astype(float)
    V, F = c.shape
    total = c.sum() + V * F * lam
    if total <= 0:
        raise DomainError("empty count table")
    joint = (c + lam) / total
    pv = joint.sum(axis=1, keepdims=True)
    pf = joint.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore"):
        pmi = np.log(joint) - np.log(pv) - np.log(pf)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(pv > 0, joint / pv, 0.0)
    # zero cells: P(f|v) * log P(v,f) -> 0 as the joint goes to zero
    g = np.zeros_like(pmi)
    pos = joint > 0
    g[pos] = cond[pos] * pmi[pos]
    if np.isneginf(pmi).any():
        warnings.warn(f"{int(np.isneginf(pmi).sum())} zero cells give PMI = -inf at lambda = 0",
                      DegenerateWarning, stacklevel=2)
    return InfoScores(counts.verbs, counts.frames, pmi, g, float(lam), joint)


def pmi(counts: CountsTable, lam: float) -> InfoScores:
    return info_scores(counts, lam)


def g_stat(counts: CountsTable, lam: float) -> InfoScores:
    return info_scores(counts, lam)


# ------------------------------------------------------------------ grid


def representation(counts: CountsTable, model: str, value: float, cfg: FitConfig = FitConfig(),
                   indicator=True) -> FeatureMatrix:
    if model == "dc":
        return dc_map(counts, value).to_features()
    if model == "bnb":
        return bnb_map(counts, value, cfg).to_features()
    if model in ("pmi", "g"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateWarning)
            return info_scores(counts, value).to_features(model, indicator)
    raise DomainError(f"unknown frequency model {model!r}; expected one of {MODELS}")


def grid(counts: CountsTable, model: str, values=DEFAULT_GRID, cfg: FitConfig = FitConfig(),
         indicator=True) -> list:
    """One representation per hyperparameter value, tagged in ``meta``."""
    values = list(values)
    if not values:
        raise DomainError("empty hyperparameter grid")
    out = []
    for v in values:
        fm = representation(counts, model, float(v), cfg, indicator)
        log.info("%s(%g): %d x %d", model, v, len(fm), fm.dim)
        out.append(fm)
    return out
