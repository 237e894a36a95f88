"""Ordinal-model normalization of Likert ratings.

Each (verb, frame) item has a latent acceptability a_vf = b_v + b_f + b_vf.
Each participant p bins the latent scale with ordered cutpoints c_p1 < ...;
the cumulative probability of a response at or below i is
sigmoid(c_pi - a_vf).  Parameters are MAP estimates under an Exponential
prior on cutpoint gaps and a small L2 penalty on the betas.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy import optimize, sparse, stats
from scipy.special import expit, log_expit

from .data import AcceptabilityMatrix, RatingsTable
from .errors import ConvergenceWarning, DegenerateWarning, DomainError, IngestionWarning
from .mixed import fit_crossed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    prior_rate: float = 1.0
    smoothing: float = 1e-4
    max_iters: int = 5000
    tolerance: float = 1e-8
    patience: int = 25
    learning_rate: float = 0.05
    # step size halves every lr_half_life iterations
    lr_half_life: float = 500.0
    seed: int = 0
    # "lbfgs" (default) or "adam"; both use the same analytic gradient
    optimizer: str = "lbfgs"
    # apply quality weights inside the variability mean as well as the fit
    weight_variability: bool = True

    def __post_init__(self):
        for name in ("prior_rate", "smoothing", "max_iters", "tolerance", "patience", "learning_rate", "lr_half_life"):
            if not getattr(self, name) > 0:
                raise DomainError(f"FitConfig.{name} must be positive")
        if self.optimizer not in ("lbfgs", "adam"):
            raise DomainError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True, eq=False)
class OrdinalModelParams:
    verbs: tuple
    frames: tuple
    participants: tuple
    beta_v: np.ndarray
    beta_f: np.ndarray
    beta_vf: np.ndarray
    cutpoints: np.ndarray      # (n_participants, scale_max - 1)
    diagnostics: dict = field(default_factory=dict)

    @property
    def scale_max(self) -> int:
        return self.cutpoints.shape[1] + 1

    @property
    def acceptability(self) -> np.ndarray:
        return self.beta_v[:, None] + self.beta_f[None, :] + self.beta_vf

    def index(self):
        return (
            {p: i for i, p in enumerate(self.participants)},
            {v: i for i, v in enumerate(self.verbs)},
            {f: i for i, f in enumerate(self.frames)},
        )

    def save(self, path):
        """Write to an ``.npz`` archive (no pickled objects)."""
        np.savez(
            path,
            verbs=np.array(self.verbs, dtype=str), frames=np.array(self.frames, dtype=str),
            participants=np.array(self.participants, dtype=str),
            beta_v=self.beta_v, beta_f=self.beta_f, beta_vf=self.beta_vf, cutpoints=self.cutpoints,
            diagnostics=np.array(json.dumps(self.diagnostics, default=float)),
        )

    @classmethod
    def load(cls, path) -> "OrdinalModelParams":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                tuple(z["verbs"].tolist()), tuple(z["frames"].tolist()), tuple(z["participants"].tolist()),
                z["beta_v"], z["beta_f"], z["beta_vf"], z["cutpoints"], json.loads(str(z["diagnostics"])),
            )


@dataclass(frozen=True)
class ParticipantQuality:
    score: Mapping[str, float]

    def __post_init__(self):
        for p, s in self.score.items():
            if not 0.0 <= s <= 1.0:
                raise DomainError(f"quality score for {p!r} outside [0, 1]")

    def weights_for(self, participants) -> np.ndarray:
        return np.array([self.score.get(p, 0.5) for p in participants], dtype=float)


# ------------------------------------------------------------------ likelihood


def category_probabilities(cutpoints, a) -> np.ndarray:
    """P(r = i) for i = 1..K, rows of ``cutpoints`` paired with entries of ``a``.

    cutpoints: (n, K-1); a: (n,).  Returns (n, K).
    """
    cutpoints = np.atleast_2d(cutpoints)
    a = np.asarray(a, dtype=float).reshape(-1)
    n = cutpoints.shape[0]
    cdf = expit(cutpoints - a[:, None])
    cdf = np.hstack([np.zeros((n, 1)), cdf, np.ones((n, 1))])
    return np.diff(cdf, axis=1)


def log_category_probability(c_hi, c_lo, a):
    """log(sigmoid(c_hi - a) - sigmoid(c_lo - a)), stable in both tails.

    Infinite bounds are allowed (c_lo = -inf, c_hi = +inf).
    """
    u = c_hi - a
    l = c_lo - a
    with np.errstate(over="ignore", invalid="ignore"):
        # sigmoid(u) - sigmoid(l) = sigmoid(u) * sigmoid(-l) * (1 - exp(l - u))
        out = log_expit(u) + log_expit(-l) + np.log(-np.expm1(l - u))
    return out


def response_probability(params: OrdinalModelParams, participant, verb, frame, rating) -> float:
    K = params.scale_max
    if not 1 <= int(rating) <= K or int(rating) != rating:
        raise DomainError(f"rating {rating} outside [1, {K}]")
    pi, vi, fi = params.index()
    c = params.cutpoints[pi[participant]]
    a = params.acceptability[vi[verb], fi[frame]]
    return float(category_probabilities(c[None, :], [a])[0, int(rating) - 1])


# ------------------------------------------------------------------ objective


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


class _Problem:
    """Packs parameters and evaluates the MAP objective with its gradient."""

    def __init__(self, ratings: RatingsTable, weights: np.ndarray, cfg: FitConfig):
        self.V, self.F, self.P = len(ratings.verbs), len(ratings.frames), len(ratings.participants)
        self.K = ratings.scale_max
        if self.K < 3:
            raise DomainError("ordinal model needs a scale of at least 3 points")
        self.p = ratings.participant_idx
        self.v = ratings.verb_idx
        self.f = ratings.frame_idx
        self.item = ratings.item_idx
        self.k = ratings.rating - 1
        self.w = weights
        self.cfg = cfg
        # the cutpoint whose participant mean is pinned to zero
        self.anchor = min(2, self.K - 2)
        n_gap = self.K - 2
        self.sizes = [self.V, self.F, self.V * self.F, self.P, self.P * n_gap]
        self.n_params = sum(self.sizes)
        self.n_obs = len(self.k)

    def unpack(self, theta):
        parts = np.split(theta, np.cumsum(self.sizes)[:-1])
        bv, bf, bvf, c1, g = parts
        return bv, bf, bvf.reshape(self.V, self.F), c1, g.reshape(self.P, self.K - 2)

    def pack(self, bv, bf, bvf, c1, g):
        return np.concatenate([bv, bf, bvf.ravel(), c1, g.ravel()])

    def initial(self):
        c = np.linspace(-2.5, 2.5, self.K - 1)
        g = np.full((self.P, self.K - 2), _softplus_inv(c[1] - c[0]))
        return self.pack(np.zeros(self.V), np.zeros(self.F), np.zeros((self.V, self.F)),
                         np.full(self.P, c[0]), g)

    def cutpoints(self, c1, g):
        raw = np.hstack([c1[:, None], c1[:, None] + np.cumsum(_softplus(g), axis=1)])
        return raw - raw[:, self.anchor].mean()

    def loglik_terms(self, cut, a_obs):
        k = self.k
        ext = np.hstack([np.full((self.P, 1), -np.inf), cut, np.full((self.P, 1), np.inf)])
        hi = ext[self.p, k + 1]
        lo = ext[self.p, k]
        return log_category_probability(hi, lo, a_obs), hi, lo

    def objective(self, theta, with_grad=True):
        cfg = self.cfg
        bv, bf, bvf, c1, g = self.unpack(theta)
        gaps = _softplus(g)
        cut = self.cutpoints(c1, g)
        a = bv[:, None] + bf[None, :] + bvf
        a_obs = a.ravel()[self.item]
        ll, hi, lo = self.loglik_terms(cut, a_obs)
        w = self.w
        value = (
            np.dot(w, ll)
            + np.sum(np.log(cfg.prior_rate) - cfg.prior_rate * gaps)
            - cfg.smoothing * (bv @ bv + bf @ bf + np.sum(bvf * bvf))
        )
        if not with_grad:
            return value
        u = hi - a_obs
        l = lo - a_obs
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            inv = 1.0 / np.expm1(u - l)
        inv = np.where(np.isfinite(u) & np.isfinite(l), inv, 0.0)
        d_u = np.where(np.isfinite(u), expit(-u) + inv, 0.0)
        d_l = np.where(np.isfinite(l), -expit(l) - inv, 0.0)
        d_u *= w
        d_l *= w
        d_a = -(d_u + d_l)

        g_cut = np.zeros((self.P, self.K + 1))
        np.add.at(g_cut, (self.p, self.k + 1), d_u)
        np.add.at(g_cut, (self.p, self.k), d_l)
        g_cut = g_cut[:, 1:-1]
        # centering: every raw cutpoint shifts with the anchor mean
        g_raw = g_cut.copy()
        g_raw[:, self.anchor] -= g_cut.sum() / self.P
        g_c1 = g_raw.sum(axis=1)
        g_gap = np.cumsum(g_raw[:, :0:-1], axis=1)[:, ::-1] - cfg.prior_rate
        g_g = g_gap * expit(g)

        g_item = np.bincount(self.item, weights=d_a, minlength=self.V * self.F).reshape(self.V, self.F)
        g_bvf = g_item - 2 * cfg.smoothing * bvf
        g_bv = g_item.sum(axis=1) - 2 * cfg.smoothing * bv
        g_bf = g_item.sum(axis=0) - 2 * cfg.smoothing * bf
        return value, self.pack(g_bv, g_bf, g_bvf, g_c1, g_g)


def _normalized_weights(ratings: RatingsTable, weights) -> np.ndarray:
    """Per-response weights scaled to mean 1 (uniform when ``weights`` is None)."""
    if weights is None:
        return np.ones(len(ratings))
    if isinstance(weights, ParticipantQuality):
        per_p = weights.weights_for(ratings.participants)
    else:
        per_p = np.asarray(weights, dtype=float)
        if per_p.shape != (len(ratings.participants),):
            raise DomainError("need one weight per participant")
    if np.any(per_p < 0) or not np.all(np.isfinite(per_p)):
        raise DomainError("participant weights must be finite and nonnegative")
    w = per_p[ratings.participant_idx]
    if w.sum() <= 0:
        raise DomainError("all participant weights are zero")
    if np.ptp(w) == 0:
        # exact ones, so constant weights reproduce the unweighted fit bit for bit
        return np.ones(len(ratings))
    return w / w.mean()


def ordinal_objective(ratings: RatingsTable, weights=None, cfg: FitConfig = FitConfig()):
    """(problem, f) where f(theta) -> (objective, gradient); exposed for checks."""
    prob = _Problem(ratings, _normalized_weights(ratings, weights), cfg)
    return prob, prob.objective


# ------------------------------------------------------------------ fitting


def _adam(fun, x0, cfg: FitConfig, n_obs):
    m = np.zeros_like(x0)
    s = np.zeros_like(x0)
    b1, b2, eps = 0.9, 0.999, 1e-8
    x = x0.copy()
    trace = []
    quiet = 0
    prev = None
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        val, grad = fun(x)
        trace.append(float(val))
        # objective changes are judged per response so the rule is size-free
        if prev is not None and abs(val - prev) / n_obs < cfg.tolerance:
            quiet += 1
            if quiet >= cfg.patience:
                converged = True
                break
        else:
            quiet = 0
        prev = val
        m = b1 * m + (1 - b1) * grad
        s = b2 * s + (1 - b2) * grad * grad
        mh = m / (1 - b1**it)
        sh = s / (1 - b2**it)
        lr = cfg.learning_rate * 0.5 ** ((it - 1) / cfg.lr_half_life)
        x = x + lr * mh / (np.sqrt(sh) + eps)
    val, grad = fun(x)
    return x, {
        "objective": float(val),
        "grad_norm": float(np.linalg.norm(grad)),
        "iterations": it,
        "converged": converged,
        "trace": trace,
    }


def _lbfgs(fun, x0, cfg: FitConfig, n_obs):
    trace = []
    last = {}
    state = {"quiet": 0, "stopped": False}

    def neg(x):
        val, grad = fun(x)
        last["x"], last["val"] = x, val
        return -val, -grad

    def record(xk):
        if "x" in last and np.array_equal(last["x"], xk):
            val = float(last["val"])
        else:
            val = float(fun(xk, False))
        # same stopping rule as the Adam path: small per-response change
        # sustained over `patience` iterations
        if trace and abs(val - trace[-1]) / n_obs < cfg.tolerance:
            state["quiet"] += 1
        else:
            state["quiet"] = 0
        trace.append(val)
        if state["quiet"] >= cfg.patience:
            state["stopped"] = True
            raise StopIteration

    res = optimize.minimize(
        neg, x0, jac=True, method="L-BFGS-B", callback=record,
        options={"maxiter": cfg.max_iters, "maxfun": 4 * cfg.max_iters,
                 "ftol": cfg.tolerance * 1e-5, "gtol": 1e-7},
    )
    val, grad = fun(res.x)
    return res.x, {
        "objective": float(val),
        "grad_norm": float(np.linalg.norm(grad)),
        "iterations": int(res.nit),
        "converged": bool(res.success or state["stopped"]),
        "message": "objective change below tolerance" if state["stopped"] else str(res.message),
        "trace": trace,
    }


def fit_ordinal_model(ratings: RatingsTable, weights=None, cfg: FitConfig = FitConfig()) -> OrdinalModelParams:
    """MAP fit by full-batch L-BFGS (or Adam); non-convergence only warns."""
    prob, fun = ordinal_objective(ratings, weights, cfg)
    run = _lbfgs if cfg.optimizer == "lbfgs" else _adam
    x, diag = run(fun, prob.initial(), cfg, prob.n_obs)
    if not diag["converged"]:
        warnings.warn(
            f"ordinal fit did not converge in {diag['iterations']} iterations "
            f"(objective {diag['objective']:.6g}, gradient norm {diag['grad_norm']:.3g})",
            ConvergenceWarning,
            stacklevel=2,
        )
    bv, bf, bvf, c1, g = prob.unpack(x)
    cut = prob.cutpoints(c1, g)
    # sum-to-zero main effects; a_vf unchanged
    mv, mf = bv.mean(), bf.mean()
    bv, bf = bv - mv, bf - mf
    bvf = bvf + mv + mf
    log.info("ordinal fit: %d iterations, objective %.6g", diag["iterations"], diag["objective"])
    return OrdinalModelParams(
        ratings.verbs, ratings.frames, ratings.participants, bv, bf, bvf, cut, diag
    )


def observed_probabilities(params: OrdinalModelParams, ratings: RatingsTable) -> np.ndarray:
    """P(r = observed rating) for every response, under ``params``."""
    pi, vi, fi = params.index()
    p = np.array([pi[x] for x in ratings.participants])[ratings.participant_idx]
    v = np.array([vi[x] for x in ratings.verbs])[ratings.verb_idx]
    f = np.array([fi[x] for x in ratings.frames])[ratings.frame_idx]
    a = params.acceptability[v, f]
    probs = category_probabilities(params.cutpoints[p], a)
    return probs[np.arange(len(a)), ratings.rating - 1]


def acceptability_matrix(params: OrdinalModelParams, ratings: RatingsTable, weights=None,
                         cfg: FitConfig = FitConfig()) -> AcceptabilityMatrix:
    """a_vf per rated cell plus the weighted mean likelihood of its responses."""
    _, vi, fi = params.index()
    V, F = len(params.verbs), len(params.frames)
    v = np.array([vi[x] for x in ratings.verbs])[ratings.verb_idx]
    f = np.array([fi[x] for x in ratings.frames])[ratings.frame_idx]
    cell = v * F + f
    w = _normalized_weights(ratings, weights if cfg.weight_variability else None)
    lik = observed_probabilities(params, ratings)
    num = np.bincount(cell, weights=w * lik, minlength=V * F)
    den = np.bincount(cell, weights=w, minlength=V * F)
    rated = np.bincount(cell, minlength=V * F) > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        var = np.where(den > 0, num / den, np.nan)
    # a rated cell whose raters all carry zero weight falls back to the plain mean
    zero_w = rated & (den <= 0)
    if zero_w.any():
        plain = np.bincount(cell, weights=lik, minlength=V * F) / np.maximum(
            np.bincount(cell, minlength=V * F), 1)
        var = np.where(zero_w, plain, var)
    acc = np.where(rated.reshape(V, F), params.acceptability, np.nan)
    return AcceptabilityMatrix(params.verbs, params.frames, acc, var.reshape(V, F))


# ------------------------------------------------------------------ quality


def participant_quality(pairs, participants=None) -> ParticipantQuality:
    """Quality scores from pairwise agreement.

    Fits rho ~ 1 + (1 | participant) + (1 | list) by ML, where each pair's
    row loads on both of its participants.  Participant BLUPs are z-scored
    and passed through the standard normal CDF.
    """
    pairs = [p for p in pairs if np.isfinite(p.rho)]
    seen = list(dict.fromkeys([x for p in pairs for x in (p.p1, p.p2)]))
    lists = list(dict.fromkeys(p.list for p in pairs))
    scores = {}
    if pairs:
        pidx = {x: i for i, x in enumerate(seen)}
        lidx = {x: i for i, x in enumerate(lists)}
        n = len(pairs)
        rows = np.repeat(np.arange(n), 2)
        cols = np.array([pidx[x] for p in pairs for x in (p.p1, p.p2)])
        Zp = sparse.csr_matrix((np.ones(2 * n), (rows, cols)), shape=(n, len(seen))).toarray()
        Zl = sparse.csr_matrix(
            (np.ones(n), (np.arange(n), [lidx[p.list] for p in pairs])), shape=(n, len(lists))
        ).toarray()
        y = np.array([p.rho for p in pairs])
        fit = fit_crossed(y, [Zp, Zl])
        blup = fit.blups[0]
        sd = blup.std()
        if sd <= 1e-12 * max(1.0, np.abs(blup).max()):
            z = np.zeros_like(blup)
        else:
            z = (blup - blup.mean()) / sd
        scores = dict(zip(seen, stats.norm.cdf(z)))
    missing = [p for p in (participants or []) if p not in scores]
    if missing:
        warnings.warn(f"{len(missing)} participants appear in no pair; scored 0.5", IngestionWarning,
                      stacklevel=2)
        scores.update({p: 0.5 for p in missing})
    return ParticipantQuality(scores)


# ------------------------------------------------------------------ comparison


def _pearson(x, y):
    if np.std(x) == 0 or np.std(y) == 0:
        warnings.warn("Pearson correlation undefined: zero variance", DegenerateWarning, stacklevel=3)
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def compare_normalizers(ratings: RatingsTable, params: OrdinalModelParams) -> dict:
    """Pearson r of model acceptabilities vs mean raw and mean z-scored ratings."""
    r = ratings.rating.astype(float)
    item = ratings.item_idx
    n_cells = len(ratings.verbs) * len(ratings.frames)
    cnt = np.bincount(item, minlength=n_cells)
    rated = cnt > 0
    mean_raw = np.bincount(item, weights=r, minlength=n_cells)[rated] / cnt[rated]

    pid = ratings.participant_idx
    pc = np.bincount(pid)
    pm = np.bincount(pid, weights=r) / pc
    psd = np.sqrt(np.bincount(pid, weights=(r - pm[pid]) ** 2) / pc)
    # participants with constant ratings contribute z = 0
    z = np.where(psd[pid] > 0, (r - pm[pid]) / np.where(psd[pid] > 0, psd[pid], 1), 0.0)
    mean_z = np.bincount(item, weights=z, minlength=n_cells)[rated] / cnt[rated]

    _, vi, fi = params.index()
    vmap = np.array([vi[v] for v in ratings.verbs])
    fmap = np.array([fi[f] for f in ratings.frames])
    cells = np.flatnonzero(rated)
    F = len(ratings.frames)
    model = params.acceptability[vmap[cells // F], fmap[cells % F]]
    out = {
        "n_items": int(rated.sum()),
        "pearson_mean_rating": _pearson(model, mean_raw),
        "pearson_mean_zscore": _pearson(model, mean_z),
    }
    out["degenerate"] = bool(np.isnan(out["pearson_mean_rating"]) or np.isnan(out["pearson_mean_zscore"]))
    return out
