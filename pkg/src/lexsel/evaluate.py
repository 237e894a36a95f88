"""Ridge regression evaluated by nested cross-validation.

Features are standardized with training-split statistics and targets are
centered, so the penalty never touches the intercept.  Held-out R^2 uses
the training-split target means as its baseline and can be negative.
"""

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .agreement import BootstrapCI, bootstrap_ci, bootstrap_paired, spearman, stream
from .data import AcceptabilityMatrix, CountsTable, FeatureMatrix, item_key, ITEM_SEP
from .errors import ConfigError, DegenerateWarning, DomainError

log = logging.getLogger(__name__)

ALPHA_GRID = (0.01, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


# ------------------------------------------------------------------ ridge


@dataclass(frozen=True, eq=False)
class RidgeModel:
    weights: np.ndarray     # features x targets, in standardized units
    intercept: np.ndarray   # per target
    alpha: float
    mean: np.ndarray        # per feature
    scale: np.ndarray       # per feature, > 0

    def predict(self, X) -> np.ndarray:
        X = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
        return ((X - self.mean) / self.scale) @ self.weights + self.intercept


def _standardize(X, standardize=True):
    mean = X.mean(axis=0)
    if standardize:
        scale = X.std(axis=0)
        # constant columns carry no information; leave them at zero
        scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
    else:
        scale = np.ones(X.shape[1])
    return mean, scale


class _RidgePath:
    """SVD of a standardized design; solves for any alpha cheaply."""

    def __init__(self, X, Y, standardize=True):
        self.mean, self.scale = _standardize(X, standardize)
        Xs = (X - self.mean) / self.scale
        self.ybar = Y.mean(axis=0)
        self.U, self.s, self.Vt = np.linalg.svd(Xs, full_matrices=False)
        self.UtY = self.U.T @ (Y - self.ybar)
        self.rank_tol = self.s.max(initial=0.0) * max(X.shape) * np.finfo(float).eps

    def weights(self, alpha):
        s = self.s
        if alpha == 0:
            keep = s > self.rank_tol
            if not keep.all():
                warnings.warn("design is rank deficient at alpha = 0; using the pseudoinverse",
                              DegenerateWarning, stacklevel=3)
            d = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
        else:
            d = s / (s * s + alpha)
        return self.Vt.T @ (d[:, None] * self.UtY)

    def model(self, alpha) -> RidgeModel:
        return RidgeModel(self.weights(alpha), self.ybar, float(alpha), self.mean, self.scale)


def _as_arrays(X, Y):
    if isinstance(X, FeatureMatrix) and isinstance(Y, FeatureMatrix):
        if X.row_keys != Y.row_keys:
            Y = Y.take(X.row_keys)
    X = X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)
    Y = Y.values if isinstance(Y, FeatureMatrix) else np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise DomainError("features and targets have different numbers of rows")
    if not np.all(np.isfinite(Y)):
        raise DomainError("targets contain missing values")
    return X, Y


def ridge_fit(X, Y, alpha: float, standardize=True) -> RidgeModel:
    """Closed-form multi-target ridge on standardized features."""
    if alpha < 0:
        raise DomainError("alpha must be nonnegative")
    X, Y = _as_arrays(X, Y)
    return _RidgePath(X, Y, standardize).model(alpha)


# ------------------------------------------------------------------ R^2


def _r2_from(ss_res, ss_tot):
    if ss_tot <= 0:
        warnings.warn("R^2 undefined: targets equal the baseline exactly", DegenerateWarning, stacklevel=3)
        return float("nan")
    return float(1.0 - ss_res / ss_tot)


def r2(pred, truth, baseline=None) -> float:
    """Pooled 1 - SS_res / SS_tot over all cells.

    ``baseline`` holds the per-target training means; without it the
    held-out means are used.
    """
    pred = np.atleast_1d(np.asarray(pred, dtype=float))
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if pred.shape != truth.shape:
        raise DomainError("prediction and truth shapes differ")
    base = truth.mean(axis=0) if baseline is None else np.asarray(baseline, dtype=float)
    return _r2_from(np.sum((truth - pred) ** 2), np.sum((truth - base) ** 2))


def per_frame_r2(pred, truth, baseline=None, frames=None) -> dict:
    """Column-wise R^2, one entry per target column."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.ndim == 1:
        pred, truth = pred[:, None], truth[:, None]
    base = truth.mean(axis=0) if baseline is None else np.broadcast_to(np.asarray(baseline, dtype=float), truth.shape[1:])
    frames = frames if frames is not None else tuple(f"y{j}" for j in range(truth.shape[1]))
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        for j, f in enumerate(frames):
            out[f] = _r2_from(np.sum((truth[:, j] - pred[:, j]) ** 2), np.sum((truth[:, j] - base[j]) ** 2))
    return out


# ------------------------------------------------------------------ nested CV


@dataclass
class CVReport:
    outer_fold_r2: list
    mean_r2: float
    chosen_alpha: list
    per_frame_r2: dict
    seed: int
    columnwise_r2: list = field(default_factory=list)
    folds: list = field(default_factory=list)
    errors: list = field(default_factory=list)     # (row, target, prediction, truth) per held-out cell
    ci: tuple = (float("nan"), float("nan"))
    meta: dict = field(default_factory=dict)

    @property
    def mean_columnwise_r2(self) -> float:
        return float(np.mean(self.columnwise_r2)) if self.columnwise_r2 else float("nan")

    def absolute_errors(self):
        """(item keys, |prediction - truth|) for every held-out cell."""
        keys = [e[0] if e[1] == "acceptability" else item_key(e[0], e[1]) for e in self.errors]
        return keys, np.array([abs(e[2] - e[3]) for e in self.errors])

    def to_json(self) -> str:
        d = asdict(self)
        d["ci"] = list(self.ci)
        return json.dumps(d, indent=1, default=_json_default, allow_nan=True)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "CVReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        d["ci"] = tuple(d["ci"])
        d["errors"] = [tuple(e) for e in d["errors"]]
        return cls(**d)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def fold_indices(n: int, k: int, seed: int, salt: int = 0) -> list:
    """Seeded uniform shuffle of range(n) cut into k contiguous blocks."""
    if k < 2:
        raise ConfigError("need at least two folds")
    if n < k:
        raise ConfigError(f"{n} rows cannot fill {k} folds")
    perm = stream(seed, salt).permutation(n)
    return [np.sort(b) for b in np.array_split(perm, k)]


def _select_alpha(X, Y, alpha_grid, inner, seed, salt, standardize):
    n = X.shape[0]
    folds = fold_indices(n, inner, seed, salt)
    scores = np.zeros(len(alpha_grid))
    for test in folds:
        train = np.setdiff1d(np.arange(n), test)
        path = _RidgePath(X[train], Y[train], standardize)
        Xt = (X[test] - path.mean) / path.scale
        ss_tot = np.sum((Y[test] - path.ybar) ** 2)
        for a_i, alpha in enumerate(alpha_grid):
            pred = Xt @ path.weights(alpha) + path.ybar
            ss_res = np.sum((Y[test] - pred) ** 2)
            scores[a_i] += (1 - ss_res / ss_tot if ss_tot > 0 else 0.0) / len(folds)
    # ties go to the larger (more shrunk) alpha
    order = np.argsort(alpha_grid, kind="stable")
    best = order[0]
    for i in order[1:]:
        if scores[i] >= scores[best]:
            best = i
    return float(alpha_grid[best]), scores


def nested_cv(X: FeatureMatrix, Y: FeatureMatrix, alpha_grid=ALPHA_GRID, outer=10, inner=10, seed=0,
              standardize=True, bootstrap_seed=None) -> CVReport:
    """Outer folds estimate held-out R^2; inner folds pick alpha on each training split."""
    alpha_grid = tuple(float(a) for a in alpha_grid)
    if not alpha_grid:
        raise ConfigError("empty alpha grid")
    if any(a < 0 for a in alpha_grid):
        raise ConfigError("alphas must be nonnegative")
    if isinstance(Y, FeatureMatrix) and isinstance(X, FeatureMatrix) and X.row_keys != Y.row_keys:
        Y = Y.take(X.row_keys)
    keys = X.row_keys if isinstance(X, FeatureMatrix) else tuple(str(i) for i in range(len(X)))
    targets = Y.columns if isinstance(Y, FeatureMatrix) else None
    Xa, Ya = _as_arrays(X, Y)
    n = Xa.shape[0]
    if targets is None:
        targets = tuple(f"y{j}" for j in range(Ya.shape[1]))
    folds = fold_indices(n, outer, seed)
    fold_r2, col_r2, alphas, errors = [], [], [], []
    per_frame = {t: [] for t in targets}
    for k, test in enumerate(folds):
        train = np.setdiff1d(np.arange(n), test)
        assert not np.intersect1d(train, test).size
        alpha, _ = _select_alpha(Xa[train], Ya[train], alpha_grid, inner, seed, k + 1, standardize)
        path = _RidgePath(Xa[train], Ya[train], standardize)
        model = path.model(alpha)
        pred = model.predict(Xa[test])
        truth = Ya[test]
        fold_r2.append(r2(pred, truth, path.ybar))
        pf = per_frame_r2(pred, truth, path.ybar, targets)
        for t, v in pf.items():
            per_frame[t].append(v)
        col_r2.append(float(np.nanmean(list(pf.values()))))
        alphas.append(alpha)
        for i, row in enumerate(test):
            for j, t in enumerate(targets):
                errors.append((keys[row], t, float(pred[i, j]), float(truth[i, j])))
        log.debug("fold %d: alpha %g, R2 %.4f", k, alpha, fold_r2[-1])
    mean = float(np.mean(fold_r2))
    ci = bootstrap_ci(fold_r2, "mean", seed=seed if bootstrap_seed is None else bootstrap_seed)
    meta = dict(X.meta) if isinstance(X, FeatureMatrix) else {}
    return CVReport(
        outer_fold_r2=[float(v) for v in fold_r2],
        mean_r2=mean,
        chosen_alpha=alphas,
        per_frame_r2={t: float(np.nanmean(v)) if np.any(np.isfinite(v)) else float("nan") for t, v in per_frame.items()},
        seed=int(seed),
        columnwise_r2=col_r2,
        folds=[[keys[i] for i in f] for f in folds],
        errors=errors,
        ci=(ci.lo, ci.hi),
        meta=meta,
    )


# ------------------------------------------------------------------ targets and error analysis


def verb_targets(acc: AcceptabilityMatrix, verbs=None) -> FeatureMatrix:
    """Verb x frame acceptability; verbs with any unrated frame are dropped."""
    m = acc if verbs is None else acc.restrict(verbs)
    complete = np.all(np.isfinite(m.acceptability), axis=1)
    if not complete.all():
        warnings.warn(f"dropping {int((~complete).sum())} verbs with unrated frames", DegenerateWarning,
                      stacklevel=2)
    rows = [v for v, ok in zip(m.verbs, complete) if ok]
    return FeatureMatrix(tuple(rows), m.acceptability[complete], m.frames, {"level": "verb"})


def item_targets(acc: AcceptabilityMatrix) -> FeatureMatrix:
    """One scalar acceptability per rated (verb, frame) item."""
    keys, vals = [], []
    for i, v in enumerate(acc.verbs):
        for j, f in enumerate(acc.frames):
            if np.isfinite(acc.acceptability[i, j]):
                keys.append(item_key(v, f))
                vals.append(acc.acceptability[i, j])
    return FeatureMatrix(tuple(keys), np.array(vals)[:, None], ("acceptability",), {"level": "item"})


def covariate(keys, kind: str, acceptability: AcceptabilityMatrix = None, counts: CountsTable = None) -> np.ndarray:
    """Per-item covariate aligned to item ``keys``: variability or verb frequency."""
    out = np.empty(len(keys))
    if kind == "variability":
        if acceptability is None:
            raise ConfigError("variability covariate needs the acceptability table")
        vi = {v: i for i, v in enumerate(acceptability.verbs)}
        fi = {f: i for i, f in enumerate(acceptability.frames)}
        for n, k in enumerate(keys):
            v, f = k.split(ITEM_SEP, 1)
            out[n] = acceptability.variability[vi[v], fi[f]]
    elif kind == "frequency":
        if counts is None:
            raise ConfigError("frequency covariate needs the counts table")
        tot = dict(zip(counts.verbs, counts.row_totals()))
        for n, k in enumerate(keys):
            out[n] = tot[k.split(ITEM_SEP, 1)[0]]
    else:
        raise ConfigError(f"unknown covariate {kind!r}")
    return out


def error_correlation(errors, cov, replicates=999, level=0.95, seed=0):
    """Spearman rho between per-item errors and a covariate, with a
    percentile bootstrap over items."""
    errors = np.asarray(errors, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if errors.shape != cov.shape:
        raise DomainError("errors and covariate are not aligned")
    rho = spearman(errors, cov)
    if np.isnan(rho):
        return rho, BootstrapCI(rho, float("nan"), float("nan"), replicates, level)

    def quiet(x, y):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateWarning)
            return spearman(x, y)

    ci = bootstrap_paired(errors, cov, quiet, replicates, level, seed)
    return rho, ci
