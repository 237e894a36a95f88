"""Rank agreement between annotators, bootstrap intervals, simulated agreement.

Random streams come from the counter-based Philox generator; replicate ``i``
of a run seeded with ``seed`` always draws from the stream keyed by
``(seed, i)``, so results do not depend on how many replicates are run or
in which order.
"""

import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import RatingsTable
from .errors import DegenerateWarning, DomainError

STATISTICS = {"mean": np.mean, "median": np.median}


def stream(seed: int, index: int = 0) -> np.random.Generator:
    """Independent generator for replicate ``index`` of run ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


@dataclass(frozen=True)
class PairAgreement:
    list: str
    p1: str
    p2: str
    rho: float
    n_items: int

    def __post_init__(self):
        if self.p1 == self.p2:
            raise DomainError("a pair needs two distinct participants")
        if not (math.isnan(self.rho) or -1.0 - 1e-12 <= self.rho <= 1.0 + 1e-12):
            raise DomainError(f"rho {self.rho} outside [-1, 1]")


@dataclass(frozen=True, eq=False)
class BootstrapCI:
    point: float
    lo: float
    hi: float
    replicates: int = 999
    level: float = 0.95
    samples: np.ndarray = field(default=None, repr=False)

    @property
    def point_outside(self) -> bool:
        """True for the pathological case where the point misses its own interval."""
        return not (self.lo <= self.point <= self.hi)


# ------------------------------------------------------------------ spearman


def spearman(x, y) -> float:
    """Tie-aware Spearman rho: Pearson correlation of average ranks.

    Returns NaN (with a :class:`DegenerateWarning` giving the reason) when
    either input has no rank variance.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError("spearman needs two 1-d sequences of equal length")
    if len(x) < 2:
        raise DomainError("spearman needs at least two observations")
    rx = rankdata(x) - (len(x) + 1) / 2.0
    ry = rankdata(y) - (len(y) + 1) / 2.0
    sxx, syy = rx @ rx, ry @ ry
    if sxx == 0 or syy == 0:
        which = "first" if sxx == 0 else "second"
        warnings.warn(f"spearman undefined: {which} argument is constant", DegenerateWarning, stacklevel=2)
        return float("nan")
    rho = (rx @ ry) / math.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, rho)))


def _spearman_quiet(x, y):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        return spearman(x, y)


def _rank_rows(m):
    """Average ranks along each row of a 2-d array, centered."""
    r = rankdata(m, axis=1)
    return r - r.mean(axis=1, keepdims=True)


# ------------------------------------------------------------------ pairwise


def _list_blocks(ratings: RatingsTable):
    """Per list: (participant codes, item codes, rating matrix) over the
    items every participant on the list rated."""
    by_list = {}
    for n in range(len(ratings)):
        l = ratings.list_idx[n]
        by_list.setdefault(l, {}).setdefault(ratings.participant_idx[n], {})[
            ratings.item_idx[n]
        ] = n
    for l, parts in by_list.items():
        yield l, parts


def pairwise_list_agreement(ratings: RatingsTable) -> list:
    """Spearman rho for every unordered pair of participants sharing a list.

    Correlations run over the items both participants rated on that list.
    Pairs with constant responses get rho = NaN.
    """
    out = []
    for l, parts in _list_blocks(ratings):
        plist = sorted(parts, key=lambda p: ratings.participants[p])
        for a, b in itertools.combinations(plist, 2):
            shared = sorted(set(parts[a]) & set(parts[b]))
            if len(shared) < 2:
                continue
            x = ratings.rating[[parts[a][i] for i in shared]]
            y = ratings.rating[[parts[b][i] for i in shared]]
            out.append(
                PairAgreement(
                    ratings.lists[l], ratings.participants[a], ratings.participants[b],
                    _spearman_quiet(x, y), len(shared),
                )
            )
    if not out:
        warnings.warn("no two participants share a list", DegenerateWarning, stacklevel=2)
    return out


def summarize_pairs(pairs: Sequence[PairAgreement]) -> dict:
    rho = np.array([p.rho for p in pairs], dtype=float)
    ok = rho[np.isfinite(rho)]
    return {
        "n_pairs": len(rho),
        "n_undefined": int(np.sum(~np.isfinite(rho))),
        "mean": float(ok.mean()) if len(ok) else float("nan"),
        "median": float(np.median(ok)) if len(ok) else float("nan"),
    }


# ------------------------------------------------------------------ bootstrap


def bootstrap_ci(samples, statistic="mean", replicates=999, level=0.95, seed=0) -> BootstrapCI:
    """Percentile bootstrap of ``statistic`` over resampled ``samples``."""
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        raise DomainError("bootstrap needs at least one sample")
    stat = STATISTICS[statistic] if isinstance(statistic, str) else statistic
    rng = stream(seed)
    idx = rng.integers(0, len(x), size=(replicates, len(x)))
    reps = stat(x[idx], axis=1)
    q = (1 - level) / 2
    lo, hi = np.quantile(reps, [q, 1 - q])
    return BootstrapCI(float(stat(x)), float(lo), float(hi), replicates, level, reps)


def bootstrap_paired(x, y, fn, replicates=999, level=0.95, seed=0) -> BootstrapCI:
    """Percentile bootstrap of ``fn(x, y)`` resampling aligned pairs."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    rng = stream(seed)
    reps = np.empty(replicates)
    for b in range(replicates):
        i = rng.integers(0, len(x), size=len(x))
        reps[b] = fn(x[i], y[i])
    q = (1 - level) / 2
    lo, hi = np.nanquantile(reps, [q, 1 - q])
    return BootstrapCI(float(fn(x, y)), float(lo), float(hi), replicates, level, reps)


# ------------------------------------------------------------------ simulation


def _design_pairs(ratings: RatingsTable, all_pairs: bool):
    """Index arrays (rows_a, rows_b) per participant pair, over shared items."""
    per_p = {}
    for n in range(len(ratings)):
        per_p.setdefault(ratings.participant_idx[n], {})[
            (ratings.list_idx[n], ratings.item_idx[n]) if not all_pairs else ratings.item_idx[n]
        ] = n
    pairs = []
    if all_pairs:
        candidates = itertools.combinations(sorted(per_p), 2)
    else:
        candidates = set()
        for l, parts in _list_blocks(ratings):
            candidates.update(itertools.combinations(sorted(parts), 2))
        candidates = sorted(candidates)
    for a, b in candidates:
        shared = sorted(set(per_p[a]) & set(per_p[b]))
        if len(shared) >= 2:
            pairs.append((np.array([per_p[a][k] for k in shared]), np.array([per_p[b][k] for k in shared])))
    return pairs


def simulate_expected_agreement(params, design: RatingsTable, n_sims=999, seed=0,
                                all_pairs=False, level=0.95) -> BootstrapCI:
    """Agreement expected if every response were drawn from the fitted model.

    Each simulation draws one rating per (participant, item) record of
    ``design``, computes Spearman rho for every pair of participants who
    shared a list (or every pair with overlapping items when
    ``all_pairs``), and records the mean.  The summary's point is the mean
    over simulations and its interval the percentile range of the means.
    """
    pi, vi, fi = params.index()
    try:
        p = np.array([pi[x] for x in design.participants])[design.participant_idx]
        v = np.array([vi[x] for x in design.verbs])[design.verb_idx]
        f = np.array([fi[x] for x in design.frames])[design.frame_idx]
    except KeyError as e:
        raise DomainError(f"design references {e.args[0]!r}, unknown to the model") from None
    from .normalize import category_probabilities

    probs = category_probabilities(params.cutpoints[p], params.acceptability[v, f])
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    pairs = _design_pairs(design, all_pairs)
    if not pairs:
        raise DomainError("design has no participant pairs with shared items")
    # group pairs by length so ranks can be computed in batches
    by_len = {}
    for a, b in pairs:
        by_len.setdefault(len(a), []).append((a, b))
    batches = [(np.stack([a for a, _ in grp]), np.stack([b for _, b in grp])) for grp in by_len.values()]

    means = np.empty(n_sims)
    for s in range(n_sims):
        u = stream(seed, s).random(len(p))
        draw = (u[:, None] > cdf).sum(axis=1).astype(float)
        rhos = []
        for A, B in batches:
            ra, rb = _rank_rows(draw[A]), _rank_rows(draw[B])
            num = np.sum(ra * rb, axis=1)
            den = np.sqrt(np.sum(ra * ra, axis=1) * np.sum(rb * rb, axis=1))
            with np.errstate(invalid="ignore", divide="ignore"):
                rhos.append(np.where(den > 0, num / den, np.nan))
        rhos = np.concatenate(rhos)
        means[s] = np.nanmean(rhos) if np.any(np.isfinite(rhos)) else np.nan
    q = (1 - level) / 2
    lo, hi = np.nanquantile(means, [q, 1 - q])
    return BootstrapCI(float(np.nanmean(means)), float(lo), float(hi), n_sims, level, means)
