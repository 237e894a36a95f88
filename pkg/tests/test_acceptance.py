"""Acceptance criteria 1-12, one verdict line each (printed in the terminal summary).

Criteria that need the public datasets read their locations from the
environment and skip with the reason when unset:

  LEXSEL_MEGA_RATINGS       MegaAcceptability ratings TSV
  LEXSEL_MEGA_COLUMNS       optional column map for every ratings file, "participant=worker,response=rating"
  LEXSEL_MEGA_FILTER        optional exclusion column (rows with a true value are dropped)
  LEXSEL_VALEX_COUNTS       verb/frame/count TSV
  LEXSEL_VERB_MAP           optional verb mapping TSV applied to the counts
  LEXSEL_PILOT_RATINGS      ratings from the 30-verb replication
  LEXSEL_WHITE2018_RATINGS  ratings from the earlier 30-verb study design
"""

import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE
from helpers import aligned_acceptability, central_gradient, dc_gradient_map, simulate_ratings
from lexsel.agreement import pairwise_list_agreement, simulate_expected_agreement, summarize_pairs
from lexsel.bleach import (
    build_mega_lists,
    builtin_templates,
    builtin_verbs,
    check_design,
    generate_all,
    instantiate,
    make_verb,
)
from lexsel.data import CountsTable, align_vocabularies, load_counts, load_ratings, load_verb_map
from lexsel.normalize import (
    OrdinalModelParams,
    acceptability_matrix,
    compare_normalizers,
    fit_ordinal_model,
    ordinal_objective,
    participant_quality,
)
from lexsel.freq import dc_map

HERE = Path(__file__).parent


def verdict(n, ok, detail):
    ACCEPTANCE[n] = f"{'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


def skip(n, reason):
    ACCEPTANCE[n] = f"SKIP  {reason}"
    pytest.skip(reason)


def env_path(name):
    v = os.environ.get(name)
    return Path(v) if v and Path(v).is_file() else None


def _load_env_ratings(var):
    cols = os.environ.get("LEXSEL_MEGA_COLUMNS")
    cmap = dict(kv.split("=", 1) for kv in cols.split(",")) if cols else None
    return load_ratings(env_path(var), cmap, filter_column=os.environ.get("LEXSEL_MEGA_FILTER"))


# ------------------------------------------------------------------ fixtures


@pytest.fixture(scope="module")
def synthetic_fit():
    """100 participants, 20 verbs, 10 frames, 5 ratings per item."""
    rt, a, cuts = simulate_ratings(0, P=100, V=20, F=10, per_item=5, sds=(3.0, 3.0, 2.0))
    t0 = time.perf_counter()
    fit = fit_ordinal_model(rt)
    return rt, a, fit, time.perf_counter() - t0


@pytest.fixture(scope="module")
def mega():
    """Quality-weighted fit to the real ratings, or None."""
    if env_path("LEXSEL_MEGA_RATINGS") is None:
        return None
    rt = _load_env_ratings("LEXSEL_MEGA_RATINGS")
    pairs = pairwise_list_agreement(rt)
    q = participant_quality(pairs, rt.participants)
    fit = fit_ordinal_model(rt, q)
    return rt, pairs, q, fit, acceptability_matrix(fit, rt, q)


@pytest.fixture(scope="module")
def real_reports(mega):
    """Nested-CV mean R^2 per representation on the real data, or None."""
    counts_path = env_path("LEXSEL_VALEX_COUNTS")
    if mega is None or counts_path is None:
        return None
    from lexsel import factor, freq
    from lexsel.evaluate import nested_cv, verb_targets

    vm = load_verb_map(env_path("LEXSEL_VERB_MAP")) if env_path("LEXSEL_VERB_MAP") else None
    counts, acc = align_vocabularies(load_counts(counts_path, verb_map=vm), mega[4])
    Y = verb_targets(acc)
    counts = counts.restrict([v for v in counts.verbs if v in set(Y.row_keys)])
    t0 = time.perf_counter()
    out = {}
    for model in freq.MODELS:
        for fm in freq.grid(counts, model):
            out[(model, fm.meta["hyperparameter"])] = nested_cv(fm, Y.take(fm.row_keys))
    freq_seconds = time.perf_counter() - t0
    for model in factor.MODELS:
        base = factor.default_base(counts, model)
        for K in factor.K_GRID:
            fm = factor.assemble_features(factor.fit_model(counts, model, K), base)
            out[(model, K)] = nested_cv(fm, Y.take(fm.row_keys))
    return out, freq_seconds


# ------------------------------------------------------------------ 1-3


def test_criterion_01_golden_templates():
    import csv

    t0 = time.perf_counter()
    templates = builtin_templates("mega")
    walk = make_verb("walk")
    with open(HERE / "data" / "table2_golden.tsv", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE))[1:]
    hits = sum(
        instantiate(walk, templates[fid]).sentence == text.replace("___ed", "walked").replace("___", "walk")
        for fid, text in rows
    )
    dt = time.perf_counter() - t0
    verdict(1, hits == 50 and len(rows) == 50 and dt < 1.0, f"{hits}/{len(rows)} exact matches in {dt:.3f} s")


def test_criterion_02_mega_design():
    verbs = [make_verb(v) for v in builtin_verbs()]
    frames = builtin_templates("mega").templates()
    t0 = time.perf_counter()
    design = build_mega_lists(verbs, frames, seed=0)
    problems = check_design(design, generate_all(verbs, frames))
    dt = time.perf_counter() - t0
    sizes = {len(lst) for lst in design.lists}
    ok = len(design.lists) == 1000 and sizes == {50} and not problems and dt < 5.0
    verdict(2, ok, f"{len(design.lists)} lists of {sizes}, {len(problems)} violations, {dt:.2f} s")


def test_criterion_03_ordinal_recovery(synthetic_fit):
    rt, a, fit, seconds = synthetic_fit
    rho = stats.spearmanr(aligned_acceptability(fit, 20, 10).ravel(), a.ravel())[0]
    prob, fun = ordinal_objective(rt)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(3):
        x = prob.initial() + rng.normal(0, 0.5, prob.n_params)
        g = fun(x)[1]
        idx = rng.choice(prob.n_params, 40, replace=False)
        fd = central_gradient(lambda z: fun(z, False), x, idx)
        worst = max(worst, float(np.max(np.abs(fd - g[idx]) / np.maximum(1.0, np.abs(fd)))))
    ok = rho > 0.95 and worst < 1e-4 and seconds < 120
    verdict(3, ok, f"Spearman {rho:.4f}, gradient rel. error {worst:.1e}, fit {seconds:.1f} s")


# ------------------------------------------------------------------ 4-7


def test_criterion_04_normalizer_concordance(mega):
    if mega is None:
        skip(4, "LEXSEL_MEGA_RATINGS unset; real-data concordance not checked")
    rt, _, _, fit, _ = mega
    c = compare_normalizers(rt, fit)
    r1, r2 = c["pearson_mean_rating"], c["pearson_mean_zscore"]
    verdict(4, r1 >= 0.90 and r2 >= 0.92, f"Pearson vs mean rating {r1:.3f} (>= 0.90), vs z-mean {r2:.3f} (>= 0.92)")


def test_criterion_05_variability(synthetic_fit, mega):
    rt, _, fit, _ = synthetic_fit
    var = acceptability_matrix(fit, rt).variability
    floor_ok = bool(np.all(var[np.isfinite(var)] >= 1 / 7 - 1e-12))
    detail = f"synthetic min variability {np.nanmin(var):.4f} (floor 1/7)"
    if mega is None:
        verdict(5, floor_ok, detail + "; real-data band skipped: LEXSEL_MEGA_RATINGS unset")
        return
    real = mega[4].variability
    frame_means = np.nanmean(real, axis=0)
    in_band = int(np.sum((frame_means >= 0.25) & (frame_means <= 0.55)))
    real_floor = bool(np.all(real[np.isfinite(real)] >= 1 / 7 - 1e-12))
    verdict(5, floor_ok and real_floor and in_band >= 45,
            detail + f"; real min {np.nanmin(real):.4f}, {in_band}/{len(frame_means)} frame means in [0.25, 0.55]")


def test_criterion_06_agreement(mega):
    if mega is None:
        skip(6, "LEXSEL_MEGA_RATINGS unset; real-data agreement not checked")
    s = summarize_pairs(mega[1])
    ok = abs(s["mean"] - 0.416) <= 0.01 and abs(s["median"] - 0.455) <= 0.01
    detail = f"mean {s['mean']:.3f} (0.416 +- 0.01), median {s['median']:.3f} (0.455 +- 0.01)"
    if env_path("LEXSEL_PILOT_RATINGS"):
        pilot = summarize_pairs(pairwise_list_agreement(_load_env_ratings("LEXSEL_PILOT_RATINGS")))
        ok = ok and abs(pilot["mean"] - 0.528) <= 0.015
        detail += f"; pilot mean {pilot['mean']:.3f} (0.528 +- 0.015)"
    else:
        detail += "; pilot data absent"
    verdict(6, ok, detail)


def test_criterion_07_agreement_simulation():
    path = env_path("LEXSEL_WHITE2018_RATINGS")
    if path is not None:
        rt = _load_env_ratings("LEXSEL_WHITE2018_RATINGS")
        ci = simulate_expected_agreement(fit_ordinal_model(rt), rt, n_sims=999, seed=0)
        verdict(7, abs(ci.point - 0.516) <= 0.015, f"simulated mean {ci.point:.3f} (0.516 +- 0.015)")
        return
    # synthetic stand-ins: seed determinism, prefix stability, deterministic-model degeneracy
    rt, _, _ = simulate_ratings(3, P=10**6, V=6, F=20, per_item=4, design="lists")
    fit = fit_ordinal_model(rt)
    a = simulate_expected_agreement(fit, rt, n_sims=20, seed=5)
    b = simulate_expected_agreement(fit, rt, n_sims=20, seed=5)
    one = simulate_expected_agreement(fit, rt, n_sims=1, seed=5)
    determinism = np.array_equal(a.samples, b.samples) and one.samples[0] == a.samples[0]
    # every latent value sits at least 15 units from every cutpoint, so responses are fixed
    cut = np.array([[-90.0, -60, -30, 30, 60, 90]] * len(fit.participants))
    levels = np.array([-200.0, -75, -45, 0, 45, 75, 200])
    a_fixed = levels[np.arange(fit.beta_vf.size) % len(levels)].reshape(fit.beta_vf.shape)
    sharp = OrdinalModelParams(fit.verbs, fit.frames, fit.participants, np.zeros(len(fit.verbs)),
                               np.zeros(len(fit.frames)), a_fixed, cut)
    deg = simulate_expected_agreement(sharp, rt, n_sims=10, seed=0).point
    verdict(7, determinism and deg == pytest.approx(1.0),
            f"LEXSEL_WHITE2018_RATINGS unset; synthetic stand-ins: determinism {determinism}, "
            f"deterministic-model agreement {deg:.3f}")


# ------------------------------------------------------------------ 8


def test_criterion_08_dc_closed_form():
    rng = np.random.default_rng(8)
    worst = 0.0
    for t in range(50):
        V, F = rng.integers(1, 5), rng.integers(2, 7)
        c = rng.poisson(rng.uniform(0.5, 20), (V, F))
        lam = float(rng.choice([0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 50.0]))
        theta = dc_map(CountsTable.from_dense([f"v{i}" for i in range(V)], [f"f{j}" for j in range(F)], c), lam).theta
        for i in range(V):
            worst = max(worst, float(np.max(np.abs(theta[i] - dc_gradient_map(c[i], lam)))))
    verdict(8, worst < 1e-6, f"max |closed form - optimizer| over 50 tables = {worst:.2e}")


# ------------------------------------------------------------------ 9-11


def test_criterion_09_frequency_ordering(real_reports):
    if real_reports is None:
        skip(9, "LEXSEL_MEGA_RATINGS or LEXSEL_VALEX_COUNTS unset; model ordering not checked")
    rep, seconds = real_reports
    r = {k: v.mean_r2 for k, v in rep.items()}
    bnb, pmi, dc = r[("bnb", 0.1)], r[("pmi", 5.0)], r[("dc", 0.0)]
    g = max(v for (m, _), v in r.items() if m == "g")
    best = max(v for (m, _), v in r.items() if m in ("dc", "bnb", "pmi", "g"))
    ok = bnb >= pmi >= dc > g and best < 0.5 and seconds < 7200
    # the figure's exact values are not available in text form, so the +-0.05 band is not checked
    verdict(9, ok, f"BNB(0.1) {bnb:.3f} >= PMI(5) {pmi:.3f} >= DC(0) {dc:.3f} > best G {g:.3f}; "
                   f"ceiling {best:.3f} < 0.5; grid {seconds / 60:.1f} min")


def test_criterion_10_error_correlations(mega, real_reports):
    if real_reports is None:
        skip(10, "LEXSEL_MEGA_RATINGS or LEXSEL_VALEX_COUNTS unset; error correlations not checked")
    from lexsel.evaluate import covariate, error_correlation

    rpt = real_reports[0][("bnb", 0.1)]
    keys, err = rpt.absolute_errors()
    counts = load_counts(env_path("LEXSEL_VALEX_COUNTS"))
    rv, civ = error_correlation(err, covariate(keys, "variability", mega[4]), 999)
    rf, cif = error_correlation(err, covariate(keys, "frequency", counts=counts), 999)
    ok = -0.25 <= rv <= -0.12 and -0.01 <= rf <= 0.05
    verdict(10, ok, f"variability rho {rv:.3f} [{civ.lo:.3f}, {civ.hi:.3f}], "
                    f"frequency rho {rf:.3f} [{cif.lo:.3f}, {cif.hi:.3f}]")


def test_criterion_11_factor_margin(real_reports):
    if real_reports is None:
        skip(11, "LEXSEL_MEGA_RATINGS or LEXSEL_VALEX_COUNTS unset; factor-model margins not checked")
    r = {k: v.mean_r2 for k, v in real_reports[0].items()}
    lfa, bnb = r[("lfa", 5)], r[("bnb", 0.1)]
    lda = max(v for (m, _), v in r.items() if m == "lda")
    glove = max(v for (m, _), v in r.items() if m == "glove")
    ok = 0.0 <= lfa - bnb <= 0.03 and lfa - max(lda, glove) >= 0.03
    verdict(11, ok, f"LFA(5) - BNB(0.1) = {lfa - bnb:+.3f}; LFA(5) - best(LDA, GloVe) = {lfa - max(lda, glove):+.3f}")


# ------------------------------------------------------------------ 12


def test_criterion_12_property_suite():
    files = sorted(str(p) for p in HERE.glob("test_*.py") if p.name != "test_acceptance.py")
    t0 = time.perf_counter()
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-m", "not slow and not realdata", *files],
        capture_output=True, text=True, cwd=HERE.parent,
    )
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    verdict(12, proc.returncode == 0 and dt < 600, f"{tail} ({dt:.0f} s, limit 600 s)")
