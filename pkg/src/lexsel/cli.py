"""Command-line entry point: ``lexsel <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical or
convergence failure (convergence only with ``--fatal-convergence``).
"""

import argparse
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, bleach, factor, freq
from .agreement import bootstrap_ci, pairwise_list_agreement, simulate_expected_agreement, summarize_pairs
from .data import (
    REPORT_FORMAT,
    FeatureMatrix,
    load_acceptability,
    load_counts,
    load_ratings,
    load_verb_map,
    save_acceptability,
    write_tsv,
)
from .errors import ConfigError, ConvergenceFailure, ConvergenceWarning, LexselError
from .evaluate import ALPHA_GRID, CVReport, item_targets, nested_cv, verb_targets
from .normalize import (
    FitConfig,
    OrdinalModelParams,
    acceptability_matrix,
    compare_normalizers,
    fit_ordinal_model,
    participant_quality,
)
from .pipeline import (
    PipelineConfig,
    build_design,
    error_analysis,
    fit_diagnostics,
    load_representation,
    read_verb_list,
    replication_preset,
    run_pipeline,
    save_representation,
    summarize,
    write_pairs,
)

log = logging.getLogger("lexsel")


def _grid(text, cast=float):
    try:
        vals = [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}") from None
    if not vals:
        raise ConfigError("empty grid")
    return vals


def _column_map(items):
    out = {}
    for it in items or ():
        k, sep, v = it.partition("=")
        if not sep:
            raise ConfigError(f"column mapping must look like name=header, got {it!r}")
        out[k] = v
    return out


def _ratings(args):
    return load_ratings(args.ratings, _column_map(args.column) or None, args.lenient, args.scale_max,
                        args.filter_column)


def _print_json(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=float))


# ------------------------------------------------------------------ commands


def _templates(name):
    if name in ("mega", "pilot"):
        return bleach.builtin_templates(name)
    return bleach.load_templates(name)


def _verbs(args):
    lex = bleach.load_lexicon(args.lexicon) if args.lexicon else bleach.builtin_lexicon()
    if getattr(args, "verb", None):
        lemmas = [args.verb]
    else:
        lemmas = bleach.builtin_verbs() if args.verbs == "builtin" else read_verb_list(args.verbs)
    return [bleach.make_verb(v, lex) for v in lemmas]


def cmd_generate(args):
    frames = _templates(args.templates).templates()
    items = bleach.generate_all(_verbs(args), frames)
    rows = ((it.verb, it.frame_id, it.sentence) for it in items)
    if args.out:
        write_tsv(args.out, ("verb", "frame_id", "sentence"), rows)
    else:
        print("verb\tframe_id\tsentence")
        for r in rows:
            print("\t".join(r))


def cmd_lists(args):
    if args.design == "single-verb" and not args.verb:
        raise ConfigError("--design single-verb needs --verb")
    verbs = _verbs(args)
    frames = _templates(args.templates).templates()
    items = bleach.generate_all(verbs, frames)
    design = build_design(args.design, verbs, frames, items, args.seed)
    if args.out:
        design.save(args.out)
    else:
        print(design.to_json())
    log.info("%d lists, %d items; design check passed", len(design.lists), len(design.items))


def cmd_normalize(args):
    rt = _ratings(args)
    cfg = FitConfig(prior_rate=args.prior_rate, max_iters=args.max_iters, seed=args.seed)
    weights = None
    if args.weights == "auto":
        weights = participant_quality(pairwise_list_agreement(rt), rt.participants)
    params = fit_ordinal_model(rt, weights, cfg)
    save_acceptability(acceptability_matrix(params, rt, weights, cfg), args.out)
    diag = fit_diagnostics(params)
    diag["concordance"] = compare_normalizers(rt, params)
    diag["weights"] = args.weights
    if weights is not None:
        diag["quality"] = {p: float(weights.score[p]) for p in rt.participants}
    side = Path(args.diagnostics) if args.diagnostics else Path(args.out).with_suffix(".json")
    side.write_text(json.dumps(diag, indent=1, sort_keys=True, default=float) + "\n", encoding="utf-8")
    if args.params:
        params.save(args.params)


def cmd_agreement(args):
    pairs = pairwise_list_agreement(_ratings(args))
    if args.out:
        write_pairs(pairs, args.out)
    summ = summarize_pairs(pairs)
    finite = [p.rho for p in pairs if np.isfinite(p.rho)]
    if finite:
        ci = bootstrap_ci(finite, "mean", args.replicates, seed=args.seed)
        summ["mean_ci"] = [ci.lo, ci.hi]
    _print_json(summ)


def cmd_simulate_agreement(args):
    rt = _ratings(args)
    if args.params:
        params = OrdinalModelParams.load(args.params)
    else:
        params = fit_ordinal_model(rt)
    ci = simulate_expected_agreement(params, rt, args.sims, args.seed, all_pairs=args.all_pairs)
    if args.out:
        write_tsv(args.out, ("replicate", "mean_rho"), enumerate(map(float, ci.samples)))
    _print_json({"point": ci.point, "lo": ci.lo, "hi": ci.hi, "sims": ci.replicates, "level": ci.level})


def _counts(args):
    vm = load_verb_map(args.verb_map) if args.verb_map else None
    return load_counts(args.counts, args.lenient, vm)


def cmd_fit_freq(args):
    counts = _counts(args)
    out = Path(args.out_dir)
    grid = _grid(args.grid) if args.grid else freq.DEFAULT_GRID
    for fm in freq.grid(counts, args.model, grid, FitConfig(), not args.no_indicator):
        path = out / f"{args.model}_{float(fm.meta['hyperparameter']):g}.tsv"
        save_representation(fm, path)
        print(path)


def cmd_fit_factor(args):
    counts = _counts(args)
    out = Path(args.out_dir)
    cfg = factor.FactorConfig(seed=args.seed, max_iters=args.max_iters)
    base = None if args.no_base else factor.default_base(counts, args.model)
    for K in (_grid(args.k_grid, int) if args.k_grid else factor.K_GRID):
        fit = factor.fit_model(counts, args.model, K, cfg)
        fm = factor.assemble_features(fit, base, args.mode)
        path = out / f"{args.model}_K{K}.tsv"
        save_representation(fm, path)
        print(path)


def cmd_ingest_features(args):
    fm = factor.load_sentence_features(args.file)
    fm = FeatureMatrix(fm.row_keys, fm.values, fm.columns,
                       {"model": args.name or Path(args.file).stem, "hyperparameter": fm.dim, "level": "item"})
    if args.out:
        save_representation(fm, args.out)
    _print_json({"rows": len(fm), "dim": fm.dim})


def cmd_evaluate(args):
    X = load_representation(args.features)
    acc = load_acceptability(args.targets)
    level = args.level or ("item" if X.meta.get("level") == "item" else "verb")
    if level == "item":
        Y = item_targets(acc)
    else:
        Y = verb_targets(acc, [v for v in acc.verbs if v in set(X.row_keys)])
    keys = [k for k in Y.row_keys if k in set(X.row_keys)]
    if not keys:
        raise ConfigError("features and targets share no rows")
    alphas = _grid(args.alpha_grid) if args.alpha_grid else ALPHA_GRID
    rpt = nested_cv(X.take(keys), Y.take(keys), alphas, args.outer, args.inner, args.seed)
    rpt.meta = dict(X.meta, representation=Path(args.features).stem)
    rpt.save(args.out)
    _print_json({"mean_r2": rpt.mean_r2, "ci": list(rpt.ci), "chosen_alpha": rpt.chosen_alpha})


def cmd_error_analysis(args):
    rpt = CVReport.load(args.report)
    acc = load_acceptability(args.acceptability) if args.acceptability else None
    counts = _counts(args) if args.counts else None
    rows = error_analysis(rpt, [args.covariate], acc, counts, args.replicates, args.seed)
    header = ("covariate", "rho", "ci_lo", "ci_hi", "n")
    if args.out:
        write_tsv(args.out, header, rows, fmt=REPORT_FORMAT)
    _print_json(dict(zip(header, rows[0])))


def cmd_summarize(args):
    rows, pf = summarize(args.reports, args.out, args.per_frame)
    if not args.out:
        print("model\thyperparameter\tmean_r2\tci_lo\tci_hi")
        for r in rows:
            print("\t".join(str(x) if not isinstance(x, float) else REPORT_FORMAT % x for x in r))


def cmd_run(args):
    if args.preset == "replication":
        if not (args.ratings and args.counts and args.out_dir):
            raise ConfigError("--preset replication needs --ratings, --counts and --out-dir")
        cfg = replication_preset(args.ratings, args.counts, args.out_dir)
    elif args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        raise ConfigError("run needs --config or --preset")
    if args.fatal_convergence:
        cfg = replace(cfg, fatal_convergence=True)
    manifest = run_pipeline(cfg, force=tuple(args.force or ()))
    for stage, status in manifest.status().items():
        print(f"{stage}\t{status}")


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="lexsel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lexsel {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--fatal-convergence", action="store_true",
                   help="treat optimizer non-convergence as an error (exit 4)")
    sub = p.add_subparsers(dest="command", required=True)

    def ratings_args(q):
        q.add_argument("--ratings", required=True)
        q.add_argument("--column", action="append", metavar="NAME=HEADER",
                       help="map a canonical column onto a file header (repeatable)")
        q.add_argument("--scale-max", type=int, default=7)
        q.add_argument("--lenient", action="store_true", help="drop bad rows instead of failing")
        q.add_argument("--filter-column", help="exclude rows whose value in this column is true")

    def counts_args(q):
        q.add_argument("--counts", required=True)
        q.add_argument("--verb-map")
        q.add_argument("--lenient", action="store_true")

    def verb_args(q):
        q.add_argument("--verbs", default="builtin", help="lemma list file, or 'builtin'")
        q.add_argument("--templates", default="mega", help="template TSV, or 'mega' / 'pilot'")
        q.add_argument("--lexicon", help="irregular verb TSV (defaults to the shipped one)")

    q = sub.add_parser("generate", help="bleached sentences for every verb x frame")
    verb_args(q)
    q.add_argument("--out")
    q.set_defaults(func=cmd_generate)

    q = sub.add_parser("lists", help="experimental list design")
    verb_args(q)
    q.add_argument("--design", choices=bleach.DESIGNS, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--verb", help="the verb for --design single-verb")
    q.add_argument("--out")
    q.set_defaults(func=cmd_lists)

    q = sub.add_parser("normalize", help="ordinal-model acceptability")
    ratings_args(q)
    q.add_argument("--weights", choices=("uniform", "auto"), default="auto")
    q.add_argument("--out", required=True)
    q.add_argument("--diagnostics", help="fit diagnostics JSON (default: next to --out)")
    q.add_argument("--params", help="also save fitted parameters (.npz)")
    q.add_argument("--prior-rate", type=float, default=1.0)
    q.add_argument("--max-iters", type=int, default=5000)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_normalize)

    q = sub.add_parser("agreement", help="pairwise Spearman agreement within lists")
    ratings_args(q)
    q.add_argument("--out", help="one row per pair")
    q.add_argument("--replicates", type=int, default=999)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_agreement)

    q = sub.add_parser("simulate-agreement", help="agreement expected under the fitted model")
    ratings_args(q)
    q.add_argument("--params", help="fitted parameters from normalize --params (else refit)")
    q.add_argument("--sims", type=int, default=999)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--all-pairs", action="store_true")
    q.add_argument("--out", help="one row per simulation")
    q.set_defaults(func=cmd_simulate_agreement)

    q = sub.add_parser("fit-freq", help="count normalizations over a smoothing grid")
    counts_args(q)
    q.add_argument("--model", choices=freq.MODELS, required=True)
    q.add_argument("--grid", help="comma-separated values")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--no-indicator", action="store_true", help="omit undefined-cell indicator columns")
    q.set_defaults(func=cmd_fit_freq)

    q = sub.add_parser("fit-factor", help="factor models over a K grid")
    counts_args(q)
    q.add_argument("--model", choices=factor.MODELS, required=True)
    q.add_argument("--k-grid", help="comma-separated integers")
    q.add_argument("--out-dir", required=True)
    q.add_argument("--mode", choices=("reconstruction", "latent"), default="reconstruction")
    q.add_argument("--no-base", action="store_true", help="do not append the normalized-count block")
    q.add_argument("--max-iters", type=int, default=factor.FactorConfig.max_iters)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_fit_factor)

    q = sub.add_parser("ingest-features", help="validate a sentence feature file")
    q.add_argument("--file", required=True)
    q.add_argument("--out", help="write as a feature TSV with metadata")
    q.add_argument("--name")
    q.set_defaults(func=cmd_ingest_features)

    q = sub.add_parser("evaluate", help="nested cross-validated ridge")
    q.add_argument("--features", required=True)
    q.add_argument("--targets", required=True)
    q.add_argument("--alpha-grid")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--outer", type=int, default=10)
    q.add_argument("--inner", type=int, default=10)
    q.add_argument("--level", choices=("verb", "item"))
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("error-analysis", help="correlate held-out errors with a covariate")
    q.add_argument("--report", required=True)
    q.add_argument("--covariate", choices=("variability", "frequency"), required=True)
    q.add_argument("--acceptability")
    q.add_argument("--counts")
    q.add_argument("--verb-map")
    q.add_argument("--lenient", action="store_true")
    q.add_argument("--replicates", type=int, default=999)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_error_analysis)

    q = sub.add_parser("summarize", help="tidy tables from reports")
    q.add_argument("reports", nargs="+")
    q.add_argument("--out")
    q.add_argument("--per-frame")
    q.set_defaults(func=cmd_summarize)

    q = sub.add_parser("run", help="run the pipeline from a config")
    q.add_argument("--config")
    q.add_argument("--preset", choices=("replication",))
    q.add_argument("--ratings")
    q.add_argument("--counts")
    q.add_argument("--out-dir")
    q.add_argument("--force", action="append", help="rerun this stage even if cached")
    q.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            if args.fatal_convergence:
                warnings.simplefilter("error", ConvergenceWarning)
            args.func(args)
    except ConvergenceWarning as e:
        print(f"lexsel: error: {ConvergenceFailure(str(e))}", file=sys.stderr)
        return ConvergenceFailure.exit_code
    except LexselError as e:
        print(f"lexsel: error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"lexsel: error: {e}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
