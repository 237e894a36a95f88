"""Declarative end-to-end runs with content-hash caching.

A run is described by one YAML file (see :class:`PipelineConfig`).  Stages
execute in dependency order; each stage's cache key is the hash of its
config subsection plus the contents of its inputs, so an unchanged stage is
skipped and a deleted output is rebuilt.  Everything lands under
``out_dir`` together with ``manifest.json``.
"""

import hashlib
import json
import logging
import shutil
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import bleach, factor, freq
from .agreement import bootstrap_ci, pairwise_list_agreement, simulate_expected_agreement, summarize_pairs
from .data import (
    REPORT_FORMAT,
    FeatureMatrix,
    align_vocabularies,
    load_acceptability,
    load_counts,
    load_features,
    load_ratings,
    load_verb_map,
    save_acceptability,
    save_features,
    write_tsv,
)
from .errors import (
    ConfigError,
    ConvergenceFailure,
    ConvergenceWarning,
    LexselError,
    StageFailure,
)
from .evaluate import ALPHA_GRID, CVReport, covariate, error_correlation, item_targets, nested_cv, verb_targets
from .normalize import (
    FitConfig,
    OrdinalModelParams,
    acceptability_matrix,
    compare_normalizers,
    fit_ordinal_model,
    participant_quality,
)

log = logging.getLogger(__name__)

STAGES = ("generate", "agreement", "normalize", "simulate", "freq", "factor", "features", "evaluate",
          "errors", "summarize")
PATH_KEYS = ("ratings", "counts", "templates", "lexicon", "verbs", "verb_map", "features")
COVARIATES = ("variability", "frequency")


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; relative paths resolve against the config file."""

    out_dir: Path = Path("lexsel-out")
    # paths
    ratings: Path = None
    counts: Path = None
    templates: str = None          # file, or "mega" / "pilot" for the shipped sets
    lexicon: Path = None
    verbs: Path = None             # one lemma per line; "builtin" for the shipped verb set
    verb_map: Path = None
    features: tuple = ()
    # ingestion
    columns: dict = field(default_factory=dict)
    scale_max: int = 7
    lenient: bool = False
    filter_column: str = None
    # grids and models
    freq_models: tuple = freq.MODELS
    freq_grid: tuple = freq.DEFAULT_GRID
    factor_models: tuple = factor.MODELS
    k_grid: tuple = factor.K_GRID
    alpha_grid: tuple = ALPHA_GRID
    outer: int = 10
    inner: int = 10
    # seeds
    seed_lists: int = 0
    seed_simulate: int = 0
    seed_factor: int = 0
    seed_cv: int = 0
    seed_bootstrap: int = 0
    # toggles
    weighting: str = "auto"
    assembly: str = "reconstruction"
    indicator: bool = True
    design: str = "mega"
    restrict_counts: bool = True
    fatal_convergence: bool = False
    sims: int = 999
    replicates: int = 999
    covariates: tuple = COVARIATES
    workers: int = 1
    fit: dict = field(default_factory=dict)
    factor_fit: dict = field(default_factory=dict)
    stages: tuple = None

    # ---------------------------------------------------------- loading

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "PipelineConfig":
        """Build from the nested YAML layout (paths/grids/models/seeds/toggles/cv)."""
        d = dict(d or {})
        base = Path(base_dir)
        kw = {}

        def take(section, mapping):
            sub = d.pop(section, None) or {}
            if not isinstance(sub, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            for k, v in sub.items():
                if k not in mapping:
                    raise ConfigError(f"unknown key {section}.{k}")
                kw[mapping[k]] = v

        take("paths", {k: k for k in PATH_KEYS})
        take("grids", {"freq": "freq_grid", "k": "k_grid", "alpha": "alpha_grid"})
        take("models", {"freq": "freq_models", "factor": "factor_models"})
        take("seeds", {"lists": "seed_lists", "simulate": "seed_simulate", "factor": "seed_factor",
                       "cv": "seed_cv", "bootstrap": "seed_bootstrap"})
        take("toggles", {k: k for k in ("weighting", "assembly", "indicator", "design", "restrict_counts",
                                        "fatal_convergence")})
        take("cv", {"outer": "outer", "inner": "inner", "replicates": "replicates"})
        names = {f.name for f in fields(cls)}
        for k, v in d.items():
            if k not in names:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = v
        for k in ("ratings", "counts", "lexicon", "verb_map"):
            if kw.get(k) is not None:
                kw[k] = base / kw[k]
        if kw.get("verbs") not in (None, "builtin"):
            kw["verbs"] = base / kw["verbs"]
        if kw.get("templates") not in (None, "mega", "pilot"):
            kw["templates"] = base / kw["templates"]
        if "features" in kw:
            feats = kw["features"]
            kw["features"] = tuple(base / p for p in ([feats] if isinstance(feats, str) else feats or ()))
        kw["out_dir"] = base / kw.get("out_dir", "lexsel-out")
        for k in ("freq_models", "freq_grid", "factor_models", "k_grid", "alpha_grid", "covariates", "stages"):
            if kw.get(k) is not None:
                v = kw[k]
                kw[k] = tuple([v] if isinstance(v, (str, int, float)) else v)
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"no such config file: {path}")
        try:
            d = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from None
        if d is not None and not isinstance(d, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(d, path.parent)

    # ---------------------------------------------------------- checking

    def requested_stages(self) -> tuple:
        """Explicit ``stages`` or everything the configured inputs allow."""
        if self.stages is not None:
            return tuple(s for s in STAGES if s in self.stages)
        out = []
        if self.verbs is not None:
            out.append("generate")
        if self.ratings is not None:
            out += ["agreement", "normalize"]
        if self.counts is not None:
            out += ["freq", "factor"]
        if self.features:
            out.append("features")
        if self.ratings is not None and (self.counts is not None or self.features):
            out += ["evaluate", "errors", "summarize"]
        return tuple(out)

    def validate(self) -> "PipelineConfig":
        """Raise ConfigError on anything that would fail later; returns self."""
        bad = [s for s in (self.stages or ()) if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; expected some of {STAGES}")
        for k in ("ratings", "counts", "lexicon", "verb_map"):
            p = getattr(self, k)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{k} path does not exist: {p}")
        if self.verbs not in (None, "builtin") and not Path(self.verbs).is_file():
            raise ConfigError(f"verbs path does not exist: {self.verbs}")
        if self.templates not in (None, "mega", "pilot") and not Path(self.templates).is_file():
            raise ConfigError(f"templates path does not exist: {self.templates}")
        for p in self.features:
            if not Path(p).is_file():
                raise ConfigError(f"features path does not exist: {p}")
        stages = self.requested_stages()
        if not stages:
            raise ConfigError("nothing to run: configure ratings, counts, features or verbs")
        need = {
            "generate": ("verbs",), "agreement": ("ratings",), "normalize": ("ratings",),
            "simulate": ("ratings",), "freq": ("counts",), "factor": ("counts",), "features": ("features",),
            "evaluate": ("ratings",), "errors": ("ratings",), "summarize": ("ratings",),
        }
        for s in stages:
            for k in need[s]:
                if not getattr(self, k):
                    raise ConfigError(f"stage {s!r} needs paths.{k}")
        if "evaluate" in stages and self.counts is None and not self.features:
            raise ConfigError("stage 'evaluate' needs counts or sentence features")
        if "frequency" in self.covariates and "errors" in stages and self.counts is None:
            raise ConfigError("the frequency covariate needs paths.counts")
        for name, grid in (("grids.freq", self.freq_grid), ("grids.k", self.k_grid),
                           ("grids.alpha", self.alpha_grid)):
            if not grid:
                raise ConfigError(f"{name} is empty")
            try:
                vals = [float(x) for x in grid]
            except (TypeError, ValueError):
                raise ConfigError(f"{name} must be numbers") from None
            if any(not np.isfinite(v) or v < 0 for v in vals):
                raise ConfigError(f"{name} must be finite and nonnegative")
        if any(int(k) != k or k < 1 for k in self.k_grid):
            raise ConfigError("grids.k must be positive integers")
        for m in self.freq_models:
            if m not in freq.MODELS:
                raise ConfigError(f"unknown frequency model {m!r}")
        for m in self.factor_models:
            if m not in factor.MODELS:
                raise ConfigError(f"unknown factor model {m!r}")
        for c in self.covariates:
            if c not in COVARIATES:
                raise ConfigError(f"unknown covariate {c!r}")
        checks = [
            (self.weighting in ("auto", "uniform"), "toggles.weighting must be auto or uniform"),
            (self.assembly in ("reconstruction", "latent"), "toggles.assembly must be reconstruction or latent"),
            (self.design in bleach.DESIGNS, f"toggles.design must be one of {bleach.DESIGNS}"),
            (self.outer >= 2 and self.inner >= 2, "cv folds must be at least 2"),
            (self.sims >= 1 and self.replicates >= 1, "sims and replicates must be positive"),
            (self.workers >= 1, "workers must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.fit_config()
            self.factor_config()
        except (TypeError, LexselError) as e:
            raise ConfigError(f"bad fit settings: {e}") from None
        return self

    def fit_config(self) -> FitConfig:
        return FitConfig(**self.fit)

    def factor_config(self) -> factor.FactorConfig:
        return factor.FactorConfig(**dict({"seed": self.seed_factor}, **self.factor_fit))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, Path):
                d[k] = str(v)
            elif isinstance(v, tuple):
                d[k] = [str(x) if isinstance(x, Path) else x for x in v]
        return d


def replication_preset(ratings, counts, out_dir, **overrides) -> PipelineConfig:
    """The published setup: all count and factor models on their full grids,
    quality-weighted normalization, 10 x 10 nested CV, 999 bootstrap
    replicates."""
    cfg = PipelineConfig(
        out_dir=Path(out_dir), ratings=Path(ratings), counts=Path(counts),
        freq_models=freq.MODELS, freq_grid=freq.DEFAULT_GRID, factor_models=factor.MODELS,
        k_grid=factor.K_GRID, alpha_grid=ALPHA_GRID, weighting="auto", outer=10, inner=10,
        replicates=999, stages=("agreement", "normalize", "freq", "factor", "evaluate", "errors", "summarize"),
    )
    return replace(cfg, **overrides)


# ------------------------------------------------------------------ manifest


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunManifest:
    config_hash: str
    version: str = __version__
    started: str = ""
    finished: str = ""
    # stage -> {"key", "status", "inputs": {name: sha256}, "outputs": {relpath: sha256}}
    stages: dict = field(default_factory=dict)

    def save(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def status(self) -> dict:
        """stage -> "ran" / "skipped", in pipeline order."""
        return {k: self.stages[k]["status"] for k in STAGES if k in self.stages}


def _stamp():
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# ------------------------------------------------------------------ stages


class _Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self._ratings = None

    # shared inputs ---------------------------------------------------

    def ratings(self):
        if self._ratings is None:
            c = self.cfg
            self._ratings = load_ratings(c.ratings, c.columns or None, c.lenient, c.scale_max, c.filter_column)
        return self._ratings

    def counts(self):
        vm = load_verb_map(self.cfg.verb_map) if self.cfg.verb_map else None
        counts = load_counts(self.cfg.counts, self.cfg.lenient, vm)
        acc_path = self.out / "normalize" / "acceptability.tsv"
        if self.cfg.restrict_counts and self.cfg.ratings is not None and acc_path.exists():
            counts, _ = align_vocabularies(counts, load_acceptability(acc_path))
        return counts

    def rel(self, p) -> str:
        return Path(p).relative_to(self.out).as_posix()

    def outputs_of(self, manifest, stage, suffix=None) -> list:
        ent = manifest.stages.get(stage)
        if not ent:
            return []
        return [self.out / k for k in sorted(ent["outputs"]) if suffix is None or k.endswith(suffix)]

    # stage bodies: return the list of files written -----------------

    def run_generate(self, d):
        c = self.cfg
        lex = bleach.load_lexicon(c.lexicon) if c.lexicon else bleach.builtin_lexicon()
        if c.templates in (None, "mega", "pilot"):
            tset = bleach.builtin_templates(c.templates or "mega")
        else:
            tset = bleach.load_templates(c.templates)
        lemmas = bleach.builtin_verbs() if c.verbs == "builtin" else read_verb_list(c.verbs)
        verbs = [bleach.make_verb(v, lex) for v in lemmas]
        frames = tset.templates()
        items = bleach.generate_all(verbs, frames)
        design = build_design(c.design, verbs, frames, items, c.seed_lists)
        write_tsv(d / "items.tsv", ("verb", "frame_id", "sentence"),
                  ((it.verb, it.frame_id, it.sentence) for it in items))
        design.save(d / "lists.json")
        return [d / "items.tsv", d / "lists.json"]

    def run_agreement(self, d):
        rt = self.ratings()
        pairs = pairwise_list_agreement(rt)
        write_pairs(pairs, d / "pairs.tsv")
        summ = summarize_pairs(pairs)
        finite = [p.rho for p in pairs if np.isfinite(p.rho)]
        if finite:
            ci = bootstrap_ci(finite, "mean", self.cfg.replicates, seed=self.cfg.seed_bootstrap)
            summ["mean_ci"] = [ci.lo, ci.hi]
        _dump_json(summ, d / "summary.json")
        return [d / "pairs.tsv", d / "summary.json"]

    def run_normalize(self, d):
        rt = self.ratings()
        fcfg = self.cfg.fit_config()
        written = []
        weights = None
        if self.cfg.weighting == "auto":
            pairs = pairwise_list_agreement(rt)
            weights = participant_quality(pairs, rt.participants)
            write_tsv(d / "quality.tsv", ("participant", "quality"),
                      ((p, float(weights.score[p])) for p in rt.participants))
            written.append(d / "quality.tsv")
        params = fit_ordinal_model(rt, weights, fcfg)
        acc = acceptability_matrix(params, rt, weights, fcfg)
        save_acceptability(acc, d / "acceptability.tsv")
        params.save(d / "params.npz")
        diag = fit_diagnostics(params)
        diag["concordance"] = compare_normalizers(rt, params)
        _dump_json(diag, d / "diagnostics.json")
        return written + [d / "acceptability.tsv", d / "params.npz", d / "diagnostics.json"]

    def run_simulate(self, d):
        params = OrdinalModelParams.load(self.out / "normalize" / "params.npz")
        ci = simulate_expected_agreement(params, self.ratings(), self.cfg.sims, self.cfg.seed_simulate)
        write_tsv(d / "replicates.tsv", ("replicate", "mean_rho"), enumerate(map(float, ci.samples)))
        _dump_json({"point": ci.point, "lo": ci.lo, "hi": ci.hi, "sims": ci.replicates, "level": ci.level},
                   d / "summary.json")
        return [d / "replicates.tsv", d / "summary.json"]

    def run_freq(self, d):
        counts = self.counts()
        fcfg = self.cfg.fit_config()
        written = []
        for model in self.cfg.freq_models:
            for fm in freq.grid(counts, model, self.cfg.freq_grid, fcfg, self.cfg.indicator):
                written += save_representation(fm, d / f"{model}_{_tag(fm.meta['hyperparameter'])}.tsv")
        return written

    def run_factor(self, d):
        counts = self.counts()
        fcfg = self.cfg.factor_config()
        bases = {}
        written = []
        for model in self.cfg.factor_models:
            if model not in bases:
                bases[model] = factor.default_base(counts, model)
            for K in self.cfg.k_grid:
                fit = factor.fit_model(counts, model, int(K), fcfg)
                fm = factor.assemble_features(fit, bases[model], self.cfg.assembly)
                written += save_representation(fm, d / f"{model}_K{int(K)}.tsv")
        return written

    def run_features(self, d):
        written = []
        for p in self.cfg.features:
            fm = factor.load_sentence_features(p)
            fm = FeatureMatrix(fm.row_keys, fm.values, fm.columns,
                               {"model": Path(p).stem, "hyperparameter": fm.dim, "level": "item"})
            written += save_representation(fm, d / f"{Path(p).stem}.tsv")
        return written

    def run_evaluate(self, d, manifest):
        acc = load_acceptability(self.out / "normalize" / "acceptability.tsv")
        jobs = []
        for stage in ("freq", "factor", "features"):
            for rep in self.outputs_of(manifest, stage, ".tsv"):
                jobs.append((stage, rep))
        if not jobs:
            raise ConfigError("no representations to evaluate")
        c = self.cfg

        def one(job):
            stage, rep = job
            X = load_representation(rep)
            item_level = X.meta.get("level") == "item"
            Y = item_targets(acc) if item_level else verb_targets(acc, _shared(acc.verbs, X.row_keys))
            keys = [k for k in Y.row_keys if k in set(X.row_keys)]
            if len(keys) < c.outer:
                raise ConfigError(f"{rep.name}: only {len(keys)} rows shared with the targets")
            rpt = nested_cv(X.take(keys), Y.take(keys), c.alpha_grid, c.outer, c.inner, c.seed_cv,
                            bootstrap_seed=c.seed_bootstrap)
            rpt.meta = dict(X.meta, representation=f"{stage}/{rep.stem}")
            path = d / stage / f"{rep.stem}.json"
            path.parent.mkdir(parents=True, exist_ok=True)
            rpt.save(path)
            return path

        if c.workers > 1:
            with ThreadPoolExecutor(c.workers) as ex:
                return list(ex.map(one, jobs))
        return [one(j) for j in jobs]

    def run_errors(self, d, manifest):
        reports = self.outputs_of(manifest, "evaluate", ".json")
        if not reports:
            raise ConfigError("no reports for error analysis")
        acc = load_acceptability(self.out / "normalize" / "acceptability.tsv")
        counts = self.counts() if "frequency" in self.cfg.covariates else None
        loaded = [(p, CVReport.load(p)) for p in reports]
        # the best count-based representation, as in the published analysis
        pool = [x for x in loaded if x[1].meta.get("level") != "item"] or loaded
        path, best = max(pool, key=lambda x: x[1].mean_r2)
        rows = error_analysis(best, self.cfg.covariates, acc, counts, self.cfg.replicates, self.cfg.seed_bootstrap)
        write_tsv(d / "error_analysis.tsv", ("report", "covariate", "rho", "ci_lo", "ci_hi", "n"),
                  ((self.rel(path), *r) for r in rows), fmt=REPORT_FORMAT)
        return [d / "error_analysis.tsv"]

    def run_summarize(self, d, manifest):
        reports = self.outputs_of(manifest, "evaluate", ".json")
        summarize(reports, d / "summary.tsv", d / "per_frame.tsv")
        return [d / "summary.tsv", d / "per_frame.tsv"]


def _shared(verbs, keys):
    ks = set(keys)
    return [v for v in verbs if v in ks]


def _tag(x) -> str:
    return f"{float(x):g}"


def _dump_json(obj, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


# ------------------------------------------------------------------ helpers shared with the CLI


def read_verb_list(path) -> list:
    lines = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    verbs = [ln for ln in lines if ln and not ln.startswith("#")]
    if not verbs:
        raise ConfigError(f"no verbs in {path}")
    return verbs


def build_design(kind, verbs, frames, items, seed):
    if kind == "pilot":
        design = bleach.build_pilot_lists(items, seed)
    elif kind == "mega":
        design = bleach.build_mega_lists(verbs, frames, seed)
    elif kind == "single-verb":
        if len(verbs) != 1:
            raise ConfigError("the single-verb design takes exactly one verb")
        design = bleach.build_single_verb_list(verbs[0], frames, seed)
    else:
        raise ConfigError(f"unknown design {kind!r}")
    problems = bleach.check_design(design, items if kind != "single-verb" else None)
    if problems:
        from .errors import ConstructionError

        raise ConstructionError(f"design check failed: {problems[:5]}")
    return design


def write_pairs(pairs, path):
    write_tsv(path, ("list", "participant1", "participant2", "rho", "n_items"),
              ((p.list, p.p1, p.p2, float(p.rho), p.n_items) for p in pairs))


def fit_diagnostics(params: OrdinalModelParams) -> dict:
    diag = {k: v for k, v in params.diagnostics.items() if k != "trace"}
    diag["trace_length"] = len(params.diagnostics.get("trace", []))
    diag["n_verbs"], diag["n_frames"] = len(params.verbs), len(params.frames)
    diag["n_participants"] = len(params.participants)
    return diag


def save_representation(fm: FeatureMatrix, path) -> list:
    """FeatureMatrix TSV plus a JSON sidecar holding its metadata."""
    path = Path(path)
    save_features(fm, path)
    side = path.with_suffix(".json")
    _dump_json(fm.meta, side)
    return [path, side]


def load_representation(path) -> FeatureMatrix:
    path = Path(path)
    fm = load_features(path)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return FeatureMatrix(fm.row_keys, fm.values, fm.columns, meta)


def error_analysis(report: CVReport, kinds, acceptability=None, counts=None, replicates=999, seed=0) -> list:
    """(covariate, rho, ci_lo, ci_hi, n) rows for the report's held-out errors."""
    keys, err = report.absolute_errors()
    rows = []
    for kind in kinds:
        cov = covariate(keys, kind, acceptability, counts)
        rho, ci = error_correlation(err, cov, replicates, seed=seed)
        rows.append((kind, float(rho), float(ci.lo), float(ci.hi), len(keys)))
    return rows


def summarize(report_paths, out_path=None, per_frame_path=None):
    """Tidy tables from CV reports.

    Returns (rows, per_frame_rows).  rows: (model, hyperparameter, mean_r2,
    ci_lo, ci_hi), one per report, in the given order; per_frame_rows:
    (model, hyperparameter, frame, r2).
    """
    report_paths = list(report_paths)
    if not report_paths:
        raise ConfigError("summarize needs at least one report")
    rows, pf = [], []
    for p in report_paths:
        r = CVReport.load(p)
        model = r.meta.get("model", Path(p).stem)
        hyper = r.meta.get("hyperparameter", "")
        rows.append((model, hyper, float(r.mean_r2), float(r.ci[0]), float(r.ci[1])))
        pf += [(model, hyper, f, float(v)) for f, v in r.per_frame_r2.items()]
    if out_path is not None:
        write_tsv(out_path, ("model", "hyperparameter", "mean_r2", "ci_lo", "ci_hi"), rows, fmt=REPORT_FORMAT)
    if per_frame_path is not None:
        write_tsv(per_frame_path, ("model", "hyperparameter", "frame", "r2"), pf, fmt=REPORT_FORMAT)
    return rows, pf


# ------------------------------------------------------------------ driver

# stage -> (upstream stages whose outputs are inputs, config fields in its cache key)
_GRAPH = {
    "generate": ((), ("templates", "verbs", "lexicon", "design", "seed_lists")),
    "agreement": ((), ("columns", "scale_max", "lenient", "filter_column", "replicates", "seed_bootstrap")),
    "normalize": ((), ("columns", "scale_max", "lenient", "filter_column", "weighting", "fit")),
    "simulate": (("normalize",), ("columns", "scale_max", "lenient", "filter_column", "sims", "seed_simulate")),
    "freq": (("normalize",), ("freq_models", "freq_grid", "indicator", "fit", "restrict_counts", "lenient")),
    "factor": (("normalize",), ("factor_models", "k_grid", "factor_fit", "seed_factor", "assembly",
                               "restrict_counts", "lenient")),
    "features": ((), ()),
    "evaluate": (("normalize", "freq", "factor", "features"), ("alpha_grid", "outer", "inner", "seed_cv",
                                                               "seed_bootstrap")),
    "errors": (("normalize", "evaluate"), ("covariates", "replicates", "seed_bootstrap", "restrict_counts",
                                          "lenient")),
    "summarize": (("evaluate",), ()),
}

# external files each stage reads
_EXTERNAL = {
    "generate": ("templates", "verbs", "lexicon"),
    "agreement": ("ratings",),
    "normalize": ("ratings",),
    "simulate": ("ratings",),
    "freq": ("counts", "verb_map"),
    "factor": ("counts", "verb_map"),
    "features": ("features",),
    "errors": ("counts", "verb_map"),
}


def _external_hashes(cfg, stage) -> dict:
    out = {}
    for k in _EXTERNAL.get(stage, ()):
        v = getattr(cfg, k)
        if v is None or v in ("builtin", "mega", "pilot"):
            out[k] = v
        elif isinstance(v, tuple):
            for i, p in enumerate(v):
                out[f"{k}[{i}]"] = file_hash(p)
        else:
            out[k] = file_hash(v)
    return out


def run_pipeline(config: PipelineConfig, force=()) -> RunManifest:
    """Run the requested stages in order, skipping those whose cache key and
    outputs are unchanged.  ``force`` names stages to rerun regardless."""
    cfg = config.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / "manifest.json"
    old = RunManifest.load(mpath) if mpath.exists() else None
    manifest = RunManifest(_json_hash(cfg.to_dict()), started=_stamp())
    if old is not None:
        # stages not requested this time keep their previous record
        manifest.stages = {k: v for k, v in old.stages.items()}
    run = _Run(cfg)
    stages = cfg.requested_stages()
    with warnings.catch_warnings():
        if cfg.fatal_convergence:
            warnings.simplefilter("error", ConvergenceWarning)
        for stage in stages:
            deps, keys = _GRAPH[stage]
            inputs = _external_hashes(cfg, stage)
            for dep in deps:
                ent = manifest.stages.get(dep)
                if ent:
                    inputs.update({f"{dep}:{k}": h for k, h in ent["outputs"].items()})
            sub = {k: getattr(cfg, k) for k in keys}
            key = _json_hash({"stage": stage, "version": __version__, "config": sub, "inputs": inputs})
            prev = manifest.stages.get(stage)
            d = out / stage
            if (stage not in force and prev and prev["key"] == key
                    and all((out / p).exists() and file_hash(out / p) == h for p, h in prev["outputs"].items())):
                manifest.stages[stage] = dict(prev, status="skipped")
                log.info("stage %s: up to date", stage)
                continue
            log.info("stage %s: running", stage)
            if d.exists():
                shutil.rmtree(d)
            d.mkdir(parents=True)
            body = getattr(run, f"run_{stage}")
            try:
                written = body(d, manifest) if stage in ("evaluate", "errors", "summarize") else body(d)
            except ConvergenceWarning as e:
                raise StageFailure(stage, d, ConvergenceFailure(str(e))) from e
            except LexselError as e:
                raise StageFailure(stage, getattr(e, "path", None) or d, e) from e
            outputs = {run.rel(p): file_hash(p) for p in written}
            manifest.stages[stage] = {"key": key, "status": "ran", "inputs": inputs, "outputs": outputs}
            # a partially written manifest still lets the next run skip finished stages
            manifest.save(mpath)
    manifest.finished = _stamp()
    manifest.save(mpath)
    return manifest
