"""Tables shared by every stage: ratings, counts, acceptabilities, features.

All tables are keyed by string ids.  Integer positions are only exposed
through the ordered vocabularies, which follow order of first appearance
in the source file.
"""

import csv
import logging
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np
from scipy import sparse

from .errors import AnalysisError, ConfigError, DataError, IngestionWarning

log = logging.getLogger(__name__)

RATING_COLUMNS = ("participant", "list", "verb", "frame", "response")
COUNT_COLUMNS = ("verb", "frame", "count")
ACCEPTABILITY_COLUMNS = ("verb", "frame", "acceptability", "variability")

# full round-trip precision for data tables; reports use REPORT_FORMAT
REAL_FORMAT = "%.17g"
REPORT_FORMAT = "%.9g"


def _vocab(items) -> tuple:
    """Ordered, de-duplicated, interned vocabulary (first appearance wins)."""
    seen = {}
    for it in items:
        if it not in seen:
            seen[sys.intern(str(it))] = len(seen)
    return tuple(seen)


def _index(vocab: Sequence[str]) -> dict:
    return {v: i for i, v in enumerate(vocab)}


ITEM_SEP = "|"


def item_key(verb: str, frame: str) -> str:
    """Row key for a sentence-level (verb, frame) item."""
    return f"{verb}{ITEM_SEP}{frame}"


class RatingRecord(NamedTuple):
    participant: str
    list: str
    verb: str
    frame: str
    rating: int


@dataclass(frozen=True, eq=False)
class RatingsTable:
    """Long-format ordinal responses.

    Stored column-wise as integer codes into the four vocabularies.
    """

    participants: tuple
    lists: tuple
    verbs: tuple
    frames: tuple
    participant_idx: np.ndarray
    list_idx: np.ndarray
    verb_idx: np.ndarray
    frame_idx: np.ndarray
    rating: np.ndarray
    scale_max: int = 7

    def __post_init__(self):
        for name in ("participant_idx", "list_idx", "verb_idx", "frame_idx", "rating"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def from_records(cls, records, scale_max: int = 7) -> "RatingsTable":
        records = [RatingRecord(*r) for r in records]
        if not records:
            raise DataError("no ratings")
        participants = _vocab(r.participant for r in records)
        lists = _vocab(r.list for r in records)
        verbs = _vocab(r.verb for r in records)
        frames = _vocab(r.frame for r in records)
        pi, li, vi, fi = (_index(x) for x in (participants, lists, verbs, frames))
        seen = set()
        for n, r in enumerate(records):
            if not 1 <= int(r.rating) <= scale_max:
                raise DataError(f"rating {r.rating} outside [1, {scale_max}]", line=n + 1)
            key = (r.participant, r.list, r.verb, r.frame)
            if key in seen:
                raise DataError(f"duplicate rating for {key}", line=n + 1)
            seen.add(key)
        return cls(
            participants,
            lists,
            verbs,
            frames,
            np.array([pi[r.participant] for r in records], dtype=np.int64),
            np.array([li[r.list] for r in records], dtype=np.int64),
            np.array([vi[r.verb] for r in records], dtype=np.int64),
            np.array([fi[r.frame] for r in records], dtype=np.int64),
            np.array([int(r.rating) for r in records], dtype=np.int64),
            scale_max,
        )

    def __len__(self):
        return len(self.rating)

    @property
    def records(self) -> list:
        return list(self)

    def __iter__(self) -> Iterator[RatingRecord]:
        for p, l, v, f, r in zip(
            self.participant_idx, self.list_idx, self.verb_idx, self.frame_idx, self.rating
        ):
            yield RatingRecord(
                self.participants[p], self.lists[l], self.verbs[v], self.frames[f], int(r)
            )

    @property
    def item_idx(self) -> np.ndarray:
        """Flat (verb, frame) cell index: verb * n_frames + frame."""
        return self.verb_idx * len(self.frames) + self.frame_idx

    def subset(self, mask) -> "RatingsTable":
        mask = np.asarray(mask)
        return RatingsTable.from_records(
            [r for r, keep in zip(self, mask) if keep], scale_max=self.scale_max
        )

    def __eq__(self, other):
        if not isinstance(other, RatingsTable):
            return NotImplemented
        return self.scale_max == other.scale_max and self.records == other.records


@dataclass(frozen=True, eq=False)
class CountsTable:
    """Sparse verb x frame co-occurrence counts."""

    verbs: tuple
    frames: tuple
    counts: sparse.csr_matrix

    def __post_init__(self):
        if self.counts.shape != (len(self.verbs), len(self.frames)):
            raise DataError("count matrix shape does not match vocabularies")
        if self.counts.nnz and self.counts.data.min() < 0:
            raise DataError("negative count")

    @classmethod
    def from_dense(cls, verbs, frames, dense) -> "CountsTable":
        dense = np.asarray(dense)
        return cls(tuple(verbs), tuple(frames), sparse.csr_matrix(dense.astype(np.int64)))

    @property
    def n_verbs(self) -> int:
        return len(self.verbs)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def dense(self) -> np.ndarray:
        return self.counts.toarray()

    def row_totals(self) -> np.ndarray:
        return np.asarray(self.counts.sum(axis=1)).ravel()

    def restrict(self, verbs) -> "CountsTable":
        idx = _index(self.verbs)
        rows = [idx[v] for v in verbs]
        return CountsTable(tuple(verbs), self.frames, self.counts[rows])

    def __eq__(self, other):
        if not isinstance(other, CountsTable):
            return NotImplemented
        return (
            self.verbs == other.verbs
            and self.frames == other.frames
            and np.array_equal(self.dense(), other.dense())
        )


@dataclass(frozen=True, eq=False)
class AcceptabilityMatrix:
    """Normalized acceptability and variability per (verb, frame) cell.

    Cells without ratings hold NaN in both arrays.
    """

    verbs: tuple
    frames: tuple
    acceptability: np.ndarray
    variability: np.ndarray

    def __post_init__(self):
        shape = (len(self.verbs), len(self.frames))
        if self.acceptability.shape != shape or self.variability.shape != shape:
            raise DataError("acceptability arrays do not match vocabularies")
        self.acceptability.setflags(write=False)
        self.variability.setflags(write=False)

    def restrict(self, verbs) -> "AcceptabilityMatrix":
        idx = _index(self.verbs)
        rows = [idx[v] for v in verbs]
        return AcceptabilityMatrix(
            tuple(verbs), self.frames, self.acceptability[rows].copy(), self.variability[rows].copy()
        )

    def to_features(self) -> "FeatureMatrix":
        return FeatureMatrix(self.verbs, np.array(self.acceptability), columns=self.frames)

    def __eq__(self, other):
        if not isinstance(other, AcceptabilityMatrix):
            return NotImplemented
        return (
            self.verbs == other.verbs
            and self.frames == other.frames
            and np.allclose(self.acceptability, other.acceptability, atol=1e-12, equal_nan=True)
            and np.allclose(self.variability, other.variability, atol=1e-12, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """Row-keyed dense real features used as regression inputs."""

    row_keys: tuple
    values: np.ndarray
    columns: tuple = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise DataError("feature values must be a 2-d matrix")
        if values.shape[0] != len(self.row_keys):
            raise DataError("feature rows do not match row keys")
        if not np.all(np.isfinite(values)):
            raise DataError("non-finite feature value")
        if len(set(self.row_keys)) != len(self.row_keys):
            raise DataError("duplicate row key")
        values.setflags(write=False)
        object.__setattr__(self, "row_keys", tuple(self.row_keys))
        object.__setattr__(self, "values", values)
        cols = self.columns
        if cols is None:
            cols = tuple(f"x{j}" for j in range(values.shape[1]))
        elif len(cols) != values.shape[1]:
            raise DataError("column names do not match feature width")
        object.__setattr__(self, "columns", tuple(cols))

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self):
        return len(self.row_keys)

    def take(self, keys) -> "FeatureMatrix":
        idx = _index(self.row_keys)
        try:
            rows = [idx[k] for k in keys]
        except KeyError as e:
            raise AnalysisError(f"row key {e.args[0]!r} missing from features") from None
        return FeatureMatrix(tuple(keys), self.values[rows], self.columns, dict(self.meta))

    def concat(self, other: "FeatureMatrix", prefix=("a", "b")) -> "FeatureMatrix":
        if self.row_keys != other.row_keys:
            other = other.take(self.row_keys)
        cols = tuple(f"{prefix[0]}:{c}" for c in self.columns) + tuple(
            f"{prefix[1]}:{c}" for c in other.columns
        )
        return FeatureMatrix(self.row_keys, np.hstack([self.values, other.values]), cols, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.row_keys == other.row_keys
            and self.columns == other.columns
            and self.values.shape == other.values.shape
            and np.allclose(self.values, other.values, rtol=0, atol=1e-12)
        )


# ---------------------------------------------------------------- ingestion


def _read_tsv(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", path=path) from None
        rows = [(n, row) for n, row in enumerate(reader, start=2) if row and any(row)]
    return header, rows


def _column_positions(header, wanted: Mapping[str, str], path):
    pos = {}
    for canonical, name in wanted.items():
        if name not in header:
            raise ConfigError(f"{path}: missing column {name!r} (for {canonical})")
        pos[canonical] = header.index(name)
    return pos


def load_ratings(path, column_map: Mapping[str, str] = None, lenient=False, scale_max=7,
                 filter_column=None) -> RatingsTable:
    """Read a tab-separated ratings file.

    ``column_map`` maps the canonical names ``participant, list, verb, frame,
    response`` onto the file's header names.  In strict mode the first bad
    row raises :class:`DataError`; ``lenient=True`` drops bad rows with a
    warning.  ``filter_column`` names an optional boolean-ish column; rows
    whose value is true ("True", "1", "yes") are excluded.
    """
    cmap = {c: c for c in RATING_COLUMNS}
    if column_map:
        unknown = set(column_map) - set(RATING_COLUMNS)
        if unknown:
            raise ConfigError(f"unknown column_map keys: {sorted(unknown)}")
        cmap.update(column_map)
    header, rows = _read_tsv(path)
    pos = _column_positions(header, cmap, path)
    fpos = None
    if filter_column is not None:
        fpos = _column_positions(header, {"filter": filter_column}, path)["filter"]

    records, seen, bad = [], set(), 0
    for line, row in rows:
        try:
            if fpos is not None and row[fpos].strip().lower() in ("true", "1", "yes"):
                continue
            if len(row) < len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line=line, path=path)
            raw = row[pos["response"]].strip()
            try:
                rating = int(raw)
            except ValueError:
                raise DataError(f"non-integer rating {raw!r}", line=line, path=path) from None
            if not 1 <= rating <= scale_max:
                raise DataError(f"rating {rating} outside [1, {scale_max}]", line=line, path=path)
            rec = RatingRecord(
                row[pos["participant"]].strip(),
                row[pos["list"]].strip(),
                row[pos["verb"]].strip(),
                row[pos["frame"]].strip(),
                rating,
            )
            key = rec[:4]
            if key in seen:
                raise DataError(f"duplicate rating for {key}", line=line, path=path)
            seen.add(key)
            records.append(rec)
        except DataError:
            if not lenient:
                raise
            bad += 1
    if bad:
        warnings.warn(f"{path}: dropped {bad} invalid rating rows", IngestionWarning, stacklevel=2)
    if not records:
        raise DataError("no valid ratings", path=path)
    return RatingsTable.from_records(records, scale_max=scale_max)


def load_verb_map(path) -> dict:
    """Two-column TSV ``source<TAB>target`` used to rename or merge verbs."""
    header, rows = _read_tsv(path)
    out = {}
    for line, row in rows:
        if len(row) < 2:
            raise DataError("verb map rows need two fields", line=line, path=path)
        out[row[0].strip()] = row[1].strip()
    return out


def load_counts(path, lenient=False, verb_map: Mapping[str, str] = None) -> CountsTable:
    """Read ``verb<TAB>frame<TAB>count`` triples into a sparse table.

    Repeated (verb, frame) triples are summed, which is also how a
    ``verb_map`` merges several source verbs into one target.  Verbs whose
    total is zero are dropped with a warning.
    """
    header, rows = _read_tsv(path)
    pos = _column_positions(header, {c: c for c in COUNT_COLUMNS}, path)
    cells: dict = {}
    verbs, frames = {}, {}
    bad = 0
    for line, row in rows:
        try:
            if len(row) < len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", line=line, path=path)
            raw = row[pos["count"]].strip()
            try:
                c = int(raw)
            except ValueError:
                try:
                    x = float(raw)
                except ValueError:
                    x = math.nan
                if not (math.isfinite(x) and x == int(x)):
                    raise DataError(f"non-integer count {raw!r}", line=line, path=path) from None
                c = int(x)
            if c < 0:
                raise DataError(f"negative count {c}", line=line, path=path)
        except DataError:
            if not lenient:
                raise
            bad += 1
            continue
        verb = row[pos["verb"]].strip()
        if verb_map:
            verb = verb_map.get(verb, verb)
        frame = row[pos["frame"]].strip()
        verbs.setdefault(sys.intern(verb), len(verbs))
        frames.setdefault(sys.intern(frame), len(frames))
        cells[(verb, frame)] = cells.get((verb, frame), 0) + c
    if bad:
        warnings.warn(f"{path}: dropped {bad} invalid count rows", IngestionWarning, stacklevel=2)
    if not cells:
        raise DataError("no counts", path=path)
    r = np.fromiter((verbs[v] for v, _ in cells), dtype=np.int64, count=len(cells))
    c = np.fromiter((frames[f] for _, f in cells), dtype=np.int64, count=len(cells))
    x = np.fromiter(cells.values(), dtype=np.int64, count=len(cells))
    mat = sparse.csr_matrix((x, (r, c)), shape=(len(verbs), len(frames)), dtype=np.int64)
    table = CountsTable(tuple(verbs), tuple(frames), mat)
    totals = table.row_totals()
    if np.any(totals == 0):
        keep = [v for v, t in zip(table.verbs, totals) if t > 0]
        warnings.warn(
            f"{path}: dropped {int(np.sum(totals == 0))} verbs with zero total count",
            IngestionWarning,
            stacklevel=2,
        )
        table = table.restrict(keep)
    table.counts.eliminate_zeros()
    return table


def align_vocabularies(a: CountsTable, b: AcceptabilityMatrix):
    """Restrict both tables to their shared verbs, keeping each one's order."""
    if not a.verbs or not b.verbs:
        raise AnalysisError("cannot align an empty table")
    shared = set(a.verbs) & set(b.verbs)
    if not shared:
        raise AnalysisError("counts and acceptabilities share no verbs")
    log.info(
        "aligned vocabularies: %d shared verbs; dropped %d from counts, %d from acceptabilities",
        len(shared),
        len(a.verbs) - len(shared),
        len(b.verbs) - len(shared),
    )
    a2 = a if len(shared) == len(a.verbs) else a.restrict([v for v in a.verbs if v in shared])
    b2 = b if len(shared) == len(b.verbs) else b.restrict([v for v in b.verbs if v in shared])
    return a2, b2


# ---------------------------------------------------------------- output


def _fmt(x, fmt):
    if isinstance(x, (float, np.floating)):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return fmt % x
    return str(x)


def write_tsv(path, header, rows, fmt=REAL_FORMAT):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(x, fmt) for x in row) + "\n")


def save_ratings(table: RatingsTable, path):
    write_tsv(path, RATING_COLUMNS, table)


def save_counts(table: CountsTable, path):
    coo = table.counts.tocoo()
    order = np.lexsort((coo.col, coo.row))
    rows = ((table.verbs[coo.row[i]], table.frames[coo.col[i]], int(coo.data[i])) for i in order)
    write_tsv(path, COUNT_COLUMNS, rows)


def save_acceptability(m: AcceptabilityMatrix, path):
    rows = (
        (v, f, float(m.acceptability[i, j]), float(m.variability[i, j]))
        for i, v in enumerate(m.verbs)
        for j, f in enumerate(m.frames)
        if not math.isnan(m.acceptability[i, j])
    )
    write_tsv(path, ACCEPTABILITY_COLUMNS, rows)


def load_acceptability(path) -> AcceptabilityMatrix:
    header, rows = _read_tsv(path)
    pos = _column_positions(header, {c: c for c in ACCEPTABILITY_COLUMNS}, path)
    verbs = _vocab(r[pos["verb"]] for _, r in rows)
    frames = _vocab(r[pos["frame"]] for _, r in rows)
    vi, fi = _index(verbs), _index(frames)
    acc = np.full((len(verbs), len(frames)), np.nan)
    var = np.full_like(acc, np.nan)
    for line, r in rows:
        try:
            i, j = vi[r[pos["verb"]]], fi[r[pos["frame"]]]
            acc[i, j] = float(r[pos["acceptability"]])
            var[i, j] = float(r[pos["variability"]])
        except ValueError:
            raise DataError("non-numeric acceptability", line=line, path=path) from None
    return AcceptabilityMatrix(verbs, frames, acc, var)


def save_features(fm: FeatureMatrix, path):
    write_tsv(path, ("key",) + fm.columns, ((k, *map(float, row)) for k, row in zip(fm.row_keys, fm.values)))


def load_features(path) -> FeatureMatrix:
    """Generic feature TSV: a key column followed by numeric columns."""
    header, rows = _read_tsv(path)
    if not rows:
        raise DataError("feature file has no rows", path=path)
    width = len(header)
    keys, vals, seen = [], [], set()
    for line, r in rows:
        if len(r) != width:
            raise DataError(f"ragged row: expected {width} fields, got {len(r)}", line=line, path=path)
        if r[0] in seen:
            raise DataError(f"duplicate key {r[0]!r}", line=line, path=path)
        seen.add(r[0])
        try:
            vals.append([float(x) for x in r[1:]])
        except ValueError:
            raise DataError("non-numeric feature value", line=line, path=path) from None
        keys.append(r[0])
    return FeatureMatrix(tuple(keys), np.array(vals, dtype=float), tuple(header[1:]))
