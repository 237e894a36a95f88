"""Bleached sentence generation and experimental list construction."""

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import _read_tsv
from .errors import ConstructionError, DataError, LookupFailure, MorphologyError

MORPH_TAGS = ("PAST", "PASSIVE-PARTICIPLE", "BARE")
DESIGNS = ("pilot", "mega", "single-verb")

_SLOT_INFLECTED = "___ed"
_SLOT_BARE = "___"


def frame_key(frame_id: str) -> str:
    """Canonical lookup key: collapses whitespace, so "[+ future]" == "[+future]"."""
    s = " ".join(frame_id.split())
    return re.sub(r"\[([+-])\s+", r"[\1", s)


@dataclass(frozen=True)
class FrameTemplate:
    frame_id: str
    template: str
    morph_tag: str

    def __post_init__(self):
        if self.morph_tag not in MORPH_TAGS:
            raise DataError(f"unknown morphology tag {self.morph_tag!r} for {self.frame_id!r}")
        n_slots = self.template.count(_SLOT_BARE)
        inflected = self.template.count(_SLOT_INFLECTED)
        if n_slots != 1 or inflected != (self.morph_tag != "BARE"):
            raise DataError(f"template for {self.frame_id!r} must have exactly one verb slot")


@dataclass(frozen=True)
class VerbEntry:
    lemma: str
    past: str
    passive_participle: str

    def __post_init__(self):
        if not (self.lemma and self.past and self.passive_participle):
            raise MorphologyError(f"incomplete verb entry for {self.lemma!r}")


@dataclass(frozen=True)
class SentenceItem:
    verb: str
    frame_id: str
    sentence: str

    def as_dict(self):
        return {"verb": self.verb, "frame_id": self.frame_id, "sentence": self.sentence}


@dataclass(frozen=True)
class ListDesign:
    lists: tuple
    design_kind: str

    def to_json(self) -> str:
        return json.dumps(
            {"design": self.design_kind, "lists": [[it.as_dict() for it in lst] for lst in self.lists]},
            indent=1,
        )

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ListDesign":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        lists = tuple(tuple(SentenceItem(**d) for d in lst) for lst in obj["lists"])
        return cls(lists, obj["design"])

    @property
    def items(self):
        return [it for lst in self.lists for it in lst]


# ------------------------------------------------------------------ templates


class TemplateSet(dict):
    """frame_key -> FrameTemplate, iterating in file order."""

    def __getitem__(self, frame_id):
        try:
            return super().__getitem__(frame_key(frame_id))
        except KeyError:
            raise LookupFailure(f"unknown frame {frame_id!r}") from None

    def __contains__(self, frame_id):
        return super().__contains__(frame_key(frame_id))

    def templates(self):
        return list(self.values())


def load_templates(path) -> TemplateSet:
    header, rows = _read_tsv(path)
    if header[:3] != ["frame_id", "template", "morph_tag"]:
        raise DataError("template header must be frame_id, template, morph_tag", path=path)
    out = TemplateSet()
    for line, row in rows:
        if len(row) != 3:
            raise DataError("template rows need three fields", line=line, path=path)
        t = FrameTemplate(*(x.strip() for x in row))
        key = frame_key(t.frame_id)
        if dict.__contains__(out, key):
            raise DataError(f"duplicate frame id {t.frame_id!r}", line=line, path=path)
        dict.__setitem__(out, key, t)
    return out


def _resource(name):
    return resources.files("lexsel") / "resources" / name


def builtin_templates(table: str = "mega") -> TemplateSet:
    """Shipped template sets: ``"pilot"`` (replication frames) or ``"mega"``."""
    name = {"pilot": "table1_templates.tsv", "mega": "table2_templates.tsv"}[table]
    with resources.as_file(_resource(name)) as p:
        return load_templates(p)


def builtin_verbs() -> list:
    return _resource("mega_verbs.txt").read_text(encoding="utf-8").split("\n")


# ------------------------------------------------------------------ morphology

_DOUBLING = re.compile(r"^(?:qu|[^aeiou])*[aeiou][^aeiouwxy]$")


def regular_past(lemma: str) -> str:
    """Regular "-ed" inflection of a (possibly multiword) verb's head."""
    head, _, rest = lemma.partition(" ")
    if head.endswith("e"):
        past = head + "d"
    elif re.search(r"[^aeiou]y$", head):
        past = head[:-1] + "ied"
    elif _DOUBLING.match(head):
        past = head + head[-1] + "ed"
    else:
        past = head + "ed"
    return f"{past} {rest}" if rest else past


def load_lexicon(path) -> dict:
    """``lemma<TAB>past<TAB>passive_participle``; the last two may be empty."""
    header, rows = _read_tsv(path)
    out = {}
    for line, row in rows:
        row = [x.strip() for x in row] + ["", ""]
        lemma, past, pp = row[:3]
        if not lemma:
            raise DataError("empty lemma", line=line, path=path)
        out[lemma] = (past or None, pp or None)
    return out


def builtin_lexicon() -> dict:
    with resources.as_file(_resource("irregular_verbs.tsv")) as p:
        return load_lexicon(p)


def make_verb(lemma: str, lexicon: dict = None, derive=True) -> VerbEntry:
    """Build a VerbEntry from the irregular lexicon, falling back to the rule.

    Multiword lemmas ("find out") look up their head word and reattach the
    particle.
    """
    lexicon = builtin_lexicon() if lexicon is None else lexicon
    head, _, rest = lemma.partition(" ")
    entry = lexicon.get(lemma) or lexicon.get(head)
    past = pp = None
    if entry is not None:
        past, pp = entry
        if lemma not in lexicon and rest:
            past = past and f"{past} {rest}"
            pp = pp and f"{pp} {rest}"
    if past is None:
        if not derive:
            raise MorphologyError(f"no past form for {lemma!r} and rule derivation is disabled")
        past = regular_past(lemma)
    if pp is None:
        pp = past
    return VerbEntry(lemma, past, pp)


# ------------------------------------------------------------------ items


def instantiate(verb: VerbEntry, frame: FrameTemplate, templates: TemplateSet = None) -> SentenceItem:
    if templates is not None:
        if frame.frame_id not in templates:
            raise LookupFailure(f"unknown frame {frame.frame_id!r}")
        frame = templates[frame.frame_id]
    if frame.morph_tag == "BARE":
        sentence = frame.template.replace(_SLOT_BARE, verb.lemma, 1)
    else:
        form = verb.past if frame.morph_tag == "PAST" else verb.passive_participle
        sentence = frame.template.replace(_SLOT_INFLECTED, form, 1)
    if _SLOT_BARE in sentence:
        raise DataError(f"unexpanded placeholder in {sentence!r}")
    return SentenceItem(verb.lemma, frame.frame_id, sentence)


def generate_all(verbs: Sequence[VerbEntry], frames: Sequence[FrameTemplate]) -> list:
    """Verb-major cartesian product of verbs and frames."""
    if not verbs or not frames:
        raise DataError("need at least one verb and one frame")
    return [instantiate(v, f) for v in verbs for f in frames]


# ------------------------------------------------------------------ designs


def _pilot_assignment(n_verbs, n_frames, rng, max_steps):
    """Assign each verb's frames to lists in pairs; min-conflicts repair.

    Returns perm with perm[v, 2l], perm[v, 2l+1] the frames of verb v in
    list l, or None when the step budget runs out.
    """
    n_lists = n_frames // 2
    perm = np.array([rng.permutation(n_frames) for _ in range(n_verbs)])
    slot_list = np.arange(n_frames) // 2
    counts = np.zeros((n_lists, n_frames), dtype=np.int64)
    np.add.at(counts, (np.broadcast_to(slot_list, perm.shape), perm), 1)

    def pen(n):
        return max(0, 1 - n) + max(0, n - 2)

    for _ in range(max_steps):
        bad = np.argwhere((counts < 1) | (counts > 2))
        if len(bad) == 0:
            return perm
        l, f = bad[rng.integers(len(bad))]
        # move frame f into list l (if missing) or out of it (if crowded)
        if counts[l, f] < 1:
            v = rng.integers(n_verbs)
            i = int(np.flatnonzero(perm[v] == f)[0])
            j = 2 * l + rng.integers(2)
        else:
            vs = np.flatnonzero((perm[:, 2 * l] == f) | (perm[:, 2 * l + 1] == f))
            v = vs[rng.integers(len(vs))]
            i = int(np.flatnonzero(perm[v] == f)[0])
            j = rng.integers(n_frames)
            if slot_list[j] == l:
                continue
        li, lj = slot_list[i], slot_list[j]
        if li == lj:
            continue
        a, b = perm[v, i], perm[v, j]
        before = pen(counts[li, a]) + pen(counts[lj, b]) + pen(counts[li, b]) + pen(counts[lj, a])
        after = (pen(counts[li, a] - 1) + pen(counts[lj, b] - 1)
                 + pen(counts[li, b] + 1) + pen(counts[lj, a] + 1))
        if after <= before or rng.random() < 0.05:
            counts[li, a] -= 1
            counts[lj, b] -= 1
            counts[li, b] += 1
            counts[lj, a] += 1
            perm[v, i], perm[v, j] = b, a
    return None


def build_pilot_lists(items: Sequence[SentenceItem], seed: int, max_restarts=20,
                      max_steps=200_000) -> ListDesign:
    """Each verb exactly twice per list (distinct frames), each frame 1-2 times.

    ``items`` must be a complete verbs x frames product; the number of lists
    is n_frames / 2 and each list holds 2 * n_verbs items.
    """
    verbs = list(dict.fromkeys(it.verb for it in items))
    frames = list(dict.fromkeys(it.frame_id for it in items))
    lookup = {(it.verb, it.frame_id): it for it in items}
    if len(lookup) != len(verbs) * len(frames) or len(items) != len(lookup):
        raise ConstructionError("pilot design needs a complete verb x frame product")
    if len(frames) % 2:
        raise ConstructionError("pilot design needs an even number of frames (two per verb per list)")
    if len(frames) > 2 * len(verbs):
        raise ConstructionError("each frame must appear at least once per list: need n_frames <= 2 * n_verbs")
    rng = np.random.default_rng(seed)
    for _ in range(max_restarts):
        perm = _pilot_assignment(len(verbs), len(frames), rng, max_steps)
        if perm is not None:
            break
    else:
        raise ConstructionError(
            f"no pilot design found after {max_restarts} restarts: "
            "constraint 'each frame 1-2 times per list' still violated"
        )
    lists = []
    for l in range(len(frames) // 2):
        lst = [lookup[verbs[v], frames[perm[v, 2 * l + k]]] for v in range(len(verbs)) for k in (0, 1)]
        order = rng.permutation(len(lst))
        lists.append(tuple(lst[i] for i in order))
    return ListDesign(tuple(lists), "pilot")


def build_mega_lists(verbs: Sequence[VerbEntry], frames: Sequence[FrameTemplate], seed: int) -> ListDesign:
    """Shifted-block design: every (verb, frame) once; verbs and frames once per list.

    Verbs are shuffled into blocks of len(frames); list (b, s) pairs the i-th
    verb of block b with frame (i + s) mod len(frames).
    """
    n_f = len(frames)
    if not verbs or not frames:
        raise ConstructionError("need at least one verb and one frame")
    if len(verbs) % n_f:
        raise ConstructionError(
            f"{len(verbs)} verbs is not a multiple of {n_f} frames; "
            f"pad the verb set with {n_f - len(verbs) % n_f} explicit padding verbs"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(verbs))
    lists = []
    for b in range(len(verbs) // n_f):
        block = [verbs[k] for k in order[b * n_f:(b + 1) * n_f]]
        for s in range(n_f):
            lst = [instantiate(v, frames[(i + s) % n_f]) for i, v in enumerate(block)]
            lists.append(tuple(lst[k] for k in rng.permutation(n_f)))
    return ListDesign(tuple(lists), "mega")


def build_single_verb_list(verb: VerbEntry, frames: Sequence[FrameTemplate], seed: int = 0) -> ListDesign:
    if not frames:
        raise ConstructionError("need at least one frame")
    items = generate_all([verb], frames)
    rng = np.random.default_rng(seed)
    return ListDesign((tuple(items[i] for i in rng.permutation(len(items))),), "single-verb")


# ------------------------------------------------------------------ checking


def check_design(design: ListDesign, all_items: Iterable[SentenceItem] = None) -> list:
    """Return human-readable constraint violations (empty when valid)."""
    problems = []
    kind = design.design_kind
    for n, lst in enumerate(design.lists):
        vc, fc = {}, {}
        for it in lst:
            vc[it.verb] = vc.get(it.verb, 0) + 1
            fc[it.frame_id] = fc.get(it.frame_id, 0) + 1
        if kind == "pilot":
            problems += [f"list {n}: verb {v} appears {c} times" for v, c in vc.items() if c != 2]
            problems += [f"list {n}: frame {f} appears {c} times" for f, c in fc.items() if not 1 <= c <= 2]
            pairs = {(it.verb, it.frame_id) for it in lst}
            if len(pairs) != len(lst):
                problems.append(f"list {n}: repeated (verb, frame) pair")
        elif kind == "mega":
            problems += [f"list {n}: verb {v} appears {c} times" for v, c in vc.items() if c > 1]
            problems += [f"list {n}: frame {f} appears {c} times" for f, c in fc.items() if c > 1]
        elif kind == "single-verb":
            if len(vc) != 1:
                problems.append(f"list {n}: {len(vc)} distinct verbs")
    if kind == "pilot" and design.lists:
        frames = {it.frame_id for it in design.items}
        for n, lst in enumerate(design.lists):
            missing = frames - {it.frame_id for it in lst}
            problems += [f"list {n}: frame {f} missing" for f in sorted(missing)]
    if all_items is not None:
        seen = {}
        for it in design.items:
            key = (it.verb, it.frame_id)
            seen[key] = seen.get(key, 0) + 1
        want = {(it.verb, it.frame_id) for it in all_items}
        problems += [f"pair {k} used {c} times" for k, c in seen.items() if c != 1]
        problems += [f"pair {k} never used" for k in sorted(want - set(seen))]
        problems += [f"pair {k} not in inventory" for k in sorted(set(seen) - want)]
    return problems
