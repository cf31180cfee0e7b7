"""Triple files, vocabularies, split cleaning, and outdated-fact synthesis.

A knowledge graph here is a list of (head, relation, tail) facts with a
per-fact split tag and a 0/1 label: 1 for facts taken as current, 0 for
facts that have been superseded (the synthesized outdated ones).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

from .autodiff import Rng

TRAIN, TEST, VALID = "train", "test", "valid"
SPLITS = (TRAIN, TEST, VALID)

OUTDATED, CURRENT = 0, 1


class ParseError(ValueError):
    pass


class UnknownSymbolError(KeyError):
    pass


class SynthesisExhaustedError(RuntimeError):
    """Raised when the attempt budget runs out before the target count.

    Carries how many facts were actually produced so callers can report it.
    """

    def __init__(self, split: str, target: int, achieved: int, attempts: int):
        super().__init__(
            f"synthesis exhausted on split '{split}': produced {achieved} of "
            f"{target} outdated facts after {attempts} attempts")
        self.split = split
        self.target = target
        self.achieved = achieved


@dataclass(frozen=True)
class Fact:
    head: int
    relation: int
    tail: int
    label: int = CURRENT


class Vocab:
    """String-to-id mapping in first-appearance order."""

    def __init__(self, names=()):
        self.names: list[str] = list(names)
        self.index: dict[str, int] = {n: i for i, n in enumerate(self.names)}

    def id_of(self, name: str, frozen: bool = False) -> int:
        i = self.index.get(name)
        if i is None:
            if frozen:
                raise UnknownSymbolError(name)
            i = len(self.names)
            self.names.append(name)
            self.index[name] = i
        return i

    def name_of(self, i: int) -> str:
        return self.names[i]

    def __len__(self):
        return len(self.names)

    def __contains__(self, name):
        return name in self.index


class KnowledgeGraph:
    """Entities, relations, facts, and a parallel split tag per fact.

    Treated as immutable: operations build new graphs rather than mutate.
    """

    def __init__(self, entities: Vocab, relations: Vocab,
                 facts: list[Fact], split: list[str]):
        if len(facts) != len(split):
            raise ValueError("facts and split tags differ in length")
        n1, n2 = len(entities), len(relations)
        for f in facts:
            if not (0 <= f.head < n1 and 0 <= f.tail < n1
                    and 0 <= f.relation < n2):
                raise ValueError(f"fact {f} has out-of-range ids")
            if f.label not in (OUTDATED, CURRENT):
                raise ValueError(f"fact {f} has label outside {{0,1}}")
        self.entities = entities
        self.relations = relations
        self.facts = facts
        self.split = split

    @property
    def n1(self):
        return len(self.entities)

    @property
    def n2(self):
        return len(self.relations)

    @property
    def n3(self):
        return len(self.facts)

    def facts_of(self, split: str) -> list[Fact]:
        return [f for f, s in zip(self.facts, self.split) if s == split]


@dataclass
class DatasetStats:
    entities: int
    relations: int
    train: int
    test: int
    valid: int
    outdated_fraction: float


def _parse_line(line: str, lineno: int, path: str):
    fields = line.split("\t")
    if len(fields) == 3:
        h, r, t = fields
        return h, r, t, CURRENT
    if len(fields) == 4:
        h, r, t, lab = fields
        if lab not in ("0", "1"):
            raise ParseError(
                f"{path}:{lineno}: label must be 0 or 1, got {lab!r}")
        return h, r, t, int(lab)
    raise ParseError(
        f"{path}:{lineno}: expected 3 tab-separated fields "
        f"(or 4 with a label), got {len(fields)}")


def load_triples(path: str, split: str = TRAIN,
                 entities: Vocab | None = None,
                 relations: Vocab | None = None,
                 frozen: bool = False) -> KnowledgeGraph:
    """Load one TSV triple file into a graph tagged with a single split.

    Vocabularies grow in first-appearance order; pass existing ones to share
    ids across files. frozen=True errors on symbols missing from them.
    Accepts plain 3-column files and 4-column labeled files.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    entities = entities if entities is not None else Vocab()
    relations = relations if relations is not None else Vocab()
    facts: list[Fact] = []
    with io.open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            h, r, t, lab = _parse_line(line, lineno, path)
            try:
                facts.append(Fact(entities.id_of(h, frozen),
                                  relations.id_of(r, frozen),
                                  entities.id_of(t, frozen), lab))
            except UnknownSymbolError as e:
                raise UnknownSymbolError(
                    f"{path}:{lineno}: symbol {e.args[0]!r} not in "
                    f"frozen vocabulary") from None
    return KnowledgeGraph(entities, relations, facts,
                          [split] * len(facts))


def load_dataset(train_path: str, test_path: str | None = None,
                 valid_path: str | None = None) -> KnowledgeGraph:
    """Load up to three split files into one graph with shared vocabularies.

    Exact duplicate (h, r, t) triples after the first occurrence are dropped
    so the combined fact list stays duplicate-free.
    """
    entities, relations = Vocab(), Vocab()
    facts: list[Fact] = []
    split: list[str] = []
    seen: set[tuple[int, int, int]] = set()
    for path, tag in ((train_path, TRAIN), (test_path, TEST),
                      (valid_path, VALID)):
        if path is None:
            continue
        part = load_triples(path, tag, entities, relations)
        for f in part.facts:
            key = (f.head, f.relation, f.tail)
            if key in seen:
                continue
            seen.add(key)
            facts.append(f)
            split.append(tag)
    return KnowledgeGraph(entities, relations, facts, split)


def clean_splits(kg: KnowledgeGraph) -> tuple[KnowledgeGraph, int]:
    """Drop test/valid facts using an entity or relation unseen in training.

    Returns the cleaned graph and the removal count. Idempotent: training
    facts are never touched, so a second pass removes nothing.
    """
    seen_e: set[int] = set()
    seen_r: set[int] = set()
    for f, s in zip(kg.facts, kg.split):
        if s == TRAIN:
            seen_e.add(f.head)
            seen_e.add(f.tail)
            seen_r.add(f.relation)
    facts: list[Fact] = []
    split: list[str] = []
    removed = 0
    for f, s in zip(kg.facts, kg.split):
        if s != TRAIN and not (f.head in seen_e and f.tail in seen_e
                               and f.relation in seen_r):
            removed += 1
            continue
        facts.append(f)
        split.append(s)
    return KnowledgeGraph(kg.entities, kg.relations, facts, split), removed


def _training_incidence(kg: KnowledgeGraph):
    """Per-entity incident relation sets and per-pair relation sets (train)."""
    rels_at: dict[int, set[int]] = {}
    pair_rels: dict[tuple[int, int], set[int]] = {}
    for f, s in zip(kg.facts, kg.split):
        if s != TRAIN:
            continue
        rels_at.setdefault(f.head, set()).add(f.relation)
        rels_at.setdefault(f.tail, set()).add(f.relation)
        pair_rels.setdefault((f.head, f.tail), set()).add(f.relation)
    return rels_at, pair_rels


def candidate_relations(kg: KnowledgeGraph, head: int, tail: int,
                        _incidence=None) -> list[int]:
    """Sorted R* = R_h ∪ R_t − R_(h,t), computed over training facts."""
    rels_at, pair_rels = _incidence or _training_incidence(kg)
    cand = (rels_at.get(head, set()) | rels_at.get(tail, set())) \
        - pair_rels.get((head, tail), set())
    return sorted(cand)


def synthesize_outdated(kg: KnowledgeGraph, fraction: float, rng: Rng,
                        basis: str = "post",
                        max_attempts_factor: int = 100) -> KnowledgeGraph:
    """Inject synthesized outdated facts into every split.

    Per split: draw a base fact (h, r, t) uniformly with replacement from the
    split, sample r* uniformly from R* = R_h ∪ R_t − R_(h,t) (incidence taken
    over training facts only), and add (h, r*, t) with label 0 if that triple
    exists nowhere in the graph, injected facts included. Empty R* and
    collisions just burn an attempt; running out of the attempt budget
    (max_attempts_factor × target) raises SynthesisExhaustedError.

    basis='post': target is fraction of the post-injection split size,
    k = round(f·n/(1−f)). basis='pre': k = round(f·n).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    if basis not in ("post", "pre"):
        raise ValueError(f"basis must be 'post' or 'pre', got {basis!r}")
    incidence = _training_incidence(kg)
    existing = {(f.head, f.relation, f.tail) for f in kg.facts}
    facts = list(kg.facts)
    split = list(kg.split)
    for tag in SPLITS:
        base = [f for f, s in zip(kg.facts, kg.split) if s == tag]
        n = len(base)
        if n == 0:
            continue
        if basis == "post":
            target = round(fraction * n / (1.0 - fraction))
        else:
            target = round(fraction * n)
        budget = max_attempts_factor * target
        made = 0
        attempts = 0
        while made < target:
            if attempts >= budget:
                raise SynthesisExhaustedError(tag, target, made, attempts)
            attempts += 1
            f = base[int(rng.integers(0, n))]
            cand = candidate_relations(kg, f.head, f.tail, incidence)
            if not cand:
                continue
            r_star = cand[int(rng.integers(0, len(cand)))]
            key = (f.head, r_star, f.tail)
            if key in existing:
                continue
            existing.add(key)
            facts.append(Fact(f.head, r_star, f.tail, OUTDATED))
            split.append(tag)
            made += 1
    return KnowledgeGraph(kg.entities, kg.relations, facts, split)


def stats(kg: KnowledgeGraph) -> DatasetStats:
    counts = {s: 0 for s in SPLITS}
    outdated = 0
    for f, s in zip(kg.facts, kg.split):
        counts[s] += 1
        outdated += 1 if f.label == OUTDATED else 0
    frac = outdated / kg.n3 if kg.n3 else 0.0
    return DatasetStats(kg.n1, kg.n2, counts[TRAIN], counts[TEST],
                        counts[VALID], frac)


def format_stats(st: DatasetStats) -> str:
    lines = [
        f"entities: {st.entities}",
        f"relations: {st.relations}",
        f"train: {st.train}",
        f"test: {st.test}",
        f"valid: {st.valid}",
        f"outdated_fraction: {st.outdated_fraction:.6f}",
    ]
    return "\n".join(lines) + "\n"


def stats_csv(kg: KnowledgeGraph) -> str:
    """Per-split CSV: facts and outdated counts."""
    rows = ["split,facts,outdated_facts,outdated_fraction"]
    for tag in SPLITS:
        fs = kg.facts_of(tag)
        bad = sum(1 for f in fs if f.label == OUTDATED)
        frac = bad / len(fs) if fs else 0.0
        rows.append(f"{tag},{len(fs)},{bad},{frac:.6f}")
    return "\n".join(rows) + "\n"


def write_labeled(kg: KnowledgeGraph, path: str,
                  split: str | None = None) -> int:
    """Write facts as head<TAB>relation<TAB>tail<TAB>label lines.

    Restricted to one split when given. Returns the number of lines written.
    """
    n = 0
    with io.open(path, "w", encoding="utf-8") as fh:
        for f, s in zip(kg.facts, kg.split):
            if split is not None and s != split:
                continue
            fh.write(f"{kg.entities.name_of(f.head)}\t"
                     f"{kg.relations.name_of(f.relation)}\t"
                     f"{kg.entities.name_of(f.tail)}\t{f.label}\n")
            n += 1
    return n
