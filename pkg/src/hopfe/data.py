"""Triple stores, the filter index, synthetic graphs and entity attributes."""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySplit, InvalidConfig, ParseError, ShapeMismatch, WidthMismatch

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
KINDS = ("label", "alias", "instance", "description")
CATEGORIES = ("1-1", "1-N", "N-1", "N-N")
CATEGORY_THRESHOLD = 1.5


class FilterIndex:
    """Every known-true triple, with (h, r, ·) and (·, r, t) lookups."""

    def __init__(self, triples, num_entities, num_relations):
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.num_entities = num_entities
        self.num_relations = num_relations
        self._keys = np.unique(self.encode(triples[:, 0], triples[:, 1], triples[:, 2]))
        self._tails = {}
        self._heads = {}
        for h, r, t in triples.tolist():
            self._tails.setdefault((h, r), set()).add(t)
            self._heads.setdefault((r, t), set()).add(h)
        self._tails = {key: np.array(sorted(v), dtype=np.int64) for key, v in self._tails.items()}
        self._heads = {key: np.array(sorted(v), dtype=np.int64) for key, v in self._heads.items()}

    def encode(self, h, r, t):
        h = np.asarray(h, dtype=np.int64)
        r = np.asarray(r, dtype=np.int64)
        t = np.asarray(t, dtype=np.int64)
        return (h * self.num_relations + r) * self.num_entities + t

    def __len__(self):
        return len(self._keys)

    def contains(self, h, r, t):
        keys = self.encode(h, r, t)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    def __contains__(self, triple):
        h, r, t = triple
        return bool(self.contains(h, r, t))

    def tails(self, h, r):
        return self._tails.get((int(h), int(r)), np.empty(0, dtype=np.int64))

    def heads(self, r, t):
        return self._heads.get((int(r), int(t)), np.empty(0, dtype=np.int64))


@dataclass
class TripleStore:
    triples: np.ndarray
    entities: list
    relations: list
    splits: dict
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        self.triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        self._filter = None
        self._entity_ids = None
        self._relation_ids = None

    @property
    def num_entities(self):
        return len(self.entities)

    @property
    def num_relations(self):
        return len(self.relations)

    @property
    def entity_dict(self):
        if self._entity_ids is None:
            self._entity_ids = {name: i for i, name in enumerate(self.entities)}
        return self._entity_ids

    @property
    def relation_dict(self):
        if self._relation_ids is None:
            self._relation_ids = {name: i for i, name in enumerate(self.relations)}
        return self._relation_ids

    def split(self, name):
        start, end = self.splits[name]
        return self.triples[start:end]

    @property
    def filter_index(self):
        if self._filter is None:
            self._filter = FilterIndex(self.triples, self.num_entities, self.num_relations)
        return self._filter

    def decode(self, name=None):
        """Triples of a split (or all) as name tuples."""
        rows = self.triples if name is None else self.split(name)
        return [(self.entities[h], self.relations[r], self.entities[t]) for h, r, t in rows.tolist()]


def from_named_splits(named, report=None, entities=None, relations=None):
    """Build a store from {split: [(head, relation, tail), ...]} name triples.

    ``entities`` / ``relations`` fix the leading ids (e.g. from exported
    dictionaries); names first seen in triples are appended.
    """
    entities = {n: i for i, n in enumerate(entities or [])}
    relations = {n: i for i, n in enumerate(relations or [])}
    rows, splits = [], {}
    for name in SPLITS:
        start = len(rows)
        for h, r, t in named.get(name, []):
            rows.append((entities.setdefault(h, len(entities)),
                         relations.setdefault(r, len(relations)),
                         entities.setdefault(t, len(entities))))
        splits[name] = (start, len(rows))
    return TripleStore(np.array(rows, dtype=np.int64).reshape(-1, 3), list(entities),
                       list(relations), splits, report or {})


def read_dict(path):
    """Names ordered by id from an ``id<TAB>name`` file."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, "expected id<TAB>name")
            try:
                pairs.append((int(parts[0]), parts[1]))
            except ValueError:
                raise ParseError(path, lineno, f"bad id {parts[0]!r}") from None
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise ParseError(path, 0, "ids are not dense from 0")
    return [n for _, n in pairs]


def _read_triples(path):
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ParseError(path, lineno, f"expected head<TAB>relation<TAB>tail, got {len(parts)} field(s)")
            out.append(tuple(p.strip() for p in parts))
    return out


def load_triples(train_path, valid_path, test_path, entities=None, relations=None):
    named = {}
    report = {"duplicates": {}, "lines": {}}
    for name, path in zip(SPLITS, (train_path, valid_path, test_path)):
        rows = _read_triples(path)
        unique = list(dict.fromkeys(rows))
        report["lines"][name] = len(rows)
        report["duplicates"][name] = len(rows) - len(unique)
        if not unique:
            raise EmptySplit(f"{name} split is empty ({path})")
        named[name] = unique
    train_entities = {e for h, _, t in named["train"] for e in (h, t)}
    unseen = {e for s in ("valid", "test") for h, _, t in named[s] for e in (h, t)} - train_entities
    report["unseen_entities"] = len(unseen)
    if unseen:
        log.warning("%d entities in valid/test never appear in train", len(unseen))
    return from_named_splits(named, report, entities, relations)


def load_dataset(directory):
    """Load ``{train,valid,test}.txt``; exported dictionaries, if present, fix the ids."""
    dicts = []
    for fname in ("entities.dict", "relations.dict"):
        path = os.path.join(directory, fname)
        dicts.append(read_dict(path) if os.path.exists(path) else None)
    return load_triples(*(os.path.join(directory, f"{s}.txt") for s in SPLITS), *dicts)


def save_dataset(store, directory):
    os.makedirs(directory, exist_ok=True)
    for name in SPLITS:
        with open(os.path.join(directory, f"{name}.txt"), "w", encoding="utf-8") as fh:
            for h, r, t in store.decode(name):
                fh.write(f"{h}\t{r}\t{t}\n")
    for fname, names in (("entities.dict", store.entities), ("relations.dict", store.relations)):
        with open(os.path.join(directory, fname), "w", encoding="utf-8") as fh:
            for i, n in enumerate(names):
                fh.write(f"{i}\t{n}\n")


# ---------------------------------------------------------------- synthetic graphs

def _unrank_pairs(idx, n):
    """Map ranks in [0, n(n-1)/2) to pairs (i < j) in row-major upper-triangle order."""
    idx = np.asarray(idx, dtype=np.int64)
    total = n * (n - 1) // 2
    rev = total - 1 - idx
    # rev indexes the triangle from the bottom: row from the back is the
    # largest m with m(m+1)/2 <= rev
    m = np.floor((np.sqrt(8.0 * rev + 1.0) - 1.0) / 2.0).astype(np.int64)
    m += (m + 1) * (m + 2) // 2 <= rev
    m -= m * (m + 1) // 2 > rev
    i = n - 2 - m
    row_start = i * (2 * n - i - 1) // 2
    j = idx - row_start + i + 1
    return i, j


def generate_er_graph(n, avg_degree, num_relations=1, seed=0):
    """Erdős–Rényi G(n, m) graph with m = round(n·avg_degree/2) edges.

    Each undirected edge is emitted once, in a random direction, with a
    uniform relation id; triples are split 90/5/5.
    """
    if n < 2:
        raise InvalidConfig("n must be >= 2")
    if not 0 < avg_degree < n:
        raise InvalidConfig("avg_degree must lie in (0, n)")
    if num_relations < 1:
        raise InvalidConfig("num_relations must be >= 1")
    rng = np.random.default_rng(seed)
    total = n * (n - 1) // 2
    m = min(int(round(n * avg_degree / 2.0)), total)
    ranks = np.sort(rng.choice(total, size=m, replace=False))
    i, j = _unrank_pairs(ranks, n)
    flip = rng.random(m) < 0.5
    heads = np.where(flip, j, i)
    tails = np.where(flip, i, j)
    rels = rng.integers(0, num_relations, size=m)
    order = rng.permutation(m)
    triples = np.stack([heads, rels, tails], axis=1)[order]
    n_valid = int(round(0.05 * m))
    n_test = int(round(0.05 * m))
    n_train = m - n_valid - n_test
    splits = {"train": (0, n_train), "valid": (n_train, n_train + n_valid),
              "test": (n_train + n_valid, m)}
    return TripleStore(triples, [f"e{k}" for k in range(n)],
                       [f"r{k}" for k in range(num_relations)], splits,
                       {"generator": "erdos-renyi", "n": n, "avg_degree": avg_degree, "seed": seed})


def add_inverse_relation(store, relation, name=None):
    """Copy of ``store`` with a new relation holding every ``relation`` triple reversed.

    The reversed triple lands in the same split as its source.
    """
    rel = store.relation_dict[relation] if isinstance(relation, str) else int(relation)
    name = name or f"{store.relations[rel]}_inv"
    new_id = store.num_relations
    rows, splits = [], {}
    for s in SPLITS:
        part = store.split(s)
        inv = part[part[:, 1] == rel][:, [2, 1, 0]].copy()
        inv[:, 1] = new_id
        start = len(rows)
        rows.extend(part.tolist())
        rows.extend(inv.tolist())
        splits[s] = (start, len(rows))
    return TripleStore(np.array(rows, dtype=np.int64), list(store.entities),
                       list(store.relations) + [name], splits, dict(store.report))


# ---------------------------------------------------------------- relation categories

def relation_category_stats(store, split="train"):
    """Per-relation tails-per-head / heads-per-tail and category fractions."""
    triples = store.split(split)
    if len(triples) == 0:
        raise EmptySplit(f"{split} split is empty")
    per_relation = {}
    weights = dict.fromkeys(CATEGORIES, 0)
    for r in np.unique(triples[:, 1]):
        part = np.unique(triples[triples[:, 1] == r], axis=0)
        _, tails_per_head = np.unique(part[:, 0], return_counts=True)
        _, heads_per_tail = np.unique(part[:, 2], return_counts=True)
        tph = float(tails_per_head.mean())
        hpt = float(heads_per_tail.mean())
        cat = category_of(tph, hpt)
        per_relation[store.relations[r]] = {"tph": tph, "hpt": hpt, "category": cat, "count": len(part)}
        weights[cat] += len(part)
    total = sum(weights.values())
    fractions = {c: weights[c] / total for c in CATEGORIES}
    return {"per_relation": per_relation, "fractions": fractions}


def category_of(tph, hpt):
    many_tails = tph >= CATEGORY_THRESHOLD
    many_heads = hpt >= CATEGORY_THRESHOLD
    if many_tails and many_heads:
        return "N-N"
    if many_tails:
        return "1-N"
    if many_heads:
        return "N-1"
    return "1-1"


# ---------------------------------------------------------------- attributes

@dataclass
class AttributeTable:
    width: int
    entries: dict
    report: dict = field(default_factory=dict)

    def vector(self, entity, kind):
        """Mean of the entity's aggregated vectors of one kind, or None."""
        vecs = [v for k, v in self.entries.get(entity, []) if k == kind]
        if not vecs:
            return None
        return np.mean(vecs, axis=0)

    def to_arrays(self, entity_names, heads):
        """(E, heads, width) vectors, head h drawing on attribute kind h, and a has-attributes mask."""
        if heads > len(KINDS):
            raise ShapeMismatch(f"{heads} heads but only {len(KINDS)} attribute kinds")
        vectors = np.zeros((len(entity_names), heads, self.width))
        mask = np.zeros(len(entity_names), dtype=bool)
        for e, name in enumerate(entity_names):
            if name not in self.entries:
                continue
            mask[e] = True
            for h in range(heads):
                v = self.vector(name, KINDS[h])
                if v is not None:
                    vectors[e, h] = v
        return vectors, mask


def load_token_vectors(path, width):
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) - 1 != width:
                raise WidthMismatch(f"{path}:{lineno}: expected {width} values, got {len(parts) - 1}")
            try:
                vectors[parts[0].lower()] = np.array([float(x) for x in parts[1:]])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
    return vectors


def aggregate_text(text, vectors, width):
    """CBOW aggregate: mean of the vectors of known lowercase tokens (None if all OOV)."""
    found = [vectors[tok] for tok in text.lower().split() if tok in vectors]
    if not found:
        return None
    return np.mean(found, axis=0)


def load_attributes(path, vectors_path, width):
    vectors = load_token_vectors(vectors_path, width)
    entries = {}
    oov = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, "expected entity<TAB>kind<TAB>text")
            entity, kind, text = (p.strip() for p in parts)
            if kind not in KINDS:
                raise ParseError(path, lineno, f"unknown attribute kind {kind!r}")
            vec = aggregate_text(text, vectors, width)
            if vec is None:
                oov += 1
                vec = np.zeros(width)
            entries.setdefault(entity, []).append((kind, vec))
    return AttributeTable(width, entries, {"oov_count": oov, "entities": len(entries)})


def attribute_phases(table, entity_names, k, heads, projection, bias=None):
    """Initial phases 2π·sigmoid(projection[d, h] · vector(e, h) + bias[d, h]).

    Returns ``(phases, mask)``; entities without attributes get NaN phases
    and ``mask`` False, signalling that free phases apply.
    """
    projection = np.asarray(projection, dtype=np.float64)
    if projection.shape != (k, heads, table.width):
        raise ShapeMismatch(f"projection shape {projection.shape} != {(k, heads, table.width)}")
    bias = np.zeros((k, heads)) if bias is None else np.asarray(bias, dtype=np.float64)
    vectors, mask = table.to_arrays(entity_names, heads)
    z = np.einsum("dhw,ehw->edh", projection, vectors) + bias
    phases = 2.0 * np.pi * (0.5 * (1.0 + np.tanh(0.5 * z)))
    phases = np.minimum(phases, np.nextafter(2.0 * np.pi, 0.0))
    phases[~mask] = np.nan
    return phases, mask
