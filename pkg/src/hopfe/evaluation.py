"""Filtered link-prediction ranking and relation-angle analysis."""

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import model as mdl
from . import quat, transport
from .data import CATEGORIES, category_of
from .errors import EmptySplit, UnknownEntity, UnknownRelation

HITS = (1, 3, 10)
# queries per worker task; results never depend on the thread count
QUERY_CHUNK = 64
# cap on query × candidate × head-pair cells held in memory at once
CELL_BUDGET = 2_000_000


@dataclass
class EvalReport:
    mr: float
    mrr: float
    hits1: float
    hits3: float
    hits10: float
    query_count: int
    per_relation: dict = field(default_factory=dict)
    per_category: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def metrics(ranks):
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise EmptySplit("no queries to summarize")
    out = {"mr": float(ranks.mean()), "mrr": float(np.mean(1.0 / ranks))}
    for n in HITS:
        out[f"hits{n}"] = float(np.mean(ranks <= n))
    out["query_count"] = int(ranks.size)
    return out


def report_from_ranks(ranks, per_relation=None, per_category=None):
    return EvalReport(**metrics(ranks), per_relation=per_relation or {},
                      per_category=per_category or {})


def rank_from_scores(scores, answer, filtered=()):
    """Average-of-ties rank of ``answer`` among ``scores`` (lower is better).

    Candidates listed in ``filtered`` are ignored unless they are the answer.
    """
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(scores.shape[-1], dtype=bool)
    keep[np.asarray(filtered, dtype=np.int64)] = False
    keep[answer] = False
    target = scores[answer]
    better = np.count_nonzero(keep & (scores < target))
    ties = np.count_nonzero(keep & (scores == target))
    return 1.0 + better + 0.5 * ties


# ---------------------------------------------------------------- candidate scoring

def _pair_dists(X, Y):
    """Distances between every row of X (Q, H, c) and Y (E, H, c) -> (Q, H, E, H)."""
    Q, H, c = X.shape
    E = Y.shape[0]
    xs = X.reshape(Q * H, c)
    ys = Y.reshape(E * H, c)
    d2 = (np.sum(xs * xs, axis=1)[:, None] + np.sum(ys * ys, axis=1)[None, :]
          - 2.0 * xs @ ys.T)
    return np.sqrt(np.maximum(d2, 0.0)).reshape(Q, H, E, H)


class _RelationTables:
    """Per-relation lifted entity tables shared by all queries of that relation."""

    def __init__(self, params):
        self.params = params
        self.plain = mdl.lifted_entities(params)
        self._cache = {}

    def get(self, r):
        if r not in self._cache:
            self._cache[r] = (mdl.lifted_entities(self.params, r),
                              mdl.lifted_entities(self.params, r, inverse=True))
        return self._cache[r]


def _reduce(D, cfg):
    if D.shape[-1] == 1:
        return D[..., 0, 0]
    if cfg.matching == "min":
        return D.min(axis=(-2, -1))
    plan, _, _, _ = transport.sinkhorn_retry(D, cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    return np.sum(plan * D, axis=(-2, -1))


def _score_candidates(tables, r, anchors, side):
    """Scores (Q, E) of every candidate for queries sharing relation ``r``."""
    params = tables.params
    cfg = params.cfg
    fwd, bwd = tables.get(r)
    plain = tables.plain
    k = params.cfg.dim
    E = params.num_entities
    Q = len(anchors)
    if cfg.variant == "no-hopf":
        out = np.zeros((Q, E))
        for d in range(k):
            if side == "tail":
                X, Y = fwd[anchors, d][:, None, :], plain[:, d][:, None, :]
            else:
                X, Y = plain[anchors, d][:, None, :], fwd[:, d][:, None, :]
            out += _pair_dists(X, Y)[:, 0, :, 0]
        return out
    H = cfg.heads
    D = np.zeros((Q, E, H, H))
    for d in range(k):
        if side == "tail":
            # D[q, c, i, j]: i indexes the anchor (head) heads, j the candidate's
            t1 = _pair_dists(fwd[anchors, d], plain[:, d])
            t2 = _pair_dists(plain[anchors, d], bwd[:, d])
            D += np.transpose(t1 + t2, (0, 2, 1, 3))
        else:
            # anchor is the tail: its heads are j, the candidate's are i
            t1 = _pair_dists(plain[anchors, d], fwd[:, d])
            t2 = _pair_dists(bwd[anchors, d], plain[:, d])
            D += np.transpose(t1 + t2, (0, 2, 3, 1))
    return _reduce(0.5 * D, cfg)


def candidate_scores(params, triples, side, tables=None):
    """Scores of all entities as the missing ``side`` ('head' or 'tail') of each triple."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if side not in ("head", "tail"):
        raise ValueError("side must be 'head' or 'tail'")
    tables = tables or _RelationTables(params)
    E = params.num_entities
    H = params.cfg.heads
    out = np.empty((len(triples), E))
    step = max(1, CELL_BUDGET // max(1, E * H * H))
    anchor_col = 0 if side == "tail" else 2
    for r in np.unique(triples[:, 1]):
        rows = np.flatnonzero(triples[:, 1] == r)
        for s in range(0, len(rows), step):
            sel = rows[s:s + step]
            out[sel] = _score_candidates(tables, int(r), triples[sel, anchor_col], side)
    return out


def _check_ids(params, triples):
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    bad_e = (triples[:, [0, 2]] < 0) | (triples[:, [0, 2]] >= params.num_entities)
    if bad_e.any():
        raise UnknownEntity(f"entity id out of range [0, {params.num_entities})")
    if np.any((triples[:, 1] < 0) | (triples[:, 1] >= params.num_relations)):
        raise UnknownRelation(f"relation id out of range [0, {params.num_relations})")
    return triples


def rank_query(triple, side, params, store, filter_index=None, tables=None):
    """Filtered rank of the ``side`` entity of ``triple`` among all entities."""
    triple = _check_ids(params, triple)[0]
    fi = filter_index if filter_index is not None else store.filter_index
    s = candidate_scores(params, triple[None, :], side, tables)[0]
    h, r, t = triple.tolist()
    if side == "tail":
        return rank_from_scores(s, t, fi.tails(h, r))
    return rank_from_scores(s, h, fi.heads(r, t))


def _rank_chunk(params, triples, fi, tables):
    ranks = np.empty((len(triples), 2))
    for col, side in enumerate(("head", "tail")):
        s = candidate_scores(params, triples, side, tables)
        for q, (h, r, t) in enumerate(triples.tolist()):
            if side == "tail":
                ranks[q, col] = rank_from_scores(s[q], t, fi.tails(h, r))
            else:
                ranks[q, col] = rank_from_scores(s[q], h, fi.heads(r, t))
    return ranks


def rank_triples(params, triples, filter_index, threads=1):
    """(N, 2) head- and tail-prediction ranks."""
    triples = _check_ids(params, triples)
    tables = _RelationTables(params)
    # fill the per-relation cache up front so workers only read it
    for r in np.unique(triples[:, 1]):
        tables.get(int(r))
    chunks = [triples[i:i + QUERY_CHUNK] for i in range(0, len(triples), QUERY_CHUNK)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(lambda c: _rank_chunk(params, c, filter_index, tables), chunks))
    else:
        parts = [_rank_chunk(params, c, filter_index, tables) for c in chunks]
    if not parts:
        return np.empty((0, 2))
    return np.concatenate(parts, axis=0)


def relation_categories(store):
    """Category per relation id from train statistics (all splits if absent from train)."""
    cats = {}
    for source in (store.split("train"), store.triples):
        for r in np.unique(source[:, 1]).tolist():
            if r in cats:
                continue
            part = np.unique(source[source[:, 1] == r], axis=0)
            tph = np.unique(part[:, 0], return_counts=True)[1].mean()
            hpt = np.unique(part[:, 2], return_counts=True)[1].mean()
            cats[r] = category_of(tph, hpt)
    return cats


def evaluate_split(split, params, store, threads=1, max_triples=None, seed=0):
    """Filtered MR / MRR / Hits over head and tail queries of a split.

    ``max_triples`` evaluates a seeded random subset instead of the whole split.
    """
    triples = store.split(split)
    if len(triples) == 0:
        raise EmptySplit(f"{split} split is empty")
    if max_triples is not None and len(triples) > max_triples:
        idx = np.sort(np.random.default_rng(seed).choice(len(triples), max_triples, replace=False))
        triples = triples[idx]
    ranks = rank_triples(params, triples, store.filter_index, threads)
    per_relation = {}
    per_category = {}
    cats = relation_categories(store)
    rel = triples[:, 1]
    for r in np.unique(rel).tolist():
        per_relation[store.relations[r]] = metrics(ranks[rel == r].reshape(-1))
    cat_of_row = np.array([cats[r] for r in rel.tolist()])
    for c in CATEGORIES:
        sel = cat_of_row == c
        if sel.any():
            per_category[c] = metrics(ranks[sel].reshape(-1))
    return report_from_ranks(ranks.reshape(-1), per_relation, per_category)


# ---------------------------------------------------------------- angle analysis

@dataclass
class Histogram:
    relation_set: str
    dim_agg: str
    edges: np.ndarray
    counts: np.ndarray

    @property
    def mass(self):
        total = self.counts.sum()
        return self.counts / total if total else self.counts.astype(float)


def _relation_id(store_or_names, r):
    if isinstance(r, (int, np.integer)):
        return int(r)
    names = store_or_names if store_or_names is not None else []
    try:
        return list(names).index(r)
    except ValueError:
        raise UnknownRelation(f"unknown relation {r!r}") from None


def inverse_angle_sums(params, r1, r2):
    q = params.relation_quats
    return quat.wrap_angle(quat.signed_angle(q[r1]) + quat.signed_angle(q[r2]))


def composition_angle_diffs(params, r1, r2, r3):
    q = params.relation_quats
    prod = quat.hamilton(q[r1], q[r2])
    return quat.wrap_angle(quat.signed_angle(prod) - quat.signed_angle(q[r3]))


def _histograms(name, values, edges):
    values = np.asarray(values, dtype=np.float64)
    out = [Histogram(name, "pooled", edges, np.histogram(values, edges)[0])]
    for d, v in enumerate(values):
        out.append(Histogram(name, f"dim{d}", edges, np.histogram([v], edges)[0]))
    return out


def angle_histograms(params, inverse_pairs=(), compositions=(), bins=64, relation_names=None,
                     per_dimension=True):
    """Angle-sum, angle-difference and norm histograms for relation sets.

    Relations may be ids or names (resolved through ``relation_names``).
    Every set yields a histogram pooled over dimensions and, with
    ``per_dimension``, one histogram per dimension.
    """
    R = params.num_relations

    def rid(r):
        i = _relation_id(relation_names, r)
        if not 0 <= i < R:
            raise UnknownRelation(f"relation id {i} out of range [0, {R})")
        return i

    def label(rs):
        return ",".join(str(relation_names[i]) if relation_names is not None else str(i) for i in rs)

    angle_edges = np.linspace(-np.pi, np.pi, bins + 1)
    norms = np.linalg.norm(params.relation_quats, axis=-1)
    norm_edges = np.linspace(0.0, 1.05 * float(norms.max()) if norms.size else 1.0, bins + 1)
    tables = []

    def emit(name, values, edges):
        hs = _histograms(name, values, edges)
        tables.extend(hs if per_dimension else hs[:1])

    seen = set()
    for pair in inverse_pairs:
        r1, r2 = (rid(r) for r in pair)
        emit(f"inverse:{label((r1, r2))}", inverse_angle_sums(params, r1, r2), angle_edges)
        prod_edges = np.linspace(0.0, 1.05 * float((norms[r1] * norms[r2]).max()), bins + 1)
        emit(f"norm_product:{label((r1, r2))}", norms[r1] * norms[r2], prod_edges)
        seen.update((r1, r2))
    for trip in compositions:
        r1, r2, r3 = (rid(r) for r in trip)
        emit(f"composition:{label((r1, r2, r3))}", composition_angle_diffs(params, r1, r2, r3),
             angle_edges)
        seen.update((r1, r2, r3))
    for r in sorted(seen):
        emit(f"norm:{label((r,))}", norms[r], norm_edges)
    return tables


def write_histograms_csv(path, tables):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["relation_set", "dim_agg", "bin_left", "bin_right", "count"])
        for h in tables:
            for left, right, c in zip(h.edges[:-1], h.edges[1:], h.counts):
                writer.writerow([h.relation_set, h.dim_agg, f"{left:.10g}", f"{right:.10g}", int(c)])
