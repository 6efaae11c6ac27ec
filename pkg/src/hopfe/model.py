"""Parameter tables and the fibred rotation score.

Per embedding dimension an entity is a 3-vector plus ``H`` phases, and a
relation is a quaternion plus a phase offset.  Scoring a triple rotates the
head point, lifts both points to their Hopf fibers at the attribute phases
and sums per-dimension 4D distances; the reverse direction uses the
conjugate rotation and the negated offset.  The ``no-hopf`` variant keeps
only the 3D rotation distance.

Everything here works on stacks of triples; :func:`score_batch` returns a
tape from which :func:`backward` produces exact gradients.
"""

import io
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import hopf, quat, transport
from .errors import InvalidConfig, ShapeMismatch

TWO_PI = 2.0 * np.pi
VARIANTS = ("hopfe", "no-hopf")
MATCHINGS = ("sinkhorn", "min")
MAGIC = b"HOPFE1\n"
NORM_TOL = 1e-12


@dataclass
class ModelConfig:
    dim: int = 100
    heads: int = 1
    variant: str = "hopfe"
    matching: str = "min"
    gamma: float = 12.0
    alpha: float = 1.0
    epsilon: float = transport.DEFAULT_EPSILON
    sinkhorn_iters: int = transport.DEFAULT_MAX_ITERS
    sinkhorn_tol: float = transport.DEFAULT_TOL

    def validate(self):
        if self.dim < 1:
            raise InvalidConfig("dim must be >= 1")
        if self.heads < 1:
            raise InvalidConfig("heads must be >= 1")
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"variant must be one of {VARIANTS}")
        if self.matching not in MATCHINGS:
            raise InvalidConfig(f"matching must be one of {MATCHINGS}")
        if self.variant == "no-hopf" and self.heads != 1:
            raise InvalidConfig("heads > 1 requires the hopfe variant")
        if not self.gamma > 0:
            raise InvalidConfig("gamma must be > 0")
        if not self.alpha > 0:
            raise InvalidConfig("alpha must be > 0")
        if not self.epsilon > 0:
            raise InvalidConfig("epsilon must be > 0")
        return self


@dataclass
class EntityEmbedding:
    points: np.ndarray  # (k, 3)
    phases: np.ndarray  # (k, H)


@dataclass
class RelationEmbedding:
    quats: np.ndarray  # (k, 4)
    offsets: np.ndarray  # (k,)

    def inverse(self):
        return RelationEmbedding(quat.conjugate(self.quats), -self.offsets)


@dataclass
class Semantics:
    """Attribute-driven phases: 2π·sigmoid(proj[d, h] · vec[e, h] + bias[d, h]).

    Entities whose ``mask`` is False keep their free phases.
    """
    vectors: np.ndarray  # (E, H, W), constant
    mask: np.ndarray  # (E,)
    proj: np.ndarray  # (k, H, W), trainable
    bias: np.ndarray  # (k, H), trainable


@dataclass
class ModelParams:
    cfg: ModelConfig
    entity_points: np.ndarray
    entity_phases: np.ndarray
    relation_quats: np.ndarray
    relation_phases: np.ndarray
    semantics: Semantics = None

    @property
    def num_entities(self):
        return self.entity_points.shape[0]

    @property
    def num_relations(self):
        return self.relation_quats.shape[0]

    def tables(self):
        """Trainable arrays by name (views, not copies)."""
        out = {
            "entity_points": self.entity_points,
            "entity_phases": self.entity_phases,
            "relation_quats": self.relation_quats,
            "relation_phases": self.relation_phases,
        }
        if self.semantics is not None:
            out["sem_proj"] = self.semantics.proj
            out["sem_bias"] = self.semantics.bias
        return out

    def copy(self):
        sem = None
        if self.semantics is not None:
            s = self.semantics
            sem = Semantics(s.vectors, s.mask, s.proj.copy(), s.bias.copy())
        return ModelParams(ModelConfig(**asdict(self.cfg)), self.entity_points.copy(),
                           self.entity_phases.copy(), self.relation_quats.copy(),
                           self.relation_phases.copy(), sem)

    def phases_of(self, idx):
        idx = np.asarray(idx)
        free = self.entity_phases[idx]
        if self.semantics is None:
            return free
        s = self.semantics
        sig = _sigmoid(np.einsum("dhw,...hw->...dh", s.proj, s.vectors[idx]) + s.bias)
        return np.where(s.mask[idx][..., None, None], TWO_PI * sig, free)

    def entity(self, e):
        return EntityEmbedding(self.entity_points[e].copy(), np.mod(self.phases_of(e), TWO_PI))

    def relation(self, r):
        return RelationEmbedding(self.relation_quats[r].copy(), np.mod(self.relation_phases[r], TWO_PI))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_model(num_entities, num_relations, cfg, seed=0):
    """He-style Gaussian init: variance 2/fan_in with fan_in = 3k for points, 4k for quaternions."""
    cfg.validate()
    if num_entities < 1 or num_relations < 1:
        raise InvalidConfig("need at least one entity and one relation")
    rng = np.random.default_rng(seed)
    k, H = cfg.dim, cfg.heads
    points = rng.normal(0.0, np.sqrt(2.0 / (3 * k)), size=(num_entities, k, 3))
    quats = rng.normal(0.0, np.sqrt(2.0 / (4 * k)), size=(num_relations, k, 4))
    phases = rng.uniform(0.0, TWO_PI, size=(num_entities, k, H))
    offsets = rng.uniform(0.0, TWO_PI, size=(num_relations, k))
    return ModelParams(cfg, points, phases, quats, offsets)


def attach_semantics(params, vectors, mask, seed=0):
    """Add attribute-driven phases; ``vectors`` is (E, H, W) from the attribute table."""
    vectors = np.asarray(vectors, dtype=np.float64)
    E, k, H = params.entity_phases.shape
    if vectors.shape[:2] != (E, H):
        raise ShapeMismatch(f"attribute vectors {vectors.shape[:2]} do not match (entities, heads) = {(E, H)}")
    W = vectors.shape[2]
    rng = np.random.default_rng(seed)
    proj = rng.normal(0.0, np.sqrt(2.0 / W), size=(k, H, W))
    params.semantics = Semantics(vectors, np.asarray(mask, dtype=bool), proj, np.zeros((k, H)))
    return params


# ---------------------------------------------------------------- primitives

def _normalize(y):
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    small = n < NORM_TOL
    p = np.where(small, np.array([1.0, 0.0, 0.0]), y / np.where(small, 1.0, n))
    return p, n, small


def _normalize_vjp(p, n, small, g):
    gy = (g - np.sum(g * p, axis=-1, keepdims=True) * p) / np.where(small, 1.0, n)
    return np.where(small, 0.0, gy)


def _rotate_vjp(q, x, y, g):
    """Gradients of y = q x q̄ / |q|² w.r.t. q and x."""
    a = q[..., :1]
    u = q[..., 1:]
    n2 = np.sum(q * q, axis=-1, keepdims=True)
    gx = quat.rotate_unchecked(quat.conjugate(q), g, n2[..., 0])
    gy_y = np.sum(g * y, axis=-1, keepdims=True)
    gx_dot = np.sum(g * x, axis=-1, keepdims=True)
    gu_dot = np.sum(g * u, axis=-1, keepdims=True)
    ux = np.sum(u * x, axis=-1, keepdims=True)
    ga = (np.sum(g * (2.0 * a * x + 2.0 * np.cross(u, x)), axis=-1, keepdims=True) - 2.0 * a * gy_y) / n2
    gu = (-2.0 * gx_dot * u + 2.0 * gu_dot * x + 2.0 * ux * g + 2.0 * a * np.cross(x, g) - 2.0 * gy_y * u) / n2
    return np.concatenate([ga, gu], axis=-1), gx


class _Lift:
    """Rotate (optionally), normalize, lift to the fiber base, spread over phases."""

    def __init__(self, x, phases, q=None):
        self.x = x
        self.q = q
        self.y = x if q is None else quat.rotate_unchecked(q, x)
        self.p, self.n, self.small = _normalize(self.y)
        self.r = hopf.lift(self.p)
        self.phases = phases
        self.z = hopf.phase_factor(phases)
        self.e = quat.hamilton(self.r[..., None, :], self.z)


def _norm_vjp(diff, n, g):
    safe = np.where(n > 0, n, 1.0)
    return np.where((n > 0)[..., None], diff * (g / safe)[..., None], 0.0)


# ---------------------------------------------------------------- batched score
#
# For fiber points e = r' ⊗ e^{it} the 4D inner product factors as
#     e1 · e2 = Re((r2' conj ⊗ r1') e^{i(t1 - t2)}),
# so a head-pair grid needs two scalars per (triple, dim) and a complex
# outer product of phase factors.  Lifts are computed once per distinct
# (entity, relation) pair of the batch.

@dataclass
class Tape:
    cfg: ModelConfig
    h: np.ndarray
    r: np.ndarray
    t: np.ndarray
    scores: np.ndarray
    cache: dict = field(default_factory=dict)


def _scatter_add(target, idx, rows):
    """target[idx] += rows with repeated indices (sorted segment sums)."""
    idx = np.asarray(idx).reshape(-1)
    if idx.size == 0:
        return target
    rows = rows.reshape((idx.size,) + target.shape[1:])
    order = np.argsort(idx, kind="stable")
    sidx = idx[order]
    starts = np.flatnonzero(np.r_[True, sidx[1:] != sidx[:-1]])
    target[sidx[starts]] += np.add.reduceat(rows[order], starts, axis=0)
    return target


class _UniqueLift:
    """Fiber bases of (optionally rotated) entity points, one per distinct key."""

    def __init__(self, params, ent, rel=None, conj=False, lift=True):
        R = params.num_relations
        keys = ent if rel is None else ent * R + rel
        uk, self.inv = np.unique(keys, return_inverse=True)
        self.ent = uk if rel is None else uk // R
        self.rel = None if rel is None else uk % R
        self.conj = conj
        self.x = params.entity_points[self.ent]
        if rel is None:
            self.q = None
            self.y = self.x
        else:
            q = params.relation_quats[self.rel]
            self.q = quat.conjugate(q) if conj else q
            self.y = quat.rotate_unchecked(self.q, self.x)
        if lift:
            self.p, self.n, self.small = _normalize(self.y)
            self.r = hopf.lift(self.p)

    def scatter(self, g_rows):
        g = np.zeros((len(self.ent),) + g_rows.shape[1:])
        _scatter_add(g, self.inv, g_rows)
        return g

    def backward_y(self, gy, grads):
        if self.q is None:
            _scatter_add(grads["entity_points"], self.ent, gy)
            return
        gq, gx = _rotate_vjp(self.q, self.x, self.y, gy)
        _scatter_add(grads["entity_points"], self.ent, gx)
        _scatter_add(grads["relation_quats"], self.rel, quat.conjugate(gq) if self.conj else gq)

    def backward(self, gr, grads):
        gp = hopf.lift_vjp(self.p, gr)
        self.backward_y(_normalize_vjp(self.p, self.n, self.small, gp), grads)


def _w(ra, rb):
    """Scalar and i parts of conj(rb) ⊗ ra."""
    wa = np.sum(ra * rb, axis=-1)
    wb = (rb[..., 0] * ra[..., 1] - rb[..., 1] * ra[..., 0]
          - rb[..., 2] * ra[..., 3] + rb[..., 3] * ra[..., 2])
    return wa, wb


def _w_vjp(ra, rb, gwa, gwb):
    gra = gwa[..., None] * rb
    grb = gwa[..., None] * ra
    gra[..., 0] -= gwb * rb[..., 1]
    gra[..., 1] += gwb * rb[..., 0]
    gra[..., 2] += gwb * rb[..., 3]
    gra[..., 3] -= gwb * rb[..., 2]
    grb[..., 0] += gwb * ra[..., 1]
    grb[..., 1] -= gwb * ra[..., 0]
    grb[..., 2] -= gwb * ra[..., 3]
    grb[..., 3] += gwb * ra[..., 2]
    return gra, grb


def _gather(params, h, r, t):
    return (params.entity_points[h], params.entity_points[t], params.relation_quats[r],
            params.relation_phases[r], params.phases_of(h), params.phases_of(t))


def pair_costs(xh, xt, q, off, ph, pt):
    """Head-pair cost matrices D(i, j) from explicit fiber points (reference path)."""
    conj_q = quat.conjugate(q)
    A1 = _Lift(xh, ph + off[..., None], q)
    B1 = _Lift(xt, pt)
    A2 = _Lift(xt, pt - off[..., None], conj_q)
    B2 = _Lift(xh, ph)
    # axes: (..., k, i, j, 4)
    n1 = np.linalg.norm(A1.e[..., :, None, :] - B1.e[..., None, :, :], axis=-1)
    n2 = np.linalg.norm(A2.e[..., None, :, :] - B2.e[..., :, None, :], axis=-1)
    return 0.5 * (n1.sum(axis=-3) + n2.sum(axis=-3)), (A1, B1, A2, B2)


def reduce_costs(D, cfg):
    """Collapse (..., H, H) head-pair costs to a score and its cost weights."""
    H = D.shape[-1]
    if H == 1:
        return D[..., 0, 0], np.ones_like(D), None
    if cfg.matching == "min":
        idx, val = transport.min_match_batch(D)
        w = np.zeros(D.shape[:-2] + (H * H,))
        np.put_along_axis(w, idx[..., None], 1.0, axis=-1)
        return val, w.reshape(D.shape), None
    plan, _, _, eps = transport.sinkhorn_retry(D, cfg.epsilon, cfg.sinkhorn_iters, cfg.sinkhorn_tol)
    return np.sum(plan * D, axis=(-2, -1)), plan, (plan, eps)


def score_batch(params, h, r, t):
    """Scores (distances, lower is more plausible) for index arrays h, r, t."""
    cfg = params.cfg
    h, r, t = np.broadcast_arrays(np.asarray(h), np.asarray(r), np.asarray(t))
    shape = h.shape
    h, r, t = h.reshape(-1), r.reshape(-1), t.reshape(-1)
    M = len(h)
    if cfg.variant == "no-hopf":
        A = _UniqueLift(params, h, r, lift=False)
        diff = A.y[A.inv] - params.entity_points[t]
        n = np.linalg.norm(diff, axis=-1)
        tape = Tape(cfg, h, r, t, n.sum(axis=-1).reshape(shape))
        tape.cache.update(A=A, diff=diff, n=n)
        return tape
    A1 = _UniqueLift(params, h, r)
    A2 = _UniqueLift(params, t, r, conj=True)
    B = _UniqueLift(params, np.concatenate([h, t]))
    rA1, rB1 = A1.r[A1.inv], B.r[B.inv[M:]]
    rA2, rB2 = A2.r[A2.inv], B.r[B.inv[:M]]
    wa1, wb1 = _w(rA1, rB1)
    wa2, wb2 = _w(rA2, rB2)
    ph = params.phases_of(h)
    pt = params.phases_of(t)
    off = params.relation_phases[r]
    Z = np.exp(1j * (ph + off[..., None]))[..., :, None] * np.exp(-1j * pt)[..., None, :]
    X1 = (wa1 + 1j * wb1)[..., None, None] * Z
    X2 = (wa2 - 1j * wb2)[..., None, None] * Z
    f1 = np.sqrt(np.maximum(2.0 - 2.0 * X1.real, 0.0))
    f2 = np.sqrt(np.maximum(2.0 - 2.0 * X2.real, 0.0))
    D = 0.5 * (f1.sum(axis=-3) + f2.sum(axis=-3))
    s, weights, plan = reduce_costs(D, cfg)
    tape = Tape(cfg, h, r, t, s.reshape(shape))
    tape.cache.update(D=D, weights=weights, plan=plan, A1=A1, A2=A2, B=B,
                      rows=(rA1, rB1, rA2, rB2), Z=Z, X1=X1, X2=X2, f1=f1, f2=f2)
    return tape


def scores(params, h, r, t):
    return score_batch(params, h, r, t).scores


def _dist_grad(f, g):
    # d sqrt(2 - 2x)/dx = -1/f; zero where the distance vanishes
    return np.where(f > 0, -g / np.where(f > 0, f, 1.0), 0.0)


def backward(params, tape, gscore, grads=None):
    """Accumulate d(Σ gscore·score)/d(parameters) into ``grads`` (dict of arrays)."""
    if grads is None:
        grads = zero_grads(params)
    cfg = tape.cfg
    gscore = np.asarray(gscore, dtype=np.float64).reshape(-1)
    h, r, t = tape.h, tape.r, tape.t
    c = tape.cache
    if cfg.variant == "no-hopf":
        gdiff = _norm_vjp(c["diff"], c["n"], np.broadcast_to(gscore[:, None], c["n"].shape))
        A = c["A"]
        A.backward_y(A.scatter(gdiff), grads)
        _scatter_add(grads["entity_points"], t, -gdiff)
        return grads
    D = c["D"]
    if c["plan"] is not None:
        plan, eps = c["plan"]
        gD = transport.transport_cost_grad(D, plan, eps)
    else:
        gD = c["weights"]
    gf = 0.5 * (gD * gscore[:, None, None])[:, None, :, :]
    g1 = _dist_grad(c["f1"], gf)
    g2 = _dist_grad(c["f2"], gf)
    Z, X1, X2 = c["Z"], c["X1"], c["X2"]
    gwa1 = np.sum(g1 * Z.real, axis=(-2, -1))
    gwb1 = -np.sum(g1 * Z.imag, axis=(-2, -1))
    gwa2 = np.sum(g2 * Z.real, axis=(-2, -1))
    gwb2 = np.sum(g2 * Z.imag, axis=(-2, -1))
    # dot = Re(W e^{i(a_i - b_j)}): d/da_i = -Im, d/db_j = +Im
    G = g1 * X1.imag + g2 * X2.imag
    ga = -G.sum(axis=-1)
    gb = G.sum(axis=-2)
    _scatter_add(grads["relation_phases"], r, ga.sum(axis=-1))
    _phase_backward(params, h, ga, grads)
    _phase_backward(params, t, gb, grads)

    rA1, rB1, rA2, rB2 = c["rows"]
    gA1, gB1 = _w_vjp(rA1, rB1, gwa1, gwb1)
    gA2, gB2 = _w_vjp(rA2, rB2, gwa2, gwb2)
    A1, A2, B = c["A1"], c["A2"], c["B"]
    A1.backward(A1.scatter(gA1), grads)
    A2.backward(A2.scatter(gA2), grads)
    B.backward(B.scatter(np.concatenate([gB2, gB1])), grads)
    return grads


def _phase_backward(params, idx, g, grads):
    s = params.semantics
    if s is None:
        _scatter_add(grads["entity_phases"], idx, g)
        return
    m = s.mask[idx]
    _scatter_add(grads["entity_phases"], idx, np.where(m[..., None, None], 0.0, g))
    vec = s.vectors[idx]
    sig = _sigmoid(np.einsum("dhw,...hw->...dh", s.proj, vec) + s.bias)
    gz = np.where(m[..., None, None], g * TWO_PI * sig * (1.0 - sig), 0.0)
    gz = gz.reshape((-1,) + gz.shape[-2:])
    vec = vec.reshape((-1,) + vec.shape[-2:])
    grads["sem_proj"] += np.einsum("ndh,nhw->dhw", gz, vec)
    grads["sem_bias"] += gz.sum(axis=0)


def zero_grads(params):
    return {name: np.zeros_like(a) for name, a in params.tables().items()}


# ---------------------------------------------------------------- single triples

def fibrate(entity, head_index):
    """Per-dimension fiber points of an entity for one attribute head."""
    pts = np.asarray(entity.points, dtype=np.float64)
    phases = np.asarray(entity.phases, dtype=np.float64)
    if not 0 <= head_index < phases.shape[-1]:
        raise IndexError(f"head_index {head_index} out of range for {phases.shape[-1]} heads")
    p, _, _ = _normalize(pts)
    return hopf.fiber_point(hopf.lift(p), phases[..., head_index])


def rotate_all(entity, relation):
    return EntityEmbedding(quat.rotate(relation.quats, entity.points), entity.phases)


def score(h, r, t, cfg):
    """Distance score of one triple from explicit embeddings."""
    k = h.points.shape[0]
    H = h.phases.shape[-1]
    if (t.points.shape[0] != k or r.quats.shape[0] != k or np.shape(r.offsets)[0] != k
            or t.phases.shape[-1] != H or h.phases.shape[0] != k or t.phases.shape[0] != k):
        raise ShapeMismatch("embedding dimensions or head counts disagree")
    quat._check_nonzero(r.quats)
    if cfg.variant == "no-hopf":
        return float(np.linalg.norm(quat.rotate(r.quats, h.points) - t.points, axis=-1).sum())
    D, _ = pair_costs(h.points, t.points, r.quats, np.asarray(r.offsets, dtype=np.float64),
                      h.phases, t.phases)
    s, _, _ = reduce_costs(D, cfg)
    return float(s)


# ---------------------------------------------------------------- ranking support

def lifted_entities(params, r=None, inverse=False):
    """Fiber points of every entity, optionally rotated by relation ``r``.

    With ``inverse`` the conjugate rotation and negated offset are used.
    Returns (E, k, H, 4); for the no-hopf variant returns rotated 3D points.
    """
    pts = params.entity_points
    if params.cfg.variant == "no-hopf":
        if r is None:
            return pts
        q = params.relation_quats[r]
        if inverse:
            q = quat.conjugate(q)
        return quat.rotate_unchecked(q, pts)
    phases = params.phases_of(np.arange(params.num_entities))
    if r is None:
        return _Lift(pts, phases).e
    q = params.relation_quats[r]
    off = params.relation_phases[r]
    if inverse:
        return _Lift(pts, phases - off[:, None], quat.conjugate(q)).e
    return _Lift(pts, phases + off[:, None], q).e


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params):
    cfg = params.cfg
    header = {
        "k": cfg.dim,
        "H": cfg.heads,
        "counts": {"entities": params.num_entities, "relations": params.num_relations},
        "variant": cfg.variant,
        "config": asdict(cfg),
        "semantics": None,
    }
    sem = params.semantics
    if sem is not None:
        header["semantics"] = {"width": int(sem.vectors.shape[-1])}
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in (params.entity_points, params.entity_phases, params.relation_quats,
                    params.relation_phases):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if sem is not None:
            for arr in (sem.proj, sem.bias, sem.vectors, sem.mask.astype(np.float64)):
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a HopfE checkpoint")
    buf = io.BytesIO(data[len(MAGIC):])
    header = json.loads(buf.readline().decode("utf-8"))
    cfg = ModelConfig(**header["config"]).validate()
    E = header["counts"]["entities"]
    R = header["counts"]["relations"]
    k, H = header["k"], header["H"]

    def take(*shape):
        n = int(np.prod(shape))
        raw = buf.read(8 * n)
        if len(raw) != 8 * n:
            raise ValueError(f"{path}: truncated checkpoint")
        return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)

    params = ModelParams(cfg, take(E, k, 3), take(E, k, H), take(R, k, 4), take(R, k))
    if header.get("semantics"):
        W = header["semantics"]["width"]
        proj, bias, vectors, mask = take(k, H, W), take(k, H), take(E, H, W), take(E)
        params.semantics = Semantics(vectors, mask > 0.5, proj, bias)
    return params
