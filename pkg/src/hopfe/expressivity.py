"""Constructive clique check: fibred phases can encode an antisymmetric
transitive relation on three co-located entities, plain rotations cannot.

The constraint set is six triples over entities e1, e2, e3 and one relation:
the three forward pairs (e1,e2), (e2,e3), (e1,e3) must score 0 and the three
reversed pairs must score at least ``margin``.  The violation of a
configuration is the largest amount by which any constraint fails.
"""

from dataclasses import dataclass
from functools import reduce

import numpy as np
from scipy.optimize import minimize

from . import quat
from .model import ModelConfig, ModelParams, scores

POSITIVE = ((0, 1), (1, 2), (0, 2))
REVERSED = ((1, 0), (2, 1), (2, 0))
DEFAULT_MARGIN = 1.0


def clique_model(theta=0.3, delta=np.pi / 3, point=(0.3, -0.5, 0.8)):
    """k=1, H=2 model realizing the clique with a phase shift ``delta``.

    Every entity sits on the same base point; e1 carries phases
    {θ, θ+Δ}, e2 {θ+Δ, θ+2Δ}, e3 {θ+2Δ, θ+2Δ}, and the relation is the
    identity rotation with offset Δ.
    """
    cfg = ModelConfig(dim=1, heads=2, matching="min")
    pts = np.tile(np.asarray(point, dtype=np.float64), (3, 1, 1))
    phases = theta + delta * np.array([[[0.0, 1.0]], [[1.0, 2.0]], [[2.0, 2.0]]])
    quats = np.array([[[1.0, 0.0, 0.0, 0.0]]])
    offsets = np.array([[delta]])
    return ModelParams(cfg, pts, phases, quats, offsets)


def constraint_scores(params, relation=0):
    pos = np.array(POSITIVE)
    rev = np.array(REVERSED)
    r = np.full(3, relation)
    return scores(params, pos[:, 0], r, pos[:, 1]), scores(params, rev[:, 0], r, rev[:, 1])


def violation(pos_scores, rev_scores, margin=DEFAULT_MARGIN):
    return float(max(np.max(pos_scores), np.max(np.maximum(0.0, margin - np.asarray(rev_scores)))))


def fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + 5 ** 0.5) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


@dataclass
class SearchResult:
    min_violation: float
    grid_violation: float
    points: np.ndarray
    quaternion: np.ndarray
    evaluated: int


def _grid_violations(R, grid, margin):
    """Violation for every placement (i, j, l) of e1, e2, e3 under rotation R."""
    d = np.linalg.norm((grid @ R.T)[:, None, :] - grid[None, :, :], axis=-1)  # d[a, b] = |R g_a - g_b|
    return reduce(np.maximum, [
        d[:, :, None],                      # e1 -> e2
        d[None, :, :],                      # e2 -> e3
        d[:, None, :],                      # e1 -> e3
        margin - d.T[:, :, None],           # e2 -> e1
        margin - d.T[None, :, :],           # e3 -> e2
        margin - d.T[:, None, :],           # e3 -> e1
    ])


def _rotation_matrix(q):
    return quat.rotate(q, np.eye(3)).T


def _unit(v):
    return v / np.linalg.norm(v)


def _objective(z, margin):
    xs = [_unit(z[3 * i:3 * i + 3]) for i in range(3)]
    q = z[9:13]
    n = np.linalg.norm(q)
    if n < 1e-9 or any(not np.all(np.isfinite(x)) for x in xs):
        return 10.0
    R = _rotation_matrix(q / n)
    d = lambda a, b: np.linalg.norm(R @ xs[a] - xs[b])
    pos = [d(a, b) for a, b in POSITIVE]
    rev = [d(a, b) for a, b in REVERSED]
    return violation(pos, rev, margin)


def no_hopf_search(resolution=20, rotations=400, refine=8, margin=DEFAULT_MARGIN, seed=0):
    """Smallest violation reachable by the no-hopf variant (k=1).

    Entity placements range over a ``resolution``-point Fibonacci grid on
    S² (resolution³ triples) and the relation over identity plus random
    unit quaternions; the best ``refine`` cells are polished by Nelder-Mead
    on unconstrained points and quaternion.
    """
    rng = np.random.default_rng(seed)
    grid = fibonacci_sphere(resolution)
    qs = np.concatenate([[[1.0, 0.0, 0.0, 0.0]], quat.random_unit(rng, rotations)])
    best = []
    for qi, q in enumerate(qs):
        v = _grid_violations(_rotation_matrix(q), grid, margin)
        flat = np.argsort(v, axis=None)[:refine]
        for f in flat:
            best.append((float(v.flat[f]), qi, np.unravel_index(f, v.shape)))
    best.sort(key=lambda b: b[0])
    grid_min = best[0][0]
    top = best[:refine]
    out = (np.inf, None)
    for _, qi, (i, j, l) in top:
        z0 = np.concatenate([grid[i], grid[j], grid[l], qs[qi]])
        res = minimize(_objective, z0, args=(margin,), method="Nelder-Mead",
                       options={"maxiter": 4000, "xatol": 1e-8, "fatol": 1e-10})
        val = min(res.fun, _objective(z0, margin))
        if val < out[0]:
            out = (val, res.x if res.fun <= _objective(z0, margin) else z0)
    z = out[1]
    pts = np.stack([_unit(z[3 * i:3 * i + 3]) for i in range(3)])
    return SearchResult(min_violation=float(out[0]), grid_violation=grid_min, points=pts,
                        quaternion=z[9:13] / np.linalg.norm(z[9:13]),
                        evaluated=len(qs) * resolution ** 3)
