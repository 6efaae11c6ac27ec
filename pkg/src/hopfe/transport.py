"""Matching between attribute heads: entropic transport and min-match.

Both marginals are uniform (1/H).  Functions accept a single ``H×H`` cost
matrix or a stack of them with arbitrary leading axes.
"""

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import NumericalOverflow

DEFAULT_EPSILON = 0.1
DEFAULT_MAX_ITERS = 100
DEFAULT_TOL = 1e-9
# unconverged marginals beyond this, with zero kernel entries, count as underflow
UNDERFLOW_TOL = 1e-6


@dataclass
class TransportPlan:
    weights: np.ndarray
    cost: float
    iterations: int
    marginal_error: float

    @property
    def converged(self):
        return self.marginal_error < 1e-6


def _stabilize(cost):
    # per-row then per-column shifts leave the scaled plan unchanged and
    # guarantee a unit kernel entry in every row and column
    c = cost - cost.min(axis=-1, keepdims=True)
    return c - c.min(axis=-2, keepdims=True)


def sinkhorn(cost, epsilon=DEFAULT_EPSILON, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL,
             newton_steps=20):
    """Batched Sinkhorn scaling.

    Alternating row/column scaling of exp(-cost/epsilon) runs until the
    row marginals are within ``tol`` of 1/H or ``max_iters`` is reached;
    matrices still above ``tol`` then get Newton steps on the log scalings
    (the marginal map's Jacobian is tiny for H <= 10).  The result is
    finally rounded onto the transport polytope.

    Returns ``(plan, marginal_error, iterations)``; ``marginal_error`` is
    the per-matrix row-marginal deviation before rounding.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost must be finite")
    H = cost.shape[-1]
    if cost.shape[-2] != H:
        raise ValueError(f"cost must be square, got {cost.shape[-2:]}")
    marg = 1.0 / H
    K = np.exp(-_stabilize(cost) / epsilon)
    if np.any(K.sum(axis=-1) == 0.0):
        raise NumericalOverflow("kernel row underflowed to zero; increase epsilon")
    v = np.ones(cost.shape[:-1])
    it = 0
    err = np.full(cost.shape[:-2], np.inf)
    for it in range(1, max_iters + 1):
        Kv = np.einsum("...ij,...j->...i", K, v)
        if np.any(Kv == 0.0):
            raise NumericalOverflow("kernel product underflowed to zero; increase epsilon")
        u = marg / Kv
        KTu = np.einsum("...ij,...i->...j", K, u)
        if np.any(KTu == 0.0):
            raise NumericalOverflow("kernel product underflowed to zero; increase epsilon")
        v = marg / KTu
        rows = u * np.einsum("...ij,...j->...i", K, v)
        err = np.abs(rows - marg).max(axis=-1)
        if np.all(err < tol):
            break
    plan = u[..., :, None] * K * v[..., None, :]
    if H > 1 and newton_steps and np.any(err >= tol):
        plan, err = _newton_polish(plan, err, tol, newton_steps)
    if not np.all(np.isfinite(plan)):
        raise NumericalOverflow("non-finite transport plan; increase epsilon")
    if np.any((err > UNDERFLOW_TOL) & np.any(K == 0.0, axis=(-2, -1))):
        # zero kernel entries leave no scaling that meets the marginals
        raise NumericalOverflow("kernel underflow prevents uniform marginals; increase epsilon")
    return round_to_marginals(plan), err, it


def sinkhorn_retry(cost, epsilon=DEFAULT_EPSILON, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL,
                   retries=6):
    """:func:`sinkhorn` that multiplies epsilon by 10 after each overflow.

    Returns ``(plan, marginal_error, iterations, epsilon_used)``.
    """
    for attempt in range(retries + 1):
        try:
            return (*sinkhorn(cost, epsilon, max_iters, tol), epsilon)
        except NumericalOverflow:
            if attempt == retries:
                raise
            epsilon *= 10.0


def _marginal_jacobian(P):
    H = P.shape[-1]
    n = P.shape[0]
    A = np.zeros((n, 2 * H, 2 * H))
    idx = np.arange(H)
    A[:, idx, idx] = P.sum(axis=2)
    A[:, H + idx, H + idx] = P.sum(axis=1)
    A[:, :H, H:] = P
    A[:, H:, :H] = np.transpose(P, (0, 2, 1))
    return A


def _newton_polish(plan, err, tol, steps):
    shape = plan.shape
    H = shape[-1]
    marg = 1.0 / H
    P = plan.reshape((-1, H, H)).copy()
    e = np.asarray(err, dtype=np.float64).reshape(-1).copy()
    for _ in range(steps):
        todo = np.flatnonzero(e >= tol)
        if todo.size == 0:
            break
        Pt = P[todo]
        res = np.concatenate([Pt.sum(axis=2) - marg, Pt.sum(axis=1) - marg], axis=1)
        A = _marginal_jacobian(Pt)
        step = np.zeros_like(res)
        # pseudo-inverse: rows of underflowed kernel entries may be singular
        step[:, :-1] = np.einsum("nij,nj->ni", np.linalg.pinv(A[:, :-1, :-1]), -res[:, :-1])
        old = np.abs(res).max(axis=1)
        scale = np.ones(todo.size)
        for _ in range(30):
            ls = step * scale[:, None]
            cand = Pt * np.exp(np.clip(ls[:, :H, None] + ls[:, None, H:], -50.0, 50.0))
            new = np.maximum(np.abs(cand.sum(axis=2) - marg).max(axis=1),
                             np.abs(cand.sum(axis=1) - marg).max(axis=1))
            bad = ~(new < old)
            if not bad.any():
                break
            scale = np.where(bad, 0.5 * scale, scale)
        improved = new < old
        P[todo[improved]] = cand[improved]
        e[todo[improved]] = new[improved]
        if not improved.any():
            break
    return P.reshape(shape), e.reshape(np.shape(err))


def round_to_marginals(plan):
    """Project an approximate plan onto the uniform transport polytope.

    Rows, then columns, are scaled down to their marginal, and the
    remaining mass is added as a rank-one correction (Altschuler, Weed and
    Rigollet, 2017).  The change in L1 is at most twice the marginal error.
    """
    H = plan.shape[-1]
    marg = 1.0 / H
    rows = plan.sum(axis=-1)
    x = plan * np.minimum(marg / rows, 1.0)[..., :, None]
    cols = x.sum(axis=-2)
    y = x * np.minimum(marg / cols, 1.0)[..., None, :]
    err_r = marg - y.sum(axis=-1)
    err_c = marg - y.sum(axis=-2)
    mass = err_r.sum(axis=-1)
    safe = np.where(mass > 0, mass, 1.0)
    corr = err_r[..., :, None] * err_c[..., None, :] / safe[..., None, None]
    out = y + np.where((mass > 0)[..., None, None], corr, 0.0)
    return np.maximum(out, 0.0)


def sinkhorn_plan(cost, epsilon=DEFAULT_EPSILON, max_iters=DEFAULT_MAX_ITERS, tol=DEFAULT_TOL):
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("sinkhorn_plan takes a single H×H matrix; use sinkhorn() for stacks")
    plan, err, it = sinkhorn(cost, epsilon, max_iters, tol)
    return TransportPlan(weights=plan, cost=float(np.sum(plan * cost)),
                         iterations=it, marginal_error=float(err))


def transport_cost_grad(cost, plan, epsilon):
    """Gradient of ``Σ Π_ij C_ij`` w.r.t. ``C`` at a converged entropic plan.

    The plan depends on the cost through the dual potentials; their
    response is obtained by implicit differentiation of the two marginal
    constraints (one gauge degree of freedom is pinned).
    """
    cost = np.asarray(cost, dtype=np.float64)
    plan = np.asarray(plan, dtype=np.float64)
    H = cost.shape[-1]
    if H == 1:
        return np.ones_like(cost)
    batch = cost.shape[:-2]
    P = plan.reshape((-1, H, H))
    C = cost.reshape((-1, H, H))
    n = P.shape[0]
    A = _marginal_jacobian(P)
    PC = P * C
    w = np.concatenate([PC.sum(axis=2), PC.sum(axis=1)], axis=1)
    # pin the last column potential to remove the null direction (1, -1)
    lam = np.zeros((n, 2 * H))
    lam[:, :-1] = np.linalg.solve(A[:, :-1, :-1], w[:, :-1, None])[..., 0]
    corr = lam[:, :H, None] + lam[:, None, H:]
    grad = P * (1.0 + (corr - C) / epsilon)
    return grad.reshape(batch + (H, H))


def min_match(cost):
    """Index pair and value of the smallest entry (ties: smallest i, then j)."""
    cost = np.asarray(cost, dtype=np.float64)
    flat = int(np.argmin(cost))
    i, j = np.unravel_index(flat, cost.shape)
    return int(i), int(j), float(cost[i, j])


def min_match_batch(cost):
    """Flat argmin index and value for a stack of cost matrices."""
    cost = np.asarray(cost, dtype=np.float64)
    flat = cost.reshape(cost.shape[:-2] + (-1,))
    idx = np.argmin(flat, axis=-1)
    return idx, np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]


def brute_force_assignment(cost):
    """Exact optimal assignment cost under uniform marginals (test oracle)."""
    cost = np.asarray(cost, dtype=np.float64)
    H = cost.shape[0]
    best = min(sum(cost[i, p[i]] for i in range(H)) for p in permutations(range(H)))
    return best / H
