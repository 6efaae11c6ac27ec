"""Hopf map, its inverse, fibers and stereographic projection."""

import csv
from dataclasses import dataclass

import numpy as np

from . import quat
from .errors import NotOnSphere

SPHERE_TOL = 1e-6
# below this value of 1 + p1 the antipodal chart is used
CHART_TOL = 1e-6
POLE_CLAMP = 1.0 - 1e-9


@dataclass(frozen=True)
class FiberBase:
    r_prime: np.ndarray
    source: np.ndarray


def hopf_map(r):
    """Image of (1, 0, 0) under the rotation encoded by ``r``."""
    r = quat.as_quat(r)
    n = quat._check_nonzero(r)
    a, b, c, d = np.moveaxis(r / n[..., None], -1, 0)
    return np.stack([
        a * a + b * b - c * c - d * d,
        2.0 * (a * d + b * c),
        2.0 * (b * d - a * c),
    ], axis=-1)


def _check_unit(v, what):
    n = np.linalg.norm(v, axis=-1)
    if np.any(~np.isfinite(n)) or np.any(np.abs(n - 1.0) > SPHERE_TOL):
        raise NotOnSphere(f"{what} is not on the unit sphere (|norm - 1| > {SPHERE_TOL})")


def lift(p):
    """Base point r' of the fiber over unit point(s) ``p``.

    Uses ((1+p1) i + p2 j + p3 k) / sqrt(2(1+p1)) away from (-1, 0, 0) and
    the chart ``q ⊗ j`` (``q`` the shortest rotation taking -i to ``p``)
    near it.  No validation; see :func:`inverse_hopf`.
    """
    p = np.asarray(p, dtype=np.float64)
    p1, p2, p3 = np.moveaxis(p, -1, 0)
    s = 1.0 + p1
    main = s > CHART_TOL
    n = np.sqrt(2.0 * np.where(main, s, 1.0))
    w = 1.0 - p1
    m = np.sqrt(2.0 * np.where(main, 1.0, w))
    zero = np.zeros_like(p1)
    r_main = np.stack([zero, s / n, p2 / n, p3 / n], axis=-1)
    r_anti = np.stack([-p3 / m, p2 / m, w / m, zero], axis=-1)
    return np.where(main[..., None], r_main, r_anti)


def lift_vjp(p, g):
    """Vector-Jacobian product of :func:`lift` at ``p`` for cotangent ``g``."""
    p1, p2, p3 = np.moveaxis(p, -1, 0)
    ga, gb, gc, gd = np.moveaxis(g, -1, 0)
    s = 1.0 + p1
    main = s > CHART_TOL
    n = np.sqrt(2.0 * np.where(main, s, 1.0))
    n3 = n ** 3
    d1_main = gb / (2.0 * n) - (gc * p2 + gd * p3) / n3
    d2_main = gc / n
    d3_main = gd / n
    w = 1.0 - p1
    m = np.sqrt(2.0 * np.where(main, 1.0, w))
    m3 = m ** 3
    d1_anti = -ga * p3 / m3 + gb * p2 / m3 - gc / (2.0 * m)
    d2_anti = gb / m
    d3_anti = -ga / m
    return np.stack([
        np.where(main, d1_main, d1_anti),
        np.where(main, d2_main, d2_anti),
        np.where(main, d3_main, d3_anti),
    ], axis=-1)


def inverse_hopf(p):
    p = quat.as_point(p)
    _check_unit(p, "point")
    return FiberBase(r_prime=lift(p), source=p.copy())


def phase_factor(t):
    t = np.asarray(t, dtype=np.float64)
    z = np.zeros_like(t)
    return np.stack([np.cos(t), np.sin(t), z, z], axis=-1)


def fiber_point(base, t):
    """Point ``r' ⊗ (cos t + i sin t)`` on the fiber."""
    r = base.r_prime if isinstance(base, FiberBase) else np.asarray(base, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return quat.hamilton(r, phase_factor(t))


def stereographic_project(q):
    """Projection from S³ minus (0,0,0,1) to R³: (a, b, c) / (1 - d)."""
    q = quat.as_quat(q)
    _check_unit(q, "quaternion")
    d = np.minimum(q[..., 3], POLE_CLAMP)
    xyz = q[..., :3]
    at_pole = q[..., 3] >= POLE_CLAMP
    if np.any(at_pole):
        # pole: push along the limiting direction (or +x if none)
        xn = np.linalg.norm(xyz, axis=-1, keepdims=True)
        direction = np.where(xn > 0, xyz / np.where(xn > 0, xn, 1.0), np.array([1.0, 0.0, 0.0]))
        xyz = np.where(at_pole[..., None], direction, xyz)
    return xyz / (1.0 - d)[..., None]


def fiber_distance_closed_form(p1, p2):
    """Distance between the fibers over unit points ``p1`` and ``p2``.

    Right multiplication by a unit quaternion is an isometry of S³, so the
    fibers are a constant distance ``2 sin(θ/4)`` apart, ``θ`` the angle
    between the base points.
    """
    c = np.clip(np.sum(np.asarray(p1) * np.asarray(p2), axis=-1), -1.0, 1.0)
    return 2.0 * np.sin(np.arccos(c) / 4.0)


def min_fiber_distance(p1, p2, grid=64, steps=50):
    """Minimum 4D distance between the fibers over ``p1`` and ``p2``.

    Grid search over (t, t') followed by coordinate descent with step
    halving from the best grid cell.
    """
    if grid < 64:
        raise ValueError("grid must be at least 64")
    r1 = inverse_hopf(p1).r_prime
    r2 = inverse_hopf(p2).r_prime

    def dist(t, s):
        return np.linalg.norm(fiber_point(r1, t) - fiber_point(r2, s), axis=-1)

    ts = np.linspace(0.0, 2.0 * np.pi, grid, endpoint=False)
    grid_d = dist(ts[:, None], ts[None, :])
    i, j = np.unravel_index(np.argmin(grid_d), grid_d.shape)
    t, s = ts[i], ts[j]
    best = grid_d[i, j]
    step = 2.0 * np.pi / grid
    for _ in range(steps):
        moved = False
        for dt, ds in ((step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)):
            cand = dist(t + dt, s + ds)
            if cand < best:
                best, t, s = cand, t + dt, s + ds
                moved = True
        if not moved:
            step *= 0.5
    return float(best)


def fiber_samples(point, samples=64):
    """Stereographically projected samples of the fiber over a 3D point."""
    p = np.asarray(point, dtype=np.float64)
    p = p / np.linalg.norm(p)
    t = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
    q = fiber_point(lift(p), t)
    return t, stereographic_project(q)


def write_fiber_csv(path, points, samples=64, marked_phases=None):
    """Write ``dim,t,x,y,z`` rows for the fibers of per-dimension points.

    ``points`` has shape (k, 3).  ``marked_phases`` (k, H), if given, adds a
    row for every attribute phase after the sampled circle.
    """
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dim", "t", "x", "y", "z"])
        for d, p in enumerate(points):
            n = np.linalg.norm(p)
            p = p / n if n > quat.ZERO_TOL else np.array([1.0, 0.0, 0.0])
            ts = np.linspace(0.0, 2.0 * np.pi, samples, endpoint=False)
            if marked_phases is not None:
                ts = np.concatenate([ts, np.mod(marked_phases[d], 2.0 * np.pi)])
            xyz = stereographic_project(fiber_point(lift(p), ts))
            for t, (x, y, z) in zip(ts, xyz):
                writer.writerow([d, f"{t:.10g}", f"{x:.10g}", f"{y:.10g}", f"{z:.10g}"])
