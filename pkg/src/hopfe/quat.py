"""Quaternion algebra on float64 arrays.

A quaternion ``a + bi + cj + dk`` is an array whose last axis holds
``(a, b, c, d)``; a 3D point is an array whose last axis holds
``(p1, p2, p3)``.  Every function broadcasts over leading axes.
"""

import numpy as np

from .errors import ZeroQuaternion

ZERO_TOL = 1e-12
AXIS_TOL = 1e-12
SIGN_TOL = 1e-9

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quaternion(a, b=0.0, c=0.0, d=0.0):
    return np.array([a, b, c, d], dtype=np.float64)


def as_quat(q):
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != 4:
        raise ValueError(f"expected last axis of size 4, got shape {q.shape}")
    return q


def as_point(v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ValueError(f"expected last axis of size 3, got shape {v.shape}")
    return v


def hamilton(q1, q2):
    """Hamilton product ``q1 ⊗ q2``."""
    q1 = as_quat(q1)
    q2 = as_quat(q2)
    a1, b1, c1, d1 = np.moveaxis(q1, -1, 0)
    a2, b2, c2, d2 = np.moveaxis(q2, -1, 0)
    return np.stack([
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ], axis=-1)


def conjugate(q):
    q = as_quat(q)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def norm(q):
    return np.linalg.norm(as_quat(q), axis=-1)


def pure(v):
    """Embed a 3D point as the pure quaternion ``0 + p1 i + p2 j + p3 k``."""
    v = as_point(v)
    return np.concatenate([np.zeros(v.shape[:-1] + (1,)), v], axis=-1)


def _check_nonzero(q):
    n = norm(q)
    if np.any(n < ZERO_TOL):
        raise ZeroQuaternion(f"quaternion norm below {ZERO_TOL}")
    return n


def rotate(q, v):
    """Rotate ``v`` by ``q v q̄ / |q|²``; ``q`` need not be unit."""
    q = as_quat(q)
    v = as_point(v)
    n2 = _check_nonzero(q) ** 2
    return rotate_unchecked(q, v, n2)


def rotate_unchecked(q, v, n2=None):
    # closed form of q (0, v) q̄ / |q|²
    a = q[..., :1]
    u = q[..., 1:]
    if n2 is None:
        n2 = np.sum(q * q, axis=-1)
    uu = np.sum(u * u, axis=-1, keepdims=True)
    uv = np.sum(u * v, axis=-1, keepdims=True)
    out = (a * a - uu) * v + 2.0 * uv * u + 2.0 * a * np.cross(u, v)
    return out / np.asarray(n2)[..., None]


def rotate_by_product(q, v):
    """Rotation through two explicit Hamilton products (reference path)."""
    q = as_quat(q)
    n2 = _check_nonzero(q) ** 2
    w = hamilton(hamilton(q, pure(v)), conjugate(q)) / n2[..., None]
    return w[..., 1:]


def angle_axis(q):
    """Rotation angle ``2 arccos(a/|q|)`` in [0, 2π] and unit axis.

    The axis of a quaternion with vanishing imaginary part is (1, 0, 0).
    """
    q = as_quat(q)
    n = _check_nonzero(q)
    cos_half = np.clip(q[..., 0] / n, -1.0, 1.0)
    angle = 2.0 * np.arccos(cos_half)
    u = q[..., 1:]
    un = np.linalg.norm(u, axis=-1)
    degenerate = un < AXIS_TOL
    safe = np.where(degenerate, 1.0, un)
    axis = np.where(degenerate[..., None], np.array([1.0, 0.0, 0.0]), u / safe[..., None])
    return angle, axis


def signed_angle_axis(q):
    """Like :func:`angle_axis` but with the axis sign fixed.

    The first axis component with magnitude above 1e-9 is made positive;
    the angle changes sign whenever the axis is flipped.
    """
    angle, axis = angle_axis(q)
    lead = _leading_component(axis)
    flip = lead < 0
    angle = np.where(flip, -angle, angle)
    axis = np.where(flip[..., None], -axis, axis)
    return angle, axis


def signed_angle(q):
    return signed_angle_axis(q)[0]


def _leading_component(axis):
    big = np.abs(axis) > SIGN_TOL
    idx = np.argmax(big, axis=-1)
    lead = np.take_along_axis(axis, idx[..., None], axis=-1)[..., 0]
    return np.where(big.any(axis=-1), lead, 1.0)


def from_angle_axis(angle, axis):
    axis = as_point(axis)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)
    return np.concatenate([np.cos(half)[..., None], np.sin(half)[..., None] * axis], axis=-1)


def wrap_angle(x):
    """Wrap angles to (-π, π]."""
    x = np.asarray(x, dtype=np.float64)
    w = np.mod(x + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


def random_unit(rng, size=()):
    size = (size,) if np.isscalar(size) else tuple(size)
    q = rng.standard_normal(size + (4,))
    return q / np.linalg.norm(q, axis=-1, keepdims=True)
