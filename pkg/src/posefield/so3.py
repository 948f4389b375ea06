"""Quaternion and pose-space primitives.

Quaternions are stored ``(w, x, y, z)`` in float64. A pose is an array of
shape ``(K, 4)``; most functions broadcast over leading batch axes.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateQuaternion, DimensionMismatch

NORM_EPS = 1e-12
ACOS_CLAMP = 1.0 - 1e-12


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def normalize(q) -> np.ndarray:
    """Scale quaternion(s) to unit norm along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n <= NORM_EPS):
        raise DegenerateQuaternion("quaternion norm below 1e-12")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product ``a * b``, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def axis_angle_to_quat(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def canonicalize(q) -> np.ndarray:
    """Flip each quaternion so its first nonzero component is positive."""
    q = np.asarray(q, dtype=np.float64)
    nz = q != 0
    first = np.argmax(nz, axis=-1)
    lead = np.take_along_axis(q, first[..., None], axis=-1)
    return np.where(lead < 0, -q, q)


def joint_geodesic(q, r) -> np.ndarray:
    """Angle on S^3 between unit quaternions, modulo sign: ``arccos|q.r|``.

    Evaluated as ``2 atan2(min(|q-r|, |q+r|), max(|q-r|, |q+r|))``, which is
    the same angle for unit inputs but stays exact near zero, where arccos
    turns a 1e-16 rounding error in the dot product into a 1e-8 angle.
    """
    q = np.asarray(q, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    minus = np.linalg.norm(q - r, axis=-1)
    plus = np.linalg.norm(q + r, axis=-1)
    return 2.0 * np.arctan2(np.minimum(minus, plus), np.maximum(minus, plus))


def pose_distance(a, b, skel) -> np.ndarray | float:
    """Weighted geodesic distance between poses.

    ``sqrt(sum_i w_i / 2 * arccos(|a_i . b_i|)^2)``; weights are not normalized.
    Broadcasts over leading axes of ``a`` and ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = skel.k
    if a.shape[-2:] != (k, 4) or b.shape[-2:] != (k, 4):
        raise DimensionMismatch(
            f"poses of shape {a.shape[-2:]} / {b.shape[-2:]} do not match K={k}"
        )
    phi = joint_geodesic(a, b)
    d = np.sqrt(np.sum(0.5 * skel.weights * phi * phi, axis=-1))
    return float(d) if d.ndim == 0 else d


def random_pose(k: int, seed=None, size: int | None = None) -> np.ndarray:
    """Pose(s) with joints i.i.d. uniform on S^3."""
    if k < 1:
        raise ValueError("K must be >= 1")
    rng = as_rng(seed)
    shape = (k, 4) if size is None else (size, k, 4)
    return normalize(rng.standard_normal(shape))


def random_axes(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(tuple(shape) + (3,))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def perturb_pose(p, sigma: float, joint_prob: float, seed=None) -> np.ndarray:
    """Right-multiply randomly chosen joints by a random-axis rotation.

    ``sigma`` is measured on S^3 (the unit of :func:`joint_geodesic`): an
    affected joint moves by ``|N(0, sigma^2)|`` under that metric, i.e. is
    rotated by twice that angle in SO(3). Accepts a single pose or a batch.
    """
    if sigma < 0 or not 0.0 <= joint_prob <= 1.0:
        raise ValueError("need sigma >= 0 and joint_prob in [0, 1]")
    rng = as_rng(seed)
    p = np.asarray(p, dtype=np.float64)
    lead = p.shape[:-1]
    # draw everything up front so the stream layout is independent of sigma
    hit = rng.random(lead) < joint_prob
    angle = np.abs(rng.standard_normal(lead)) * sigma
    axis = random_axes(rng, lead)
    delta = np.concatenate([np.cos(angle)[..., None], np.sin(angle)[..., None] * axis], axis=-1)
    moved = normalize(quat_mul(p, delta))
    out = p.copy()
    sel = hit & (angle > 0)
    out[sel] = moved[sel]
    return out


def flip_signs(p, mask) -> np.ndarray:
    """Negate quaternions where ``mask`` (shape ``p.shape[:-1]``) is true."""
    p = np.asarray(p, dtype=np.float64)
    return np.where(np.asarray(mask)[..., None], -p, p)


def is_unit(p, tol: float = 1e-9) -> bool:
    return bool(np.all(np.abs(np.linalg.norm(p, axis=-1) - 1.0) <= tol))
