"""Kinematic tree description and forward kinematics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionMismatch


@dataclass(eq=False)
class Skeleton:
    """Joint hierarchy with per-joint offsets and metric weights.

    ``parents[k]`` is ``-1`` for root-level joints and must be ``< k``
    otherwise. ``weights`` default to ``2 ** -depth``.
    """

    parents: np.ndarray
    offsets: np.ndarray
    weights: np.ndarray | None = None
    depth: np.ndarray = field(init=False)

    def __post_init__(self):
        self.parents = np.asarray(
            [-1 if p is None else int(p) for p in self.parents], dtype=np.int64
        )
        k = len(self.parents)
        if k < 1:
            raise ConfigError("skeleton needs at least one joint")
        self.offsets = np.asarray(self.offsets, dtype=np.float64).reshape(k, 3)
        depth = np.zeros(k, dtype=np.int64)
        for j, p in enumerate(self.parents):
            if p >= j or p < -1:
                raise ConfigError(f"joint {j}: parent {p} breaks topological order")
            depth[j] = 0 if p < 0 else depth[p] + 1
        self.depth = depth
        if self.weights is None:
            self.weights = 2.0 ** (-depth.astype(np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(k)
        if np.any(self.weights <= 0):
            raise ConfigError("joint weights must be positive")

    @property
    def k(self) -> int:
        return len(self.parents)

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parents == j)]

    def descendants(self, j: int) -> list[int]:
        out, stack = [], self.children(j)
        while stack:
            c = stack.pop()
            out.append(c)
            stack.extend(self.children(c))
        return sorted(out)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "parents": [None if p < 0 else int(p) for p in self.parents],
            "offsets": self.offsets.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        skel = cls(d["parents"], d["offsets"], d.get("weights"))
        if "k" in d and int(d["k"]) != skel.k:
            raise ConfigError(f"'k'={d['k']} but {skel.k} parents given")
        return skel

    def same_as(self, other: "Skeleton") -> bool:
        return (
            self.k == other.k
            and np.array_equal(self.parents, other.parents)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.weights, other.weights)
        )


def binary_tree(k: int = 8) -> Skeleton:
    """Default synthetic skeleton: joint ``j`` hangs off ``(j - 1) // 2``.

    The root sits at the origin; every other joint is a unit offset along
    axis ``j % 3`` so that siblings never share a bone direction.
    """
    parents = [-1] + [(j - 1) // 2 for j in range(1, k)]
    offsets = np.zeros((k, 3))
    for j in range(1, k):
        offsets[j, j % 3] = 1.0
    return Skeleton(parents, offsets)


def load_skeleton(path) -> Skeleton:
    return Skeleton.from_dict(json.loads(Path(path).read_text()))


def save_skeleton(skel: Skeleton, path) -> None:
    Path(path).write_text(json.dumps(skel.to_dict(), indent=2))


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def _matrix_vjp(q, rbar) -> np.ndarray:
    """Pull a gradient on ``quat_to_matrix(q)`` back to the four coordinates."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    b = rbar
    gw = 2 * (-z * b[..., 0, 1] + y * b[..., 0, 2] + z * b[..., 1, 0]
              - x * b[..., 1, 2] - y * b[..., 2, 0] + x * b[..., 2, 1])
    gx = 2 * (y * b[..., 0, 1] + z * b[..., 0, 2] + y * b[..., 1, 0] - 2 * x * b[..., 1, 1]
              - w * b[..., 1, 2] + z * b[..., 2, 0] + w * b[..., 2, 1] - 2 * x * b[..., 2, 2])
    gy = 2 * (-2 * y * b[..., 0, 0] + x * b[..., 0, 1] + w * b[..., 0, 2] + x * b[..., 1, 0]
              + z * b[..., 1, 2] - w * b[..., 2, 0] + z * b[..., 2, 1] - 2 * y * b[..., 2, 2])
    gz = 2 * (-2 * z * b[..., 0, 0] - w * b[..., 0, 1] + x * b[..., 0, 2] + w * b[..., 1, 0]
              - 2 * z * b[..., 1, 1] + y * b[..., 1, 2] + x * b[..., 2, 0] + y * b[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def _check_pose(p, skel):
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-2:] != (skel.k, 4):
        raise DimensionMismatch(f"pose shape {p.shape[-2:]} does not match K={skel.k}")
    return p


def _fk(p, skel):
    lead = p.shape[:-2]
    rot = quat_to_matrix(p)
    glob = np.empty(lead + (skel.k, 3, 3))
    pos = np.empty(lead + (skel.k, 3))
    for j, par in enumerate(skel.parents):
        if par < 0:
            glob[..., j, :, :] = rot[..., j, :, :]
            pos[..., j, :] = skel.offsets[j]
        else:
            glob[..., j, :, :] = glob[..., par, :, :] @ rot[..., j, :, :]
            pos[..., j, :] = pos[..., par, :] + glob[..., par, :, :] @ skel.offsets[j]
    return pos, rot, glob


def forward_kinematics(p, skel: Skeleton) -> np.ndarray:
    """Joint positions ``(..., K, 3)`` with root-level joints at their offsets."""
    return _fk(_check_pose(p, skel), skel)[0]


def fk_vjp(p, skel: Skeleton, pos_bar) -> tuple[np.ndarray, np.ndarray]:
    """Positions and the ambient-coordinate gradient of ``sum(pos * pos_bar)``.

    The gradient is that of the rotation-matrix polynomial, which agrees with
    the normalized map on the tangent space of unit quaternions.
    """
    p = _check_pose(p, skel)
    pos, rot, glob = _fk(p, skel)
    pbar = np.array(np.broadcast_to(pos_bar, pos.shape), dtype=np.float64)
    gbar = np.zeros_like(glob)
    rbar = np.zeros_like(rot)
    for j in range(skel.k - 1, -1, -1):
        par = skel.parents[j]
        if par < 0:
            rbar[..., j, :, :] = gbar[..., j, :, :]
            continue
        pbar[..., par, :] += pbar[..., j, :]
        gbar[..., par, :, :] += pbar[..., j, :, None] * skel.offsets[j]
        gbar[..., par, :, :] += gbar[..., j, :, :] @ np.swapaxes(rot[..., j, :, :], -1, -2)
        rbar[..., j, :, :] = np.swapaxes(glob[..., par, :, :], -1, -2) @ gbar[..., j, :, :]
    return pos, _matrix_vjp(p, rbar)


def mean_joint_distance(a, b) -> np.ndarray | float:
    """Mean Euclidean distance between corresponding joints."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-2:] != b.shape[-2:]:
        raise DimensionMismatch(f"joint arrays {a.shape} and {b.shape} differ")
    d = np.mean(np.linalg.norm(a - b, axis=-1), axis=-1)
    return float(d) if d.ndim == 0 else d
