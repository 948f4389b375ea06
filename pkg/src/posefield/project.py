"""Projection onto the zero level set by distance-scaled gradient steps.

One step is ``theta <- theta - alpha * f(theta) * grad f(theta)`` in the 4K
ambient coordinates, with every quaternion renormalized every
``renorm_period`` steps.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Protocol

import numpy as np

from .errors import ConfigError, DegenerateQuaternion, NumericalError, PoseFieldError
from .so3 import NORM_EPS


class DifferentiableField(Protocol):
    def value(self, pose) -> float: ...

    def gradient(self, pose) -> np.ndarray: ...


def batch_value_and_grad(field, poses):
    """Use the field's batched evaluation when it has one."""
    if hasattr(field, "value_and_grad"):
        return field.value_and_grad(poses)
    f = np.array([field.value(p) for p in poses], dtype=np.float64)
    g = np.stack([np.asarray(field.gradient(p), dtype=np.float64) for p in poses]) if len(poses) else poses.copy()
    return f, g


@dataclass
class ProjectionConfig:
    alpha: float = 1.0
    max_iters: int = 100
    tol: float = 1e-3
    renorm_period: int = 1
    record_trajectory: bool = False

    def __post_init__(self):
        if self.alpha <= 0 or self.max_iters < 1 or self.tol < 0 or self.renorm_period < 1:
            raise ConfigError("need alpha > 0, max_iters >= 1, tol >= 0, renorm_period >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProjectionResult:
    pose: np.ndarray | None
    value: float
    iters: int
    trajectory: list | None = None
    error: PoseFieldError | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _renorm(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = np.any(n[..., 0] < NORM_EPS, axis=-1)
    return x / np.where(n < NORM_EPS, 1.0, n), bad


def project_batch(field, poses, cfg: ProjectionConfig | None = None) -> list[ProjectionResult]:
    """Project each pose independently; the batch is only for throughput.

    A pose whose iterate degenerates or turns non-finite gets a result with
    ``error`` set while the rest of the batch carries on.
    """
    cfg = cfg or ProjectionConfig()
    x = np.array(poses, dtype=np.float64)
    n = len(x)
    if n == 0:
        return []
    f, g = batch_value_and_grad(field, x)
    best_x, best_f = x.copy(), f.copy()
    iters = np.zeros(n, dtype=np.int64)
    errors: list = [None] * n
    active = f >= cfg.tol
    traj = [[p.copy()] for p in x] if cfg.record_trajectory else None
    if not np.all(np.isfinite(f)):
        for i in np.flatnonzero(~np.isfinite(f)):
            errors[i] = NumericalError("non-finite field value at input")
        active &= np.isfinite(f)

    for it in range(1, cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        step = x[idx] - cfg.alpha * f[idx, None, None] * g[idx]
        last = it == cfg.max_iters
        renorm = it % cfg.renorm_period == 0 or last
        if renorm:
            step, bad = _renorm(step)
            for i in idx[bad]:
                errors[i] = DegenerateQuaternion(f"iterate {it}: joint norm below 1e-12")
                active[i] = False
            keep = ~bad
            idx, step = idx[keep], step[keep]
        x[idx] = step
        iters[idx] = it
        try:
            fi, gi = batch_value_and_grad(field, step)
        except NumericalError:
            fi = np.full(len(idx), np.nan)
            gi = np.zeros_like(step)
            for r, i in enumerate(idx):
                try:
                    fv, gv = batch_value_and_grad(field, step[r:r + 1])
                    fi[r], gi[r] = fv[0], gv[0]
                except NumericalError as exc:
                    errors[i] = exc
        finite = np.isfinite(fi) & np.all(np.isfinite(gi), axis=(1, 2))
        for i in idx[~finite]:
            errors[i] = errors[i] or NumericalError(f"iterate {it}: non-finite value or gradient")
            active[i] = False
        idx, fi, gi = idx[finite], fi[finite], gi[finite]
        f[idx], g[idx] = fi, gi
        if traj is not None:
            for i in idx:
                traj[i].append(x[i].copy())
        if renorm:
            # only unit-norm iterates are candidates for the returned pose
            better = fi < best_f[idx]
            best_x[idx[better]] = x[idx[better]]
            best_f[idx[better]] = fi[better]
        active[idx[fi < cfg.tol]] = False

    out = []
    for i in range(n):
        if errors[i] is not None:
            out.append(ProjectionResult(None, float("nan"), int(iters[i]), traj[i] if traj else None, errors[i]))
        else:
            out.append(ProjectionResult(best_x[i], float(best_f[i]), int(iters[i]), traj[i] if traj else None))
    return out


def project(field, pose, cfg: ProjectionConfig | None = None) -> ProjectionResult:
    """Project one pose; raises instead of returning an error result."""
    res = project_batch(field, np.asarray(pose, dtype=np.float64)[None], cfg)[0]
    if res.error is not None:
        raise res.error
    return res


class TargetDistanceField:
    """Analytic field ``f(theta) = pose_distance(theta, target)``.

    The gradient is the ambient derivative of the closed form, so it has a
    radial component off the sphere just like a learned field would.
    """

    def __init__(self, target, skel):
        self.target = np.asarray(target, dtype=np.float64)
        self.skel = skel

    def value_and_grad(self, poses):
        x = np.asarray(poses, dtype=np.float64)
        dot = np.sum(x * self.target, axis=-1)
        s = np.clip(np.abs(dot), 0.0, 1.0 - 1e-12)
        phi = np.arccos(s)
        w = 0.5 * self.skel.weights
        d = np.sqrt(np.sum(w * phi * phi, axis=-1))
        dphi = -np.sign(dot) / np.sqrt(1.0 - s * s)
        coef = np.where(d[..., None] > 0, w * phi * dphi / np.where(d > 0, d, 1.0)[..., None], 0.0)
        return d, coef[..., None] * self.target

    def value(self, pose) -> float:
        return float(self.value_and_grad(np.asarray(pose)[None])[0][0])

    def gradient(self, pose) -> np.ndarray:
        return self.value_and_grad(np.asarray(pose)[None])[1][0]
