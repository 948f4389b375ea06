"""Downstream uses of a trained field: denoising, partial fits, interpolation, sampling."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch, NumericalError, SamplingError
from .project import ProjectionConfig, batch_value_and_grad, project_batch
from .skeleton import Skeleton, fk_vjp, forward_kinematics, mean_joint_distance
from .so3 import NORM_EPS, normalize, perturb_pose, pose_distance, random_pose

log = logging.getLogger(__name__)


@dataclass
class DenoiseConfig:
    lambda_v: float = 1.0
    w_prior: float = 10.0
    lambda_t: float = 0.5
    lr: float = 1e-2
    steps: int = 300

    def __post_init__(self):
        if min(self.lambda_v, self.w_prior, self.lambda_t) < 0 or self.lr <= 0 or self.steps < 0:
            raise ConfigError("weights must be >= 0, lr > 0, steps >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _tangent(x, g):
    return g - np.sum(g * x, axis=-1, keepdims=True) * x


def _minimize(x0, free, energy_grad, cfg: DenoiseConfig):
    """Adam on ambient quaternion coordinates with per-step renormalization.

    ``free`` is a ``(B, K)`` mask of optimized joints; fixed joints are never
    written. Gradients are projected onto the sphere's tangent space before
    the update. Returns the lowest-energy iterate seen per batch element.
    """
    x = x0.copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_x, best_e = x.copy(), np.full(len(x), np.inf)
    fmask = free[..., None]
    for t in range(1, cfg.steps + 2):
        e, g = energy_grad(x)
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(g))):
            raise NumericalError(f"pose optimization diverged at step {t}")
        better = e < best_e
        best_x[better], best_e[better] = x[better], e[better]
        if t > cfg.steps:
            break
        g = np.where(fmask, _tangent(x, g), 0.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        step = cfg.lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
        moved = x - step
        n = np.linalg.norm(moved, axis=-1, keepdims=True)
        if np.any(n[free] < NORM_EPS):
            raise NumericalError("pose variable collapsed to zero norm")
        x = np.where(fmask, moved / np.where(n < NORM_EPS, 1.0, n), x)
    return best_x, best_e


def _prior_terms(field, x, weight):
    if weight == 0 or field is None:
        return 0.0, 0.0
    f, gf = batch_value_and_grad(field, x)
    return weight * f * f, (2.0 * weight * f)[:, None, None] * gf


def denoise_batch(seqs, observations, model, skel: Skeleton, cfg: DenoiseConfig | None = None):
    """Denoise ``S`` independent sequences in lockstep; shapes ``(S, T, K, 4)`` / ``(S, T, K, 3)``."""
    cfg = cfg or DenoiseConfig()
    seqs = np.asarray(seqs, dtype=np.float64)
    obs = np.asarray(observations, dtype=np.float64)
    if seqs.ndim != 4 or seqs.shape[2:] != (skel.k, 4):
        raise DimensionMismatch(f"sequence shape {seqs.shape} does not match K={skel.k}")
    if obs.shape != seqs.shape[:3] + (3,):
        raise DimensionMismatch(f"observations {obs.shape} do not match sequences {seqs.shape}")
    if model is not None and getattr(model, "skeleton", skel).k != skel.k:
        raise DimensionMismatch("model skeleton does not match")
    s, t_len = seqs.shape[:2]
    out = np.empty_like(seqs)
    free = np.ones((s, skel.k), dtype=bool)
    prev_pos = None
    for t in range(t_len):
        target = obs[:, t]
        ref = prev_pos

        def energy_grad(x, target=target, ref=ref):
            pos = forward_kinematics(x, skel)
            r = pos - target
            e = cfg.lambda_v * np.sum(r * r, axis=(1, 2))
            pbar = 2.0 * cfg.lambda_v * r
            if ref is not None and cfg.lambda_t > 0:
                dt = pos - ref
                e = e + cfg.lambda_t * np.sum(dt * dt, axis=(1, 2))
                pbar = pbar + 2.0 * cfg.lambda_t * dt
            _, g = fk_vjp(x, skel, pbar)
            ep, gp = _prior_terms(model, x, cfg.w_prior)
            return e + ep, g + gp

        out[:, t], _ = _minimize(seqs[:, t], free, energy_grad, cfg)
        prev_pos = forward_kinematics(out[:, t], skel)
    return out


def denoise(seq, observations, model, skel: Skeleton, cfg: DenoiseConfig | None = None) -> np.ndarray:
    """Fit each frame to observed joint positions under the learned prior.

    Frames are solved in order; frame ``t`` is pulled towards the joint
    positions of the already solved frame ``t - 1``. The prior contributes
    ``w_prior * f(theta)^2``, i.e. the prior weight scales with the distance.
    """
    return denoise_batch(np.asarray(seq)[None], np.asarray(observations)[None], model, skel, cfg)[0]


def partial_init(init_observed, mask, sigma: float = 0.05, seed=0) -> np.ndarray:
    """Start pose for a partial fit: observed joints kept, occluded joints near identity."""
    init = np.array(init_observed, dtype=np.float64)
    occluded = ~np.asarray(mask, dtype=bool)
    ident = np.zeros_like(init)
    ident[:, 0] = 1.0
    near = perturb_pose(ident, sigma, 1.0, seed)
    init[occluded] = near[occluded]
    return init


def fit_partial(frame_obs, mask, init, model, skel: Skeleton, cfg: DenoiseConfig | None = None) -> np.ndarray:
    """Solve only for occluded joints; the data term uses observed joints only."""
    cfg = cfg or DenoiseConfig()
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    init = np.asarray(init, dtype=np.float64)
    obs = np.asarray(frame_obs, dtype=np.float64)
    if mask.shape != (skel.k,) or init.shape != (skel.k, 4) or obs.shape != (skel.k, 3):
        raise DimensionMismatch("mask, init and observations must match the skeleton")
    if not mask.any():
        raise ConfigError("every joint is occluded")
    if mask.all():
        return init.copy()
    w_obs = mask.astype(np.float64)[None, :, None]

    def energy_grad(x):
        r = (forward_kinematics(x, skel) - obs) * w_obs
        _, g = fk_vjp(x, skel, 2.0 * cfg.lambda_v * r)
        ep, gp = _prior_terms(model, x, cfg.w_prior)
        return cfg.lambda_v * np.sum(r * r, axis=(1, 2)) + ep, g + gp

    out, _ = _minimize(init[None], ~mask[None], energy_grad, cfg)
    return out[0]


@dataclass
class Interpolation:
    frames: np.ndarray
    converged: bool


def interpolate(start, end, model, tau: float = 0.1, cfg: ProjectionConfig | None = None,
                tol: float = 1e-2, max_frames: int = 200, skel: Skeleton | None = None) -> Interpolation:
    """Walk from the projected start towards the projected end.

    Each frame is ``prev + tau * (end' - prev)`` per joint (end quaternions
    sign-aligned with ``prev``), renormalized and projected. A projected frame
    that is not strictly closer to ``end'`` is rejected and the step retried
    with twice the blend factor. Stops once within ``tol`` of ``end'``.
    """
    if not 0 < tau <= 1:
        raise ConfigError("tau must lie in (0, 1]")
    cfg = cfg or ProjectionConfig()
    skel = skel or model.skeleton
    ends = project_batch(model, np.stack([start, end]), cfg)
    for r in ends:
        if r.error is not None:
            raise r.error
    first, last = ends[0].pose, ends[1].pose
    frames = [first]
    cur = first
    dist = pose_distance(cur, last, skel)
    while dist >= tol:
        if len(frames) >= max_frames - 1:
            log.warning("interpolation stopped at %d frames, %.3g from the end pose", len(frames), dist)
            return Interpolation(np.stack(frames), False)
        step = tau
        while True:
            aligned = np.where(np.sum(cur * last, axis=-1, keepdims=True) < 0, -last, last)
            blend = normalize(cur + step * (aligned - cur))
            nxt = project_batch(model, blend[None], cfg)[0]
            if nxt.error is not None:
                raise nxt.error
            nd = pose_distance(nxt.pose, last, skel)
            if nd < dist or step >= 1.0:
                break
            step = min(1.0, 2.0 * step)
        if nd >= dist:
            # even the full step did not get closer: finish on the end pose
            break
        cur, dist = nxt.pose, nd
        if dist < tol:
            break
        frames.append(cur)
    frames.append(last)
    return Interpolation(np.stack(frames), True)


def sample_poses(model, n: int, cfg: ProjectionConfig | None = None, seed: int = 0,
                 max_attempts: int = 20, k: int | None = None) -> np.ndarray:
    """Project uniform random poses; resample slots whose projection stalls above ``tol``.

    Slot ``i`` on attempt ``a`` draws from ``default_rng([seed, i, a])``, so the
    result does not depend on batching.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    cfg = cfg or ProjectionConfig()
    k = k or model.skeleton.k
    out = np.full((n, k, 4), np.nan)
    pending = np.arange(n)
    for attempt in range(max_attempts):
        if pending.size == 0:
            break
        starts = np.stack([random_pose(k, np.random.default_rng([seed, int(i), attempt])) for i in pending])
        res = project_batch(model, starts, cfg)
        ok = np.array([r.error is None and r.value < cfg.tol for r in res])
        for i, r in zip(pending[ok], np.asarray(res, dtype=object)[ok]):
            out[i] = r.pose
        pending = pending[~ok]
    if pending.size:
        done = np.setdiff1d(np.arange(n), pending)
        raise SamplingError(f"{pending.size} of {n} samples failed after {max_attempts} attempts",
                            partial=out[done])
    return out


def apd(samples, skel: Skeleton) -> float:
    """Average over unordered pairs of the mean per-joint position distance."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 2:
        raise ConfigError("APD needs at least two samples")
    pos = forward_kinematics(samples, skel)
    total, pairs = 0.0, 0
    for i in range(len(pos) - 1):
        d = mean_joint_distance(pos[i + 1:], pos[i])
        total += float(np.sum(d))
        pairs += len(d)
    return total / pairs


def smoothness(seq, skel: Skeleton) -> tuple[float, float]:
    """Mean and (population) standard deviation of consecutive-frame joint distances."""
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) < 2:
        raise ConfigError("smoothness needs at least two frames")
    d = consecutive_distances(seq, skel)
    return float(np.mean(d)), float(np.std(d))


def consecutive_distances(seq, skel: Skeleton) -> np.ndarray:
    pos = forward_kinematics(np.asarray(seq, dtype=np.float64), skel)
    return np.atleast_1d(mean_joint_distance(pos[1:], pos[:-1]))
