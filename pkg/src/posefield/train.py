"""Curriculum training with sign-flip augmentation and Adam updates."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TIER_NAMES, PoseDataset, Tier
from .errors import ConfigError, NumericalError, TrainingAborted
from .field import FieldModel, evaluate, loss_and_param_grads, value_and_grad
from .so3 import as_rng, flip_signs

log = logging.getLogger(__name__)

TIER_ORDER = ("manifold", "far", "mid", "near")


@dataclass
class CurriculumStage:
    epochs: int
    mix: dict[str, float]

    def __post_init__(self):
        bad = set(self.mix) - set(TIER_ORDER)
        if bad:
            raise ConfigError(f"unknown tiers {sorted(bad)}")
        if self.epochs < 0 or any(v < 0 for v in self.mix.values()):
            raise ConfigError("epochs and tier fractions must be non-negative")
        if abs(sum(self.mix.values()) - 1.0) > 1e-9:
            raise ConfigError(f"tier fractions sum to {sum(self.mix.values())}, not 1")


def default_stages(epochs=(20, 20, 40)) -> list[CurriculumStage]:
    a, b, c = epochs
    return [
        CurriculumStage(a, {"manifold": 0.5, "far": 0.5}),
        CurriculumStage(b, {"manifold": 0.4, "far": 0.3, "mid": 0.3}),
        CurriculumStage(c, {"manifold": 0.3, "far": 0.3, "mid": 0.2, "near": 0.2}),
    ]


@dataclass
class TrainingConfig:
    stages: list[CurriculumStage] = field(default_factory=default_stages)
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_eik: float = 0.1
    flip_prob: float = 0.5
    seed: int = 0
    batches_per_epoch: int | None = None
    validate_every: int = 1

    def __post_init__(self):
        self.stages = [s if isinstance(s, CurriculumStage) else CurriculumStage(**s) for s in self.stages]
        if self.batch_size < 1 or self.lr <= 0 or self.eps <= 0:
            raise ConfigError("batch_size, lr and eps must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        return cls(**d)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """Bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("t must be >= 1")
    m = beta1 * state.m + (1.0 - beta1) * grads
    v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def augment_flip(poses, flip_prob: float, seed=None) -> np.ndarray:
    """Negate each quaternion independently with probability ``flip_prob``."""
    poses = np.asarray(poses, dtype=np.float64)
    mask = as_rng(seed).random(poses.shape[:-1]) < flip_prob
    return flip_signs(poses, mask)


def _tier_counts(mix: dict[str, float], batch: int) -> dict[str, int]:
    # largest-remainder rounding, ties to curriculum order
    raw = {t: mix.get(t, 0.0) * batch for t in TIER_ORDER}
    counts = {t: int(np.floor(r)) for t, r in raw.items()}
    left = batch - sum(counts.values())
    for t in sorted(TIER_ORDER, key=lambda t: -(raw[t] - counts[t]))[:left]:
        counts[t] += 1
    return counts


def validate(model: FieldModel, heldout: PoseDataset, chunk: int = 1024) -> dict[str, float]:
    if len(heldout) == 0:
        raise ConfigError("empty held-out set")
    f = np.empty(len(heldout))
    gnorm = np.empty(len(heldout))
    f_flip = np.empty(len(heldout))
    for s in range(0, len(heldout), chunk):
        x = heldout.poses[s:s + chunk]
        f[s:s + chunk], g = value_and_grad(model, x)
        gnorm[s:s + chunk] = np.sqrt(np.sum(g * g, axis=(1, 2)))
        f_flip[s:s + chunk] = evaluate(model, -x)
    on = heldout.distances == 0
    off = ~on
    d = heldout.distances

    def mean(a):
        return float(np.mean(a)) if a.size else 0.0

    return {
        "manifold_mean_f": mean(f[on]),
        "negative_mae": mean(np.abs(f[off] - d[off])),
        "eikonal_mean_dev": mean(np.abs(gnorm[off] - 1.0)),
        "flip_asymmetry": mean(np.abs(f - f_flip)),
    }


def train(model: FieldModel, ds: PoseDataset, cfg: TrainingConfig, heldout: PoseDataset | None = None,
          checkpoint=None):
    """Run every curriculum stage in order. Returns ``(trained_model, history)``.

    ``history`` holds one dict per epoch. On a non-finite loss a
    :class:`TrainingAborted` is raised carrying the last good model; if
    ``checkpoint`` is a path that model is also written there.
    """
    from .field import save_model

    if ds.skeleton.k != model.skeleton.k:
        raise ConfigError(f"dataset K={ds.skeleton.k} but model K={model.skeleton.k}")
    pools = {TIER_NAMES[t]: np.flatnonzero(ds.tiers == t) for t in Tier}
    for si, stage in enumerate(cfg.stages):
        for tier, frac in stage.mix.items():
            if frac > 0 and stage.epochs > 0 and len(pools[tier]) == 0:
                raise ConfigError(f"stage {si} needs tier '{tier}' which the dataset lacks")

    rng = as_rng(cfg.seed)
    model = model.copy()
    state = AdamState.zeros_like(model.params)
    per_epoch = cfg.batches_per_epoch or max(1, len(ds) // cfg.batch_size)
    history = []
    epoch = 0
    for si, stage in enumerate(cfg.stages):
        counts = _tier_counts(stage.mix, cfg.batch_size)
        for _ in range(stage.epochs):
            sums = np.zeros(2)
            seen = dict.fromkeys(TIER_ORDER, 0)
            n_seen = 0
            for _ in range(per_epoch):
                idx = np.concatenate(
                    [rng.choice(pools[t], counts[t]) for t in TIER_ORDER if counts[t] > 0]
                )
                x = augment_flip(ds.poses[idx], cfg.flip_prob, rng)
                try:
                    l_udf, l_eik, grads = loss_and_param_grads(model, x, ds.distances[idx], cfg.lambda_eik)
                except NumericalError as exc:
                    if checkpoint is not None:
                        save_model(model, checkpoint)
                    raise TrainingAborted(f"epoch {epoch}: {exc}", model=model, history=history) from exc
                params, state = adam_step(model.params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
                model.params[...] = params
                sums += (l_udf, l_eik)
                n_seen += len(idx)
                for t in TIER_ORDER:
                    seen[t] += counts[t]
            row = {"epoch": epoch, "stage": si,
                   "l_udf": float(sums[0] / n_seen), "l_eik": float(sums[1] / n_seen)}
            row.update({f"n_{t}": seen[t] for t in TIER_ORDER})
            if heldout is not None and (epoch + 1) % cfg.validate_every == 0:
                row.update(validate(model, heldout))
            history.append(row)
            log.info("epoch %d stage %d %s", epoch, si,
                     " ".join(f"{k}={v:.4g}" for k, v in row.items() if isinstance(v, float)))
            if checkpoint is not None:
                save_model(model, checkpoint)
            epoch += 1
    return model, history


HISTORY_FIELDS = ["epoch", "stage", "l_udf", "l_eik", "manifold_mean_f", "negative_mae",
                  "eikonal_mean_dev", "flip_asymmetry"] + [f"n_{t}" for t in TIER_ORDER]


def write_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, restval="")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def load_training_config(path) -> TrainingConfig:
    return TrainingConfig.from_dict(json.loads(Path(path).read_text()))
