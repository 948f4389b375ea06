"""Synthetic plausible-pose manifold, distance labelling and dataset files."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    FormatError,
    InsufficientData,
    TruncatedFile,
    VersionMismatch,
)
from .skeleton import Skeleton, binary_tree
from .so3 import as_rng, axis_angle_to_quat, canonicalize, perturb_pose, pose_distance, random_axes


class Tier(IntEnum):
    MANIFOLD = 0
    FAR = 1
    MID = 2
    NEAR = 3


TIER_NAMES = {t: t.name.lower() for t in Tier}
DEFAULT_SIGMAS = {Tier.FAR: 0.8, Tier.MID: 0.4, Tier.NEAR: 0.15}


@dataclass(eq=False)
class ManifoldSpec:
    """Smooth map from latents ``u in [0, 1]^m`` to poses.

    Joint ``k`` rotates about ``axes[k]`` by
    ``a_k(u) = center[k] + sum_j amp[k, j] * sin(freq[k, j] * u_j + phase[k, j])``,
    clipped to ``[lo[k], hi[k]]``.
    """

    axes: np.ndarray
    center: np.ndarray
    amp: np.ndarray
    freq: np.ndarray
    phase: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        for name in ("axes", "center", "amp", "freq", "phase", "lo", "hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.axes = self.axes / np.linalg.norm(self.axes, axis=-1, keepdims=True)

    @property
    def k(self) -> int:
        return len(self.center)

    @property
    def latent_dim(self) -> int:
        return self.amp.shape[1]

    def angles(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        s = np.sin(u[..., None, :] * self.freq + self.phase)
        return np.clip(self.center + np.sum(self.amp * s, axis=-1), self.lo, self.hi)

    def poses(self, u) -> np.ndarray:
        return axis_angle_to_quat(self.axes, self.angles(u))

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
            **{n: getattr(self, n).tolist() for n in ("axes", "center", "amp", "freq", "phase", "lo", "hi")},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifoldSpec":
        return cls(**{n: d[n] for n in ("axes", "center", "amp", "freq", "phase", "lo", "hi")}, seed=d.get("seed"))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def random_manifold_spec(k: int = 8, latent_dim: int = 2, seed=0) -> ManifoldSpec:
    """Draw a bounded random manifold; the clip range is never active."""
    rng = as_rng(seed)
    axes = random_axes(rng, (k,))
    center = rng.uniform(-0.5, 0.5, k)
    amp = rng.uniform(0.2, 0.6, (k, latent_dim)) * rng.choice([-1.0, 1.0], (k, latent_dim))
    freq = rng.uniform(np.pi / 2, 2 * np.pi, (k, latent_dim))
    phase = rng.uniform(0, 2 * np.pi, (k, latent_dim))
    reach = np.sum(np.abs(amp), axis=1)
    return ManifoldSpec(axes, center, amp, freq, phase, center - reach, center + reach,
                        seed=seed if isinstance(seed, int) else None)


def save_manifold_spec(spec: ManifoldSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2))


def load_manifold_spec(path) -> ManifoldSpec:
    return ManifoldSpec.from_dict(json.loads(Path(path).read_text()))


def sample_manifold(spec: ManifoldSpec, n: int, seed=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    u = as_rng(seed).random((n, spec.latent_dim))
    return spec.poses(u)


def build_negatives(manifold, sigmas, per_sigma: int, seed=None, joint_prob: float = 0.5):
    """Perturb uniformly chosen manifold poses once per sigma.

    Returns ``(poses, sigma_index)`` with ``per_sigma`` rows for each sigma in
    order; ``sigma_index[i]`` says which sigma produced row ``i``.
    """
    manifold = np.asarray(manifold, dtype=np.float64)
    if len(manifold) == 0:
        raise InsufficientData("empty manifold set")
    rng = as_rng(seed)
    out, which = [], []
    for i, sigma in enumerate(sigmas):
        base = manifold[rng.integers(0, len(manifold), per_sigma)]
        out.append(perturb_pose(base, float(sigma), joint_prob, rng))
        which.append(np.full(per_sigma, i, dtype=np.int64))
    if not out:
        return np.empty((0,) + manifold.shape[1:]), np.empty(0, dtype=np.int64)
    return np.concatenate(out), np.concatenate(which)


def _stable_smallest(d: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` smallest entries per row; ties go to the lower index."""
    if n >= d.shape[1]:
        return np.argsort(d, axis=1, kind="stable")
    part = np.argpartition(d, n - 1, axis=1)[:, :n]
    thr = np.take_along_axis(d, part, axis=1).max(axis=1)
    n_lt = np.sum(d < thr[:, None], axis=1)
    n_eq = np.sum(d == thr[:, None], axis=1)
    for r in np.flatnonzero(n_lt + n_eq > n):
        lt = np.flatnonzero(d[r] < thr[r])
        eq = np.flatnonzero(d[r] == thr[r])[: n - n_lt[r]]
        part[r] = np.concatenate([lt, eq])
    return part


def _mean_k_smallest(dist: np.ndarray, k: int) -> np.ndarray:
    return np.mean(np.sort(dist, axis=-1)[..., :k], axis=-1)


def _check_knn_args(queries, manifold, skel):
    q = np.asarray(queries, dtype=np.float64)
    single = q.ndim == 2
    q = q[None] if single else q
    m = np.asarray(manifold, dtype=np.float64)
    if q.shape[-2:] != (skel.k, 4) or m.shape[-2:] != (skel.k, 4):
        raise DimensionMismatch("query/manifold poses do not match skeleton K")
    return q, m, single


def knn_label(query, manifold, kprime: int, k: int, skel: Skeleton, chunk: int = 256):
    """Two-stage kNN distance label.

    Stage one keeps the ``kprime`` nearest manifold poses by L2 on
    sign-canonicalized, flattened quaternions, each joint scaled by
    ``sqrt(w_i / 2)`` so the pre-filter weighs joints like the metric it
    approximates. Stage two re-ranks the candidates by :func:`pose_distance`
    and averages the ``k`` smallest. Accepts one pose or a batch of queries.
    """
    if not kprime >= k >= 1:
        raise ValueError("need kprime >= k >= 1")
    q, m, single = _check_knn_args(query, manifold, skel)
    if len(m) < kprime:
        raise InsufficientData(f"manifold has {len(m)} poses, kprime={kprime}")
    scale = np.sqrt(0.5 * skel.weights)[:, None]
    flat_m = (canonicalize(m) * scale).reshape(len(m), -1)
    sq_m = np.sum(flat_m * flat_m, axis=1)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        qc = q[s:s + chunk]
        flat_q = (canonicalize(qc) * scale).reshape(len(qc), -1)
        l2 = sq_m[None, :] - 2.0 * flat_q @ flat_m.T + np.sum(flat_q * flat_q, axis=1)[:, None]
        cand = _stable_smallest(l2, kprime)
        geo = pose_distance(qc[:, None], m[cand], skel)
        out[s:s + chunk] = _mean_k_smallest(geo, k)
    return float(out[0]) if single else out


def exact_label(query, manifold, k: int, skel: Skeleton, chunk: int = 64):
    """Brute-force mean of the ``k`` smallest pose distances over the whole manifold."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q, m, single = _check_knn_args(query, manifold, skel)
    if len(m) < k:
        raise InsufficientData(f"manifold has {len(m)} poses, k={k}")
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        geo = pose_distance(q[s:s + chunk, None], m[None], skel)
        out[s:s + chunk] = _mean_k_smallest(geo, k)
    return float(out[0]) if single else out


def latent_grid(latent_dim: int, grid: int) -> np.ndarray:
    axes = [np.linspace(0.0, 1.0, grid)] * latent_dim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, latent_dim)


class ManifoldOracle:
    """Distance to the true manifold, as the minimum over a dense latent grid."""

    def __init__(self, spec: ManifoldSpec, skel: Skeleton, grid: int = 200):
        if grid < 2:
            raise ValueError("grid must be >= 2")
        self.skel = skel
        self.grid = grid
        self.points = spec.poses(latent_grid(spec.latent_dim, grid))

    def __call__(self, query, chunk: int = 8):
        q = np.asarray(query, dtype=np.float64)
        single = q.ndim == 2
        q = q[None] if single else q
        out = np.empty(len(q))
        for s in range(0, len(q), chunk):
            out[s:s + chunk] = pose_distance(q[s:s + chunk, None], self.points[None], self.skel).min(axis=1)
        return float(out[0]) if single else out


def oracle_manifold_distance(query, spec: ManifoldSpec, grid: int = 200, skel: Skeleton | None = None):
    skel = skel or binary_tree(spec.k)
    return ManifoldOracle(spec, skel, grid)(query)


# -- dataset container and file format ---------------------------------------

MAGIC = b"PNDF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(eq=False)
class PoseDataset:
    skeleton: Skeleton
    poses: np.ndarray
    distances: np.ndarray
    tiers: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.skeleton.k
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, k, 4)
        self.distances = np.asarray(self.distances, dtype=np.float64).reshape(-1)
        self.tiers = np.asarray(self.tiers, dtype=np.uint8).reshape(-1)
        if not len(self.poses) == len(self.distances) == len(self.tiers):
            raise DimensionMismatch("poses, distances and tiers differ in length")
        self.meta = dict(self.meta)
        self.meta["counts"] = self.counts()

    def __len__(self) -> int:
        return len(self.poses)

    def counts(self) -> dict[str, int]:
        return {TIER_NAMES[t]: int(np.sum(self.tiers == t)) for t in Tier}

    def subset(self, idx) -> "PoseDataset":
        meta = {k: v for k, v in self.meta.items() if k != "counts"}
        return PoseDataset(self.skeleton, self.poses[idx], self.distances[idx], self.tiers[idx], meta)

    def equals(self, other: "PoseDataset") -> bool:
        return (
            self.skeleton.same_as(other.skeleton)
            and np.array_equal(self.poses, other.poses)
            and np.array_equal(self.distances, other.distances)
            and np.array_equal(self.tiers, other.tiers)
        )


def poses_dataset(poses, skel: Skeleton, distances=None, meta=None) -> PoseDataset:
    """Wrap bare poses (e.g. a motion sequence) as a dataset file payload."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, skel.k, 4)
    d = np.zeros(len(poses)) if distances is None else distances
    tiers = np.where(np.asarray(d) == 0, Tier.MANIFOLD, Tier.FAR)
    return PoseDataset(skel, poses, d, tiers, meta or {})


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(ds: PoseDataset, path) -> None:
    """Write the binary payload plus a JSON sidecar with skeleton and metadata."""
    path = Path(path)
    k, n = ds.skeleton.k, len(ds)
    rec = np.zeros(n, dtype=np.dtype([("q", "<f8", (k * 4,)), ("d", "<f8"), ("t", "u1")]))
    rec["q"] = ds.poses.reshape(n, k * 4)
    rec["d"] = ds.distances
    rec["t"] = ds.tiers
    body = _HEADER.pack(MAGIC, FORMAT_VERSION, k, n) + rec.tobytes()
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    sidecar_path(path).write_text(
        json.dumps({"format_version": FORMAT_VERSION, "skeleton": ds.skeleton.to_dict(), "meta": ds.meta},
                   indent=2, sort_keys=True)
    )


def load_dataset(path, skel: Skeleton | None = None) -> PoseDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the header")
    magic, version, k, n = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    rec_t = np.dtype([("q", "<f8", (k * 4,)), ("d", "<f8"), ("t", "u1")])
    expect = _HEADER.size + n * rec_t.itemsize + 4
    if len(raw) < expect:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, expected {expect}")
    if len(raw) > expect:
        raise FormatError(f"{path}: {len(raw) - expect} trailing bytes")
    body = raw[:-4]
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    rec = np.frombuffer(body, dtype=rec_t, offset=_HEADER.size, count=n)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        info = json.loads(side.read_text())
        meta = info.get("meta", {})
        if skel is None:
            skel = Skeleton.from_dict(info["skeleton"])
    skel = skel or binary_tree(k)
    if skel.k != k:
        raise DimensionMismatch(f"{path}: file has K={k}, skeleton has K={skel.k}")
    meta = {key: v for key, v in meta.items() if key != "counts"}
    return PoseDataset(skel, rec["q"].reshape(n, k, 4).copy(), rec["d"].copy(), rec["t"].copy(), meta)


def generate_dataset(
    spec: ManifoldSpec,
    skel: Skeleton,
    n_manifold: int,
    per_sigma: int,
    sigmas: dict | None = None,
    kprime: int = 500,
    k: int = 5,
    joint_prob: float = 0.5,
    seed=0,
) -> PoseDataset:
    """Manifold samples labelled 0 plus kNN-labelled perturbed negatives."""
    sigmas = dict(DEFAULT_SIGMAS if sigmas is None else sigmas)
    rng = as_rng(seed)
    manifold = sample_manifold(spec, n_manifold, rng)
    tiers_order = list(sigmas)
    neg, which = build_negatives(manifold, [sigmas[t] for t in tiers_order], per_sigma, rng, joint_prob)
    labels = knn_label(neg, manifold, kprime, k, skel) if len(neg) else np.empty(0)
    neg_tiers = np.array([int(tiers_order[i]) for i in which], dtype=np.uint8)
    meta = {
        "seed": seed if isinstance(seed, int) else None,
        "spec_hash": spec.digest(),
        "sigmas": {TIER_NAMES[Tier(t)]: float(s) for t, s in sigmas.items()},
        "kprime": kprime,
        "k": k,
        "joint_prob": joint_prob,
    }
    return PoseDataset(
        skel,
        np.concatenate([manifold, neg]),
        np.concatenate([np.zeros(n_manifold), labels]),
        np.concatenate([np.zeros(n_manifold, dtype=np.uint8), neg_tiers]),
        meta,
    )
