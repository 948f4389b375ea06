"""Hierarchical neural distance field over SO(3)^K.

Each joint has its own two-layer encoder that sees the joint quaternion and,
for non-root joints, the parent's feature vector. The concatenated features
go through a five-layer head. Every layer is affine followed by a softplus
with ``beta = 100``, including the scalar output, which keeps ``f >= 0``.

Derivatives are hand written for this architecture only:

* ``input_gradient``: reverse mode with respect to the ``4K`` quaternion
  coordinates.
* ``loss_and_param_grads``: the Eikonal term needs the parameter gradient of
  a function of ``grad_theta f``. For a fixed input direction ``u`` the
  identity ``d/dP (u . grad_theta f) = d/dP (J f u)`` lets us push ``u``
  forward as a tangent through the cached activations and then run a single
  reverse sweep over the (primal, tangent) pairs.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ChecksumMismatch, FormatError, NumericalError, ShapeMismatch, TruncatedFile, VersionMismatch
from .skeleton import Skeleton
from .so3 import as_rng

BETA = 100.0


def softplus(z, beta=BETA):
    return np.logaddexp(0.0, beta * z) / beta


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act(z, beta):
    return softplus(z, beta), _sigmoid(beta * z)


@dataclass(eq=False)
class FieldModel:
    skeleton: Skeleton
    feat: int = 6
    enc_hidden: int = 32
    head_width: int = 256
    head_layers: int = 5
    beta: float = BETA
    params: np.ndarray | None = None
    enc: list = field(init=False, repr=False)
    head: list = field(init=False, repr=False)

    def __post_init__(self):
        if min(self.feat, self.enc_hidden, self.head_width) < 1 or self.head_layers < 1:
            raise ValueError("layer widths must be >= 1")
        shapes = self.layer_shapes()
        n = sum(o * i + o for o, i in shapes)
        if self.params is None:
            self.params = np.zeros(n)
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ShapeMismatch(f"expected {n} parameters, got {self.params.shape}")
        self._bind()

    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(fan_out, fan_in)`` per layer: encoders in joint order, then the head."""
        shapes = []
        for par in self.skeleton.parents:
            shapes.append((self.enc_hidden, 4 if par < 0 else 4 + self.feat))
            shapes.append((self.feat, self.enc_hidden))
        widths = [self.feat * self.skeleton.k] + [self.head_width] * (self.head_layers - 1) + [1]
        shapes += [(widths[i + 1], widths[i]) for i in range(self.head_layers)]
        return shapes

    def _bind(self):
        views, pos = [], 0
        for o, i in self.layer_shapes():
            w = self.params[pos:pos + o * i].reshape(o, i)
            pos += o * i
            views.append((w, self.params[pos:pos + o]))
            pos += o
        k = self.skeleton.k
        self.enc = [views[2 * j:2 * j + 2] for j in range(k)]
        self.head = views[2 * k:]

    @property
    def n_params(self) -> int:
        return self.params.size

    def copy(self) -> "FieldModel":
        return self.with_params(self.params.copy())

    def with_params(self, params) -> "FieldModel":
        return self._sharing(np.array(params, dtype=np.float64))

    def _sharing(self, params) -> "FieldModel":
        # layer views alias ``params`` (no copy)
        return FieldModel(self.skeleton, self.feat, self.enc_hidden, self.head_width,
                          self.head_layers, self.beta, params)

    # DifferentiableField interface
    def value(self, pose) -> float:
        return float(evaluate(self, np.asarray(pose)[None])[0])

    def gradient(self, pose) -> np.ndarray:
        return input_gradient(self, pose)

    def value_and_grad(self, poses):
        return value_and_grad(self, poses)


def init_model(skel: Skeleton, feat: int = 6, head_width: int = 256, seed=0,
               enc_hidden: int = 32, head_layers: int = 5) -> FieldModel:
    """Glorot-uniform weights, zero biases, output bias set so f(identity) = softplus(0)."""
    rng = as_rng(seed)
    model = FieldModel(skel, feat, enc_hidden, head_width, head_layers)
    for layer in [l for e in model.enc for l in e] + model.head:
        w, _ = layer
        s = np.sqrt(6.0 / (w.shape[0] + w.shape[1]))
        w[...] = rng.uniform(-s, s, w.shape)
    ident = np.zeros((1, skel.k, 4))
    ident[..., 0] = 1.0
    z_out = _forward(model, ident).z[-1][0, 0]
    model.head[-1][1][...] = -z_out
    return model


# -- forward / reverse / tangent passes --------------------------------------


class Trace:
    """Per-layer inputs, pre-activations and activation slopes of one forward call.

    Layers are stored in evaluation order: encoder layers for joint 0, 1, ...
    followed by the head.
    """

    __slots__ = ("x", "z", "s", "f", "feats")

    def __init__(self):
        self.x, self.z, self.s = [], [], []
        self.f = None
        self.feats = None


def _check_batch(model, poses):
    x = np.asarray(poses, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (model.skeleton.k, 4):
        raise ShapeMismatch(f"poses of shape {x.shape} do not match K={model.skeleton.k}")
    return x


def _forward(model: FieldModel, poses) -> Trace:
    tr = Trace()
    beta = model.beta
    feats = [None] * model.skeleton.k
    for j, par in enumerate(model.skeleton.parents):
        h = poses[:, j] if par < 0 else np.concatenate([poses[:, j], feats[par]], axis=1)
        for w, b in model.enc[j]:
            z = h @ w.T + b
            tr.x.append(h)
            tr.z.append(z)
            h, s = _act(z, beta)
            tr.s.append(s)
        feats[j] = h
    h = np.concatenate(feats, axis=1)
    for w, b in model.head:
        z = h @ w.T + b
        tr.x.append(h)
        tr.z.append(z)
        h, s = _act(z, beta)
        tr.s.append(s)
    tr.f = h[:, 0]
    tr.feats = feats
    if not np.all(np.isfinite(tr.f)):
        raise NumericalError("non-finite field value")
    return tr


def _tangent(model: FieldModel, tr: Trace, direction) -> list:
    """Push an input direction ``(B, K, 4)`` forward; returns per-layer ``(x_dot, z_dot)``."""
    out = []
    feats = [None] * model.skeleton.k
    li = 0
    for j, par in enumerate(model.skeleton.parents):
        h = direction[:, j] if par < 0 else np.concatenate([direction[:, j], feats[par]], axis=1)
        for w, _ in model.enc[j]:
            zd = h @ w.T
            out.append((h, zd))
            h = tr.s[li] * zd
            li += 1
        feats[j] = h
    h = np.concatenate(feats, axis=1)
    for w, _ in model.head:
        zd = h @ w.T
        out.append((h, zd))
        h = tr.s[li] * zd
        li += 1
    return out


def _backward(model: FieldModel, tr: Trace, f_bar, tangent=None, fdot_bar=0.0,
              want_params=True, want_input=False):
    """Reverse sweep seeded with ``f_bar`` on f and ``fdot_bar`` on its tangent.

    Returns ``(param_grad or None, input_grad or None)``.
    """
    beta = model.beta
    k = model.skeleton.k
    n_enc = 2 * k
    grad = np.zeros(model.n_params) if want_params else None
    gviews = model._sharing(grad) if want_params else None
    dual = tangent is not None

    def layer(li, w, gw_gb, a_bar, ad_bar):
        s = tr.s[li]
        z_bar = a_bar * s
        zd_bar = None
        if dual:
            zd = tangent[li][1]
            z_bar = z_bar + ad_bar * (beta * s * (1.0 - s)) * zd
            zd_bar = ad_bar * s
        if gw_gb is not None:
            gw, gb = gw_gb
            gw += z_bar.T @ tr.x[li]
            gb += z_bar.sum(axis=0)
            if dual:
                gw += zd_bar.T @ tangent[li][0]
        return z_bar @ w, (zd_bar @ w if dual else None)

    bsz = len(tr.f)
    a_bar = np.broadcast_to(np.asarray(f_bar, dtype=np.float64), (bsz,))[:, None]
    ad_bar = np.broadcast_to(np.asarray(fdot_bar, dtype=np.float64), (bsz,))[:, None] if dual else None
    for hi in range(len(model.head) - 1, -1, -1):
        li = n_enc + hi
        g = gviews.head[hi] if want_params else None
        a_bar, ad_bar = layer(li, model.head[hi][0], g, a_bar, ad_bar)

    nf = model.feat
    v_bar = [a_bar[:, j * nf:(j + 1) * nf] for j in range(k)]
    vd_bar = [ad_bar[:, j * nf:(j + 1) * nf] for j in range(k)] if dual else [None] * k
    x_bar = np.zeros((bsz, k, 4)) if want_input else None
    for j in range(k - 1, -1, -1):
        par = model.skeleton.parents[j]
        h_bar, hd_bar = v_bar[j], vd_bar[j]
        for m in (1, 0):
            g = gviews.enc[j][m] if want_params else None
            h_bar, hd_bar = layer(2 * j + m, model.enc[j][m][0], g, h_bar, hd_bar)
        if want_input:
            x_bar[:, j] = h_bar[:, :4]
        if par >= 0:
            v_bar[par] = v_bar[par] + h_bar[:, 4:]
            if dual:
                vd_bar[par] = vd_bar[par] + hd_bar[:, 4:]
    return grad, x_bar


def forward(model: FieldModel, pose):
    """Field value and evaluation trace for one pose ``(K, 4)`` or a batch."""
    x = np.asarray(pose, dtype=np.float64)
    single = x.ndim == 2
    tr = _forward(model, _check_batch(model, x[None] if single else x))
    return (float(tr.f[0]) if single else tr.f.copy()), tr


def evaluate(model: FieldModel, poses) -> np.ndarray:
    return _forward(model, _check_batch(model, poses)).f.copy()


def value_and_grad(model: FieldModel, poses):
    """Values ``(B,)`` and input gradients ``(B, K, 4)`` for a batch."""
    tr = _forward(model, _check_batch(model, poses))
    _, g = _backward(model, tr, 1.0, want_params=False, want_input=True)
    if not np.all(np.isfinite(g)):
        raise NumericalError("non-finite input gradient")
    return tr.f.copy(), g


def input_gradient(model: FieldModel, pose) -> np.ndarray:
    """d f / d theta over the 4K ambient coordinates, shaped like the pose."""
    x = np.asarray(pose, dtype=np.float64)
    if x.ndim == 2:
        return value_and_grad(model, x[None])[1][0]
    return value_and_grad(model, x)[1]


def loss_and_param_grads(model: FieldModel, poses, labels, lambda_eik: float = 0.1):
    """Summed distance and Eikonal losses with their exact parameter gradient.

    ``L_udf = sum |f - d|`` over the batch, ``L_eik = sum_{d != 0} (|grad f| - 1)^2``;
    the returned gradient is that of ``L_udf + lambda_eik * L_eik``.
    """
    x = _check_batch(model, poses)
    d = np.asarray(labels, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise ValueError("empty batch")
    tr = _forward(model, x)
    _, g = _backward(model, tr, 1.0, want_params=False, want_input=True)
    norm = np.sqrt(np.sum(g * g, axis=(1, 2)))
    off = d != 0
    resid = np.where(off, norm - 1.0, 0.0)
    l_udf = float(np.sum(np.abs(tr.f - d)))
    l_eik = float(np.sum(resid * resid))
    if not (np.isfinite(l_udf) and np.isfinite(l_eik)):
        raise NumericalError("non-finite loss")
    f_bar = np.sign(tr.f - d)
    if lambda_eik != 0 and np.any(off):
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(off & (norm > 0), 2.0 * resid / safe, 0.0)
        tangent = _tangent(model, tr, coef[:, None, None] * g)
        grad, _ = _backward(model, tr, f_bar, tangent, fdot_bar=lambda_eik)
    else:
        grad, _ = _backward(model, tr, f_bar)
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite parameter gradient")
    return l_udf, l_eik, grad


# -- checkpoint format --------------------------------------------------------

MAGIC = b"PNMD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIIQdI")


def save_model(model: FieldModel, path) -> None:
    skel_blob = json.dumps(model.skeleton.to_dict(), sort_keys=True).encode()
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, model.skeleton.k, model.feat, model.enc_hidden,
                        model.head_width, model.head_layers, model.n_params, model.beta, len(skel_blob))
    body = head + skel_blob + model.params.astype("<f8").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_model(path, skel: Skeleton | None = None) -> FieldModel:
    """Read a checkpoint; ``skel``, when given, must match the stored K."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedFile(f"{path}: shorter than the header")
    magic, version, k, feat, enc_hidden, width, layers, n, beta, blob_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    expect = _HEADER.size + blob_len + 8 * n + 4
    if len(raw) < expect:
        raise TruncatedFile(f"{path}: {len(raw)} bytes, expected {expect}")
    if len(raw) > expect:
        raise FormatError(f"{path}: trailing bytes")
    (crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != crc:
        raise ChecksumMismatch(f"{path}: CRC32 mismatch")
    stored = Skeleton.from_dict(json.loads(raw[_HEADER.size:_HEADER.size + blob_len]))
    if skel is not None:
        if skel.k != k or not np.array_equal(skel.parents, stored.parents):
            raise ShapeMismatch(f"{path}: checkpoint K={k} does not fit skeleton K={skel.k}")
    params = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size + blob_len).copy()
    return FieldModel(skel or stored, feat, enc_hidden, width, layers, beta, params)
