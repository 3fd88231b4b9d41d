"""Minimal differentiable-network substrate.

Everything the generator and discriminator are built from: a handful of layer
types with hand-written backward passes, BCE/MSE losses, and Adam with global
gradient clipping and L2 regularization.

Conventions: parameters are stored as float32 (the checkpoint payload format),
all arithmetic runs in float64. Dense layers take (batch, features); conv,
pooling and batch-norm layers take (batch, channels, time).
"""

from __future__ import annotations

import hashlib
import json
from typing import BinaryIO

import numpy as np

from .errors import InvalidInputError, RunStateError, TrainingError

F32 = np.float32
F64 = np.float64


class Param:
    """A named trainable array. `value` is float32 storage, `grad` float64."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=F32)
        self.grad = None

    @property
    def v64(self) -> np.ndarray:
        return self.value.astype(F64)

    def assign(self, value: np.ndarray) -> None:
        self.value = np.ascontiguousarray(value, dtype=F32)

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


def sigmoid(x):
    x = np.asarray(x, dtype=F64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=F64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class Layer:
    """Base layer: forward caches whatever backward needs."""

    def params(self) -> list[Param]:
        return []

    def state(self) -> list[Param]:
        """Trainable params plus non-trainable buffers (for checkpointing)."""
        return self.params()

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        scale = np.sqrt(2.0 / n_in)
        self.w = Param(f"{name}.w", rng.normal(0.0, scale, size=(n_in, n_out)))
        self.b = Param(f"{name}.b", np.zeros(n_out))
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        if x.ndim != 2 or x.shape[1] != self.w.value.shape[0]:
            raise InvalidInputError(
                f"dense expects (batch, {self.w.value.shape[0]}), got {x.shape}"
            )
        self._x = x
        return x @ self.w.v64 + self.b.v64

    def backward(self, dy):
        if self._x is None:
            raise RunStateError("backward before forward")
        dy = np.asarray(dy, dtype=F64)
        self.w.grad = self._x.T @ dy
        self.b.grad = dy.sum(axis=0)
        return dy @ self.w.v64.T


class Conv1d(Layer):
    """Valid 1-D convolution over the time axis, optional zero padding."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None, name: str = "conv"):
        if rng is None:
            rng = np.random.default_rng(0)
        scale = np.sqrt(2.0 / (in_ch * kernel))
        self.w = Param(f"{name}.w", rng.normal(0.0, scale, size=(out_ch, in_ch, kernel)))
        self.b = Param(f"{name}.b", np.zeros(out_ch))
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self._cols = None
        self._x_shape = None

    def params(self):
        return [self.w, self.b]

    def _col_index(self, t_out: int) -> np.ndarray:
        # (kernel, t_out) gather index into the padded time axis
        return np.arange(self.kernel)[:, None] + np.arange(t_out)[None, :] * self.stride

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        out_ch, in_ch, k = self.w.value.shape
        if x.ndim != 3 or x.shape[1] != in_ch:
            raise InvalidInputError(f"conv1d expects (batch, {in_ch}, time), got {x.shape}")
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad)))
        b, _, t = x.shape
        t_out = (t - k) // self.stride + 1
        if t_out < 1:
            raise InvalidInputError(f"conv1d input too short: {t} samples for kernel {k}")
        cols = x[:, :, self._col_index(t_out)]          # (b, in_ch, k, t_out)
        self._cols = cols
        self._x_shape = x.shape
        w2 = self.w.v64.reshape(out_ch, in_ch * k)
        y = np.einsum("oc,bct->bot", w2, cols.reshape(b, in_ch * k, t_out))
        return y + self.b.v64[None, :, None]

    def backward(self, dy):
        if self._cols is None:
            raise RunStateError("backward before forward")
        dy = np.asarray(dy, dtype=F64)
        out_ch, in_ch, k = self.w.value.shape
        b, _, _, t_out = self._cols.shape
        cols2 = self._cols.reshape(b, in_ch * k, t_out)
        self.w.grad = np.einsum("bot,bct->oc", dy, cols2).reshape(out_ch, in_ch, k)
        self.b.grad = dy.sum(axis=(0, 2))
        dcols = np.einsum("oc,bot->bct", self.w.v64.reshape(out_ch, in_ch * k), dy)
        dcols = dcols.reshape(b, in_ch, k, t_out)
        dx = np.zeros(self._x_shape, dtype=F64)
        idx = self._col_index(t_out)
        np.add.at(dx, (slice(None), slice(None), idx), dcols)
        if self.pad:
            dx = dx[:, :, self.pad:-self.pad]
        return dx


class MaxPool1d(Layer):
    """Non-overlapping max pooling over time; remainder frames are dropped."""

    def __init__(self, width: int):
        self.width = width
        self._argmax = None
        self._in_t = None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        b, c, t = x.shape
        t_out = t // self.width
        if t_out < 1:
            raise InvalidInputError(f"maxpool input too short: {t} < {self.width}")
        xv = x[:, :, : t_out * self.width].reshape(b, c, t_out, self.width)
        self._argmax = xv.argmax(axis=3)
        self._in_t = t
        return xv.max(axis=3)

    def backward(self, dy):
        if self._argmax is None:
            raise RunStateError("backward before forward")
        dy = np.asarray(dy, dtype=F64)
        b, c, t_out = dy.shape
        dx = np.zeros((b, c, self._in_t), dtype=F64)
        flat = dx[:, :, : t_out * self.width].reshape(b, c, t_out, self.width)
        np.put_along_axis(flat, self._argmax[..., None], dy[..., None], axis=3)
        return dx


class MaxFeatureMap(Layer):
    """Channel-halving max: out[c] = max(x[c], x[c + C/2]). Optional LCNN detail."""

    def __init__(self):
        self._mask = None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        c = x.shape[1]
        if c % 2:
            raise InvalidInputError(f"max-feature-map needs even channels, got {c}")
        a, b = x[:, : c // 2], x[:, c // 2:]
        self._mask = a >= b
        return np.where(self._mask, a, b)

    def backward(self, dy):
        if self._mask is None:
            raise RunStateError("backward before forward")
        dy = np.asarray(dy, dtype=F64)
        return np.concatenate([dy * self._mask, dy * ~self._mask], axis=1)


class BatchNorm1d(Layer):
    """Per-channel batch norm over (batch, time); running stats for eval mode."""

    def __init__(self, ch: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.gamma = Param(f"{name}.gamma", np.ones(ch))
        self.beta = Param(f"{name}.beta", np.zeros(ch))
        self.run_mean = Param(f"{name}.run_mean", np.zeros(ch))
        self.run_var = Param(f"{name}.run_var", np.ones(ch))
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self):
        return [self.gamma, self.beta]

    def state(self):
        return [self.gamma, self.beta, self.run_mean, self.run_var]

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        if training:
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            m = self.momentum
            self.run_mean.assign(m * self.run_mean.v64 + (1 - m) * mean)
            self.run_var.assign(m * self.run_var.v64 + (1 - m) * var)
        else:
            mean = self.run_mean.v64
            var = self.run_var.v64
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None]) * inv[None, :, None]
        self._cache = (xhat, inv, training, x.shape)
        return self.gamma.v64[None, :, None] * xhat + self.beta.v64[None, :, None]

    def backward(self, dy):
        if self._cache is None:
            raise RunStateError("backward before forward")
        dy = np.asarray(dy, dtype=F64)
        xhat, inv, training, shape = self._cache
        self.gamma.grad = (dy * xhat).sum(axis=(0, 2))
        self.beta.grad = dy.sum(axis=(0, 2))
        g = self.gamma.v64[None, :, None] * inv[None, :, None]
        if not training:
            return g * dy
        n = shape[0] * shape[2]
        mean_dy = dy.mean(axis=(0, 2))[None, :, None]
        mean_dy_xhat = (dy * xhat).mean(axis=(0, 2))[None, :, None]
        return g * (dy - mean_dy - xhat * mean_dy_xhat)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            raise RunStateError("backward before forward")
        return np.asarray(dy, dtype=F64) * self._mask


class Sigmoid(Layer):
    def __init__(self):
        self._y = None

    def forward(self, x, training=False):
        self._y = sigmoid(x)
        return self._y

    def backward(self, dy):
        if self._y is None:
            raise RunStateError("backward before forward")
        return np.asarray(dy, dtype=F64) * self._y * (1.0 - self._y)


class GlobalAvgPool(Layer):
    """(batch, channels, time) -> (batch, channels) by mean over time."""

    def __init__(self):
        self._t = None

    def forward(self, x, training=False):
        x = np.asarray(x, dtype=F64)
        self._t = x.shape[2]
        return x.mean(axis=2)

    def backward(self, dy):
        if self._t is None:
            raise RunStateError("backward before forward")
        dy = np.asarray(dy, dtype=F64)
        return np.repeat(dy[:, :, None], self._t, axis=2) / self._t


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers
        self._ran = False

    def params(self):
        return [p for l in self.layers for p in l.params()]

    def state(self):
        return [p for l in self.layers for p in l.state()]

    def forward(self, x, training=False):
        for l in self.layers:
            x = l.forward(x, training=training)
        self._ran = True
        return x

    def backward(self, dy):
        if not self._ran:
            raise RunStateError("backward before forward")
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy


def build_network(spec: list[tuple], rng: np.random.Generator) -> Sequential:
    """Build a Sequential from layer descriptors.

    Descriptors: ("dense", in, out), ("conv1d", in_ch, out_ch, kernel, stride, pad),
    ("maxpool", width), ("batchnorm", ch), ("relu",), ("sigmoid",), ("mfm",), ("gap",).
    """
    layers: list[Layer] = []
    for i, entry in enumerate(spec):
        kind = entry[0]
        if kind == "dense":
            layers.append(Dense(entry[1], entry[2], rng, name=f"l{i}.dense"))
        elif kind == "conv1d":
            _, in_ch, out_ch, k, stride, pad = entry
            layers.append(Conv1d(in_ch, out_ch, k, stride, pad, rng, name=f"l{i}.conv"))
        elif kind == "maxpool":
            layers.append(MaxPool1d(entry[1]))
        elif kind == "batchnorm":
            layers.append(BatchNorm1d(entry[1], name=f"l{i}.bn"))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "sigmoid":
            layers.append(Sigmoid())
        elif kind == "mfm":
            layers.append(MaxFeatureMap())
        elif kind == "gap":
            layers.append(GlobalAvgPool())
        else:
            raise InvalidInputError(f"unknown layer kind {kind!r}")
    return Sequential(layers)


# ---------------------------------------------------------------------------
# losses

BCE_EPS = 1e-7


def bce_loss(score: float, label: int) -> tuple[float, float]:
    """Binary cross entropy for one score in (0,1); returns (loss, dloss/dscore)."""
    s = min(max(float(score), BCE_EPS), 1.0 - BCE_EPS)
    y = float(label)
    loss = -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))
    dscore = (s - y) / (s * (1.0 - s))
    return float(loss), float(dscore)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error; returns (loss, dloss/dpred)."""
    pred = np.asarray(pred, dtype=F64)
    target = np.asarray(target, dtype=F64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


# ---------------------------------------------------------------------------
# optimizer

PRESETS = {
    "paper": {"lr": 5e-6, "l2": 1e-4, "clip_norm": 1.0},
    "toy": {"lr": 1e-3, "l2": 1e-4, "clip_norm": 1.0},
}


class Adam:
    """Adam with global-norm gradient clipping and L2 regularization.

    Per step: clip the global gradient norm first, then add l2 * param to each
    gradient, then apply the bias-corrected Adam update.
    """

    def __init__(self, params: list[Param], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, l2: float = 0.0,
                 clip_norm: float | None = 1.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2 = l2
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros(p.value.shape, dtype=F64) for p in params]
        self.v = [np.zeros(p.value.shape, dtype=F64) for p in params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            if p.grad is None:
                raise TrainingError(f"missing gradient for {p.name}")
            g = np.asarray(p.grad, dtype=F64)
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for {p.name}")
            grads.append(g)
        if self.clip_norm is not None and np.isfinite(self.clip_norm):
            gnorm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if gnorm > self.clip_norm:
                scale = self.clip_norm / gnorm
                grads = [g * scale for g in grads]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            if self.l2:
                g = g + self.l2 * p.v64
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.assign(p.v64 - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_HEADER = b"TRACEGEN-CKPT v1\n"


def _payload(p: Param) -> bytes:
    return np.ascontiguousarray(p.value, dtype="<f4").tobytes()


def state_checksum(params: list[Param]) -> str:
    """sha256 over the concatenated float32 payloads of all state arrays."""
    h = hashlib.sha256()
    for p in params:
        h.update(_payload(p))
    return h.hexdigest()


def save_checkpoint(path, params: list[Param], meta: dict | None = None) -> str:
    """Write header, one {name, shape, float32-LE payload} record per param,
    and a trailer carrying the sha256 of all payloads. Returns the checksum."""
    meta = dict(meta or {})
    records = []
    payloads = []
    digest = hashlib.sha256()
    for p in params:
        raw = _payload(p)
        records.append({"name": p.name, "shape": list(p.value.shape)})
        payloads.append(raw)
        digest.update(raw)
    checksum = digest.hexdigest()
    with open(path, "wb") as f:
        f.write(CKPT_HEADER)
        f.write(json.dumps({"meta": meta, "n_params": len(records)},
                           sort_keys=True).encode() + b"\n")
        for rec, raw in zip(records, payloads):
            f.write(json.dumps(rec, sort_keys=True).encode() + b"\n")
            f.write(raw + b"\n")
        f.write(json.dumps({"checksum": checksum}).encode() + b"\n")
    return checksum


def _read_line(f: BinaryIO) -> bytes:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise RunStateError("truncated checkpoint")
    return line[:-1]


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Read a checkpoint; verifies the payload checksum.

    Returns (name -> float32 array, meta, checksum)."""
    try:
        with open(path, "rb") as f:
            if f.readline() != CKPT_HEADER:
                raise RunStateError(f"{path}: not a checkpoint file")
            head = json.loads(_read_line(f))
            arrays: dict[str, np.ndarray] = {}
            digest = hashlib.sha256()
            for _ in range(head["n_params"]):
                rec = json.loads(_read_line(f))
                shape = tuple(rec["shape"])
                nbytes = 4 * int(np.prod(shape)) if shape else 4
                raw = f.read(nbytes)
                if len(raw) != nbytes or f.read(1) != b"\n":
                    raise RunStateError("truncated checkpoint payload")
                digest.update(raw)
                arrays[rec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            trailer = json.loads(_read_line(f))
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise RunStateError(f"{path}: corrupted checkpoint ({exc})") from exc
    if trailer["checksum"] != digest.hexdigest():
        raise RunStateError(f"{path}: checkpoint checksum mismatch")
    return arrays, head["meta"], trailer["checksum"]


def restore_state(params: list[Param], arrays: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in arrays:
            raise RunStateError(f"checkpoint missing parameter {p.name}")
        if tuple(arrays[p.name].shape) != tuple(p.value.shape):
            raise RunStateError(f"checkpoint shape mismatch for {p.name}")
        p.assign(arrays[p.name])
