"""Linear and tanh-MLP binary classifiers on a flat weight vector.

Flat layout: for every layer, the ``(out, in)`` weight matrix in row-major
order followed by its ``out`` biases.  A linear model is therefore
``[w_1, ..., w_d, b]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import ClientDataset
from .numerics import Rng

PROB_CLIP = 1e-12
CKPT_MAGIC = b"FFLMDL01"


@dataclass(frozen=True)
class ModelParams:
    arch: str
    dim: int
    hidden: tuple[int, ...]
    w: np.ndarray

    def __post_init__(self):
        if self.arch not in ("linear", "mlp"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.arch == "linear" and self.hidden:
            raise ValueError("linear model takes no hidden widths")
        if self.arch == "mlp" and not self.hidden:
            raise ValueError("mlp needs at least one hidden width")
        w = np.ascontiguousarray(self.w, dtype=np.float64)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "w", w)
        expected = n_params(self.dim, self.hidden)
        if w.shape != (expected,):
            raise ValueError(f"weight vector has length {w.size}, architecture needs {expected}")

    def with_weights(self, w: np.ndarray) -> "ModelParams":
        return ModelParams(self.arch, self.dim, self.hidden, w)

    @property
    def size(self) -> int:
        return self.w.shape[0]


@dataclass
class LossReport:
    mean_loss: float
    gradient: np.ndarray


def layer_shapes(dim: int, hidden: tuple[int, ...]) -> list[tuple[int, int]]:
    widths = [dim, *hidden, 1]
    return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]


def n_params(dim: int, hidden: tuple[int, ...]) -> int:
    return sum(o * i + o for o, i in layer_shapes(dim, hidden))


def _unpack(params: ModelParams):
    layers, off = [], 0
    for out, inp in layer_shapes(params.dim, params.hidden):
        W = params.w[off:off + out * inp].reshape(out, inp)
        off += out * inp
        b = params.w[off:off + out]
        off += out
        layers.append((W, b))
    return layers


def init_params(arch: str, dim: int, hidden=(), rng: Rng | None = None) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    hidden = tuple(hidden)
    rng = rng or Rng(0)
    chunks = []
    for out, inp in layer_shapes(dim, hidden):
        bound = 1.0 / math.sqrt(inp)
        chunks.append(rng.uniform(-bound, bound, size=out * inp))
        chunks.append(rng.uniform(-bound, bound, size=out))
    return ModelParams(arch, dim, hidden, np.concatenate(chunks))


def zeros_like(params: ModelParams) -> ModelParams:
    return params.with_weights(np.zeros_like(params.w))


def _check_dim(params: ModelParams, X: np.ndarray) -> None:
    if X.shape[1] != params.dim:
        raise ValueError(f"model expects {params.dim} features, got {X.shape[1]}")


def logits(params: ModelParams, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_dim(params, X)
    a = X
    layers = _unpack(params)
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
    W, b = layers[-1]
    return a @ W[0] + b[0]


def logits_with_vjp(params: ModelParams, X: np.ndarray):
    """Forward pass that also returns ``vjp(dz) -> dL/dw`` for ``dz = dL/dz``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    _check_dim(params, X)
    layers = _unpack(params)
    acts = [X]
    for W, b in layers[:-1]:
        acts.append(np.tanh(acts[-1] @ W.T + b))
    W_out, b_out = layers[-1]
    z = acts[-1] @ W_out[0] + b_out[0]

    def vjp(dz: np.ndarray) -> np.ndarray:
        delta = np.asarray(dz, dtype=np.float64).reshape(-1, 1)
        grads = []
        for li in range(len(layers) - 1, -1, -1):
            W, _ = layers[li]
            a_prev = acts[li]
            grads.append(delta.sum(axis=0))
            grads.append((delta.T @ a_prev).ravel())
            if li > 0:
                delta = (delta @ W) * (1.0 - a_prev * a_prev)
        return np.concatenate(grads[::-1])

    return z, vjp


def forward(params: ModelParams, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("forward takes a single feature vector")
    return float(logits(params, x[None, :])[0])


def predict(params: ModelParams, x) -> int:
    """1 iff the logit is strictly positive; a zero logit predicts 0."""
    return int(forward(params, x) > 0.0)


def predict_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    return (logits(params, X) > 0.0).astype(np.int8)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_from_logits(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean BCE and its derivative with respect to each logit."""
    p = sigmoid(z)
    pc = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    y = y.astype(np.float64)
    loss = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return float(loss), (p - y) / z.shape[0]


def bce_loss_and_grad(params: ModelParams, data: ClientDataset) -> LossReport:
    if len(data) == 0:
        raise ValueError("bce_loss_and_grad: empty dataset")
    z, vjp = logits_with_vjp(params, data.X)
    loss, dz = bce_from_logits(z, data.y)
    return LossReport(loss, vjp(dz))


def zero_one_risk(params: ModelParams, data: ClientDataset) -> float:
    if len(data) == 0:
        raise ValueError("zero_one_risk: empty dataset")
    return float(np.mean(predict_batch(params, data.X) != data.y))


# --------------------------------------------------------------------------
# checkpoints: magic, u32 arch (0 linear / 1 mlp), u32 dim, u32 n_hidden,
# n_hidden x u32 widths, u32 n_weights, then little-endian f64 weights
# --------------------------------------------------------------------------


def save_params(path, params: ModelParams) -> None:
    head = struct.pack("<8sIII", CKPT_MAGIC, 0 if params.arch == "linear" else 1,
                       params.dim, len(params.hidden))
    head += struct.pack(f"<{len(params.hidden)}I", *params.hidden)
    head += struct.pack("<I", params.size)
    Path(path).write_bytes(head + params.w.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    raw = Path(path).read_bytes()
    magic, arch, dim, nh = struct.unpack_from("<8sIII", raw)
    if magic != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    off = struct.calcsize("<8sIII")
    hidden = struct.unpack_from(f"<{nh}I", raw, off)
    off += 4 * nh
    (size,) = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) - off != 8 * size:
        raise ValueError(f"{path}: expected {8 * size} weight bytes, found {len(raw) - off}")
    w = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64)
    return ModelParams("linear" if arch == 0 else "mlp", dim, tuple(hidden), w)
