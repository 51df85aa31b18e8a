"""Dense ReLU networks with softmax or linear heads, trained by RMSprop.

Checkpoint byte layout (all integers little-endian ``uint32``, all reals
little-endian IEEE-754 ``float64``)::

    magic      8 bytes   b"MLPCKPT\\n"
    version    uint32    currently 1
    head       uint32    0 = softmax, 1 = linear
    n_layers   uint32    number of affine layers
    dims       uint32 x (n_layers + 1)
    per layer  W (d_in x d_out, row-major), then b (d_out)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pipeline.batch import encode
from .pipeline.model import PipelineModel

MAGIC = b"MLPCKPT\n"
VERSION = 1
HEADS = ("softmax", "linear")

POLICY_HIDDEN = (256, 64)
VALUE_HIDDEN = (256, 128, 64)


class TrainingDiverged(RuntimeError):
    pass


def encode_feature(y, model: PipelineModel) -> np.ndarray:
    """One-hot robot position(s) followed by the flattened belief matrix."""
    robots = np.array([y.robots], dtype=np.int64)
    return encode(model, y.belief.damage[None], robots)[0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(eq=False)
class Mlp:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head: str = "softmax"
    _f32: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for w, w_next in zip(self.weights, self.weights[1:]):
            if w.shape[1] != w_next.shape[0]:
                raise ValueError("layer shapes do not chain")

    @classmethod
    def init(cls, dims, head: str = "softmax", rng=None) -> Mlp:
        """Uniform in +-sqrt(6 / (d_in + d_out)), zero biases."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (d_in + d_out))
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(np.zeros(d_out))
        return cls(weights, biases, head)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> Mlp:
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.head)

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = self._check(x)
        h = x
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h @ self.weights[-1] + self.biases[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x)
        return softmax(z) if self.head == "softmax" else z

    __call__ = forward

    def infer_logits(self, x: np.ndarray) -> np.ndarray:
        """Float32 pre-head outputs; used on the simulation hot path."""
        if self._f32 is None:
            self._f32 = (tuple(w.astype(np.float32) for w in self.weights),
                         tuple(b.astype(np.float32) for b in self.biases))
        ws, bs = self._f32
        h = np.asarray(x, dtype=np.float32)
        for w, b in zip(ws[:-1], bs[:-1]):
            h = np.maximum(h @ w + b, 0.0)
        return h @ ws[-1] + bs[-1]

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.weights[0].shape[0]:
            raise ValueError(f"input dimension {x.shape[-1]} != {self.weights[0].shape[0]}")
        return x

    # serialization -------------------------------------------------------
    def to_bytes(self) -> bytes:
        dims = self.layer_dims
        parts = [MAGIC, struct.pack("<III", VERSION, HEADS.index(self.head), len(self.weights)),
                 struct.pack(f"<{len(dims)}I", *dims)]
        for w, b in zip(self.weights, self.biases):
            parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Mlp:
        if data[:8] != MAGIC:
            raise ValueError("not an MLP checkpoint")
        version, head, n_layers = struct.unpack_from("<III", data, 8)
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off = 20
        dims = struct.unpack_from(f"<{n_layers + 1}I", data, off)
        off += 4 * (n_layers + 1)
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = np.frombuffer(data, dtype="<f8", count=d_in * d_out, offset=off).reshape(d_in, d_out)
            off += 8 * d_in * d_out
            b = np.frombuffer(data, dtype="<f8", count=d_out, offset=off)
            off += 8 * d_out
            weights.append(w.astype(float))
            biases.append(b.astype(float))
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        return cls(weights, biases, HEADS[head])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Mlp:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def arrays(self):
        return self.weights + self.biases


def loss_and_grad(net: Mlp, x: np.ndarray, targets: np.ndarray, loss: str = "l2"):
    """Mean loss over the batch and its exact gradient.

    ``l2`` is ``mean_b sum_k (out_k - t_k)^2``; ``ce`` (softmax head only)
    is the mean cross-entropy against the target distribution.
    """
    x = net._check(x)
    targets = np.asarray(targets, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    acts = [x]
    h = x
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        h = np.maximum(h @ w + b, 0.0)
        acts.append(h)
    z = h @ net.weights[-1] + net.biases[-1]
    n = x.shape[0]
    t = targets.reshape(z.shape)

    if net.head == "softmax":
        p = softmax(z)
        if loss == "l2":
            r = p - t
            value = float((r * r).sum() / n)
            g = 2.0 * r / n
            dz = p * (g - (g * p).sum(axis=1, keepdims=True))
        elif loss == "ce":
            value = float(-(t * np.log(np.clip(p, 1e-300, None))).sum() / n)
            dz = (p - t) / n
        else:
            raise ValueError(f"unknown loss {loss!r}")
    else:
        if loss != "l2":
            raise ValueError("linear head supports only the l2 loss")
        r = z - t
        value = float((r * r).sum() / n)
        dz = 2.0 * r / n

    dws, dbs = [], []
    delta = dz
    for layer in range(len(net.weights) - 1, -1, -1):
        dws.append(acts[layer].T @ delta)
        dbs.append(delta.sum(axis=0))
        if layer:
            delta = (delta @ net.weights[layer].T) * (acts[layer] > 0)
    return value, Grads(dws[::-1], dbs[::-1])


def grad(net: Mlp, x, targets, loss: str = "l2") -> Grads:
    return loss_and_grad(net, x, targets, loss)[1]


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    rmsprop_decay: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    loss: str = "l2"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")


def rmsprop_init(net: Mlp) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in net.weights + net.biases]


def rmsprop_step(net: Mlp, g: Grads, state: list[np.ndarray], cfg: TrainConfig):
    """``s <- rho s + (1 - rho) g^2``; ``p <- p - lr g / (sqrt(s) + eps)``. Returns fresh objects."""
    params = net.weights + net.biases
    new_params, new_state = [], []
    for p, gp, s in zip(params, g.arrays(), state):
        s = cfg.rmsprop_decay * s + (1.0 - cfg.rmsprop_decay) * gp * gp
        new_params.append(p - cfg.learning_rate * gp / (np.sqrt(s) + cfg.epsilon))
        new_state.append(s)
    k = len(net.weights)
    return Mlp(new_params[:k], new_params[k:], net.head), new_state


def train(net: Mlp, x: np.ndarray, targets: np.ndarray, cfg: TrainConfig):
    """Mini-batch RMSprop; returns the trained copy and per-epoch mean losses."""
    x = np.asarray(x, dtype=float)
    targets = np.asarray(targets, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    net = net.copy()
    params = net.weights + net.biases
    state = rmsprop_init(net)
    k = len(net.weights)
    rho, lr, eps = cfg.rmsprop_decay, cfg.learning_rate, cfg.epsilon
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, g = loss_and_grad(Mlp(params[:k], params[k:], net.head), x[idx], targets[idx], cfg.loss)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch starting {start}; "
                    f"max |param| = {max(float(np.abs(p).max()) for p in params):.3g}")
            total += value * len(idx)
            for p, gp, s in zip(params, g.arrays(), state):
                s *= rho
                s += (1.0 - rho) * gp * gp
                p -= lr * gp / (np.sqrt(s) + eps)
        curve.append(total / n)
    return Mlp(params[:k], params[k:], net.head), curve


def policy_net(n_in: int, n_actions: int, rng=None) -> Mlp:
    return Mlp.init([n_in, *POLICY_HIDDEN, n_actions], "softmax", rng)


def value_net(n_in: int, rng=None) -> Mlp:
    return Mlp.init([n_in, *VALUE_HIDDEN, 1], "linear", rng)
