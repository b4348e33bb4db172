"""MLPs, Adam, weight decay, softmax cross-entropy and the DCRNN1 checkpoint format."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"DCRNN1"


class NumericError(ArithmeticError):
    """A loss or parameter became NaN/inf."""


def check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NumericError(f"non-finite {what}: {value}")
    return value


@dataclass
class MlpConfig:
    layer_sizes: list[int]
    activation_slope: float = 0.2
    final_activation: str = "none"

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive: {self.layer_sizes}")
        if self.final_activation not in ("none", "leaky_relu"):
            raise ValueError(f"unknown final_activation {self.final_activation!r}")
        if not 0.0 < self.activation_slope < 1.0:
            raise ValueError(f"activation_slope must lie in (0, 1), got {self.activation_slope}")


def mlp_config(in_dim: int, hidden: Sequence[int], out_dim: int, slope: float = 0.2,
               final_activation: str = "none") -> MlpConfig:
    return MlpConfig([in_dim, *hidden, out_dim], slope, final_activation)


@dataclass(eq=False)
class Mlp:
    config: MlpConfig
    weights: list[Tensor] = field(default_factory=list)
    biases: list[Tensor] = field(default_factory=list)

    @property
    def in_dim(self) -> int:
        return self.config.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.config.layer_sizes[-1]

    def parameters(self) -> list[Tensor]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def copy(self) -> Mlp:
        return Mlp(MlpConfig(list(self.config.layer_sizes), self.config.activation_slope,
                             self.config.final_activation),
                   [Tensor(w.data.copy(), True) for w in self.weights],
                   [Tensor(b.data.copy(), True) for b in self.biases])


def init_mlp(config: MlpConfig, seed) -> Mlp:
    """Xavier-uniform weights, zero biases. ``seed`` is an int or a numpy Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    sizes = config.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True))
        biases.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Mlp(config, weights, biases)


def forward(mlp: Mlp, batch: Tensor) -> Tensor:
    batch = ad.as_tensor(batch)
    if batch.ndim != 2 or batch.shape[1] != mlp.in_dim:
        raise ad.ShapeError(f"MLP expects [B, {mlp.in_dim}] input, got {batch.shape}")
    h = batch
    last = len(mlp.weights) - 1
    slope = mlp.config.activation_slope
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = ad.linear(h, w, b)
        if i < last or mlp.config.final_activation == "leaky_relu":
            h = ad.leaky_relu(h, slope)
    return h


def weight_decay_term(mlp: Mlp, coefficient: float) -> Tensor:
    """coefficient * sum of squared parameter entries."""
    total = None
    for p in mlp.parameters():
        term = ad.l2_squared(p)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, coefficient)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ad.ShapeError(f"logits must be [B, C], got {logits.shape}")
    n, c = logits.shape
    if labels.shape != (n,):
        raise ad.ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} outside [0, {c})")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.tsum(ad.mul(logits, Tensor(onehot)), axis=1)
    return ad.mean(ad.sub(ad.logsumexp_rows(logits), picked))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Adam:
    """Adam with bias correction. Gradients are read from ``param.grad`` and left in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params: Sequence[Tensor], state: Adam):
    """Functional spelling of ``state.step()``; ``params`` must be the ones ``state`` owns."""
    if list(params) != state.params:
        raise ValueError("params do not match the optimizer state")
    state.step()


# -- checkpoints ----------------------------------------------------------

def save_mlp(mlp: Mlp, path) -> None:
    """Write ``DCRNN1`` + layer count + per layer (rows, cols, weights, biases), little-endian."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<Q", len(mlp.weights))
    for w, b in zip(mlp.weights, mlp.biases):
        rows, cols = w.shape
        buf += struct.pack("<QQ", rows, cols)
        buf += np.ascontiguousarray(w.data, dtype="<f8").tobytes()
        buf += np.ascontiguousarray(b.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_mlp(path, activation_slope: float = 0.2, final_activation: str = "none") -> Mlp:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a DCRNN1 checkpoint")
    try:
        return _parse_checkpoint(raw, path, activation_slope, final_activation)
    except (struct.error, ValueError) as exc:
        if str(path) in str(exc):
            raise
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from None


def _parse_checkpoint(raw: bytes, path, activation_slope: float, final_activation: str) -> Mlp:
    off = len(MAGIC)
    (layers,) = struct.unpack_from("<Q", raw, off)
    off += 8
    weights, biases, sizes = [], [], []
    for _ in range(layers):
        rows, cols = struct.unpack_from("<QQ", raw, off)
        off += 16
        w = np.frombuffer(raw, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += 8 * rows * cols
        b = np.frombuffer(raw, dtype="<f8", count=rows, offset=off)
        off += 8 * rows
        if sizes and sizes[-1] != cols:
            raise ValueError(f"{path}: layer widths do not chain")
        if not sizes:
            sizes.append(cols)
        sizes.append(rows)
        weights.append(Tensor(w.astype(np.float64), requires_grad=True))
        biases.append(Tensor(b.astype(np.float64), requires_grad=True))
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return Mlp(MlpConfig(sizes, activation_slope, final_activation), weights, biases)
