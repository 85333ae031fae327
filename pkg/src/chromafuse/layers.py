"""Neural-network layers with explicit forward and backward passes.

Everything is plain numpy.  Convolutions are lowered to matrix products via
im2col so the heavy lifting runs inside BLAS; the backward pass for the
input gradient is itself expressed as a correlation with flipped kernels,
which keeps all three gradient products (dW, db, dX) BLAS-bound.

Layers are dtype-polymorphic: build with ``dtype=np.float64`` for gradient
checking, ``np.float32`` for training.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import UsageError


class Param:
    """One trainable tensor; `decay` is False for biases (no weight decay)."""

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool = True):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay


def he_uniform(rng, shape, fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    name = "layer"

    def params(self) -> list[Param]:
        return []

    def forward(self, x: np.ndarray, *, train: bool = False, rng=None) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N*H'*W', C*k*k) patch matrix for stride-1 windows."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))  # (N, C, H', W', k, k)
    n, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)


class Conv2d(Layer):
    """3x3-style convolution, stride 1, same padding (pad = k // 2)."""

    def __init__(self, name, in_channels, out_channels, kernel_size=3, *, rng, dtype=np.float32):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.pad = kernel_size // 2
        fan_in = in_channels * kernel_size * kernel_size
        self.w = Param(f"{name}.w", he_uniform(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_channels, dtype=dtype), decay=False)
        self._cols = None
        self._in_shape = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, *, train=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise UsageError(f"{self.name}: expected (N, {self.in_channels}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = _im2col(xp, self.k)
        wmat = self.w.value.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.b.value
        self._cols = cols if train else None
        self._in_shape = x.shape
        return np.ascontiguousarray(out.reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2))

    def backward(self, dy):
        n, _, h, w = self._in_shape
        dyt = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, self.out_channels)
        self.b.grad = dyt.sum(axis=0)
        self.w.grad = (dyt.T @ self._cols).reshape(self.w.value.shape)
        self._cols = None
        # Input gradient: correlate dy with 180-degree-flipped kernels.
        q = self.k - 1 - self.pad
        dyp = np.pad(dy, ((0, 0), (0, 0), (q, q), (q, q)))
        cols_dy = _im2col(dyp, self.k)
        wflip = np.ascontiguousarray(
            self.w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        ).reshape(self.in_channels, -1)
        dx = cols_dy @ wflip.T
        return np.ascontiguousarray(dx.reshape(n, h, w, self.in_channels).transpose(0, 3, 1, 2))


class ReLU(Layer):
    def __init__(self, name="relu"):
        self.name = name
        self._mask = None

    def forward(self, x, *, train=False, rng=None):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dy):
        return np.where(self._mask, dy, 0)


class MaxPool2d(Layer):
    """2x2 max pooling with stride 2; gradient routes to the first maximum."""

    def __init__(self, name="pool"):
        self.name = name
        self._arg = None
        self._in_shape = None

    def forward(self, x, *, train=False, rng=None):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise UsageError(f"{self.name}: spatial dims must be even, got {h}x{w}")
        windows = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self._arg = windows.argmax(axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(windows, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        n, c, h, w = self._in_shape
        scattered = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(scattered, self._arg[..., None], dy[..., None], axis=-1)
        return scattered.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class Dropout(Layer):
    """Inverted dropout: inference is exactly the identity."""

    def __init__(self, rate: float, name="dropout"):
        if not 0.0 <= rate < 1.0:
            raise UsageError(f"{name}: dropout rate must be in [0, 1), got {rate}")
        self.name = name
        self.rate = rate
        self._mask = None

    def forward(self, x, *, train=False, rng=None):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise UsageError(f"{self.name}: training-mode dropout needs an rng")
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name
        self._in_shape = None

    def forward(self, x, *, train=False, rng=None):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class Dense(Layer):
    def __init__(self, name, in_features, out_features, *, rng, dtype=np.float32):
        self.name = name
        self.in_features = in_features
        self.w = Param(f"{name}.w", he_uniform(rng, (in_features, out_features), in_features, dtype))
        self.b = Param(f"{name}.b", np.zeros(out_features, dtype=dtype), decay=False)
        self._x = None

    def params(self):
        return [self.w, self.b]

    def forward(self, x, *, train=False, rng=None):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise UsageError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dy):
        self.w.grad = self._x.T @ dy
        self.b.grad = dy.sum(axis=0)
        return dy @ self.w.value.T


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Numerically stable via max subtraction; grad = (softmax - onehot) / N.
    """
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise UsageError(f"labels shape {labels.shape} does not match logits batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise UsageError(f"label out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    grad = np.exp(z - lse[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype, copy=False)
