"""Dense float32 kernels used by the ViT forward pass and the small trainable heads.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Every function
here is pure: it never mutates its inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DTYPE = np.float32
_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` over the last two axes, batch axes broadcast.

    Accumulation runs over the inner index from left to right in float32,
    so results are bit-identical to a naive triple loop in the same order.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    acc = np.zeros(out_shape, dtype=DTYPE)
    for i in range(k):
        acc += a[..., :, i, None] * b[..., None, i, :]
    return acc


def softmax_rows(x) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    x = as_tensor(x)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gain, shift, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gain = as_tensor(gain)
    shift = as_tensor(shift)
    if x.shape[-1] != gain.shape[-1] or gain.shape != shift.shape:
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, shift {shift.shape}")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / np.sqrt(var + DTYPE(eps)) * gain + shift


def gelu(x) -> np.ndarray:
    """Tanh approximation of GELU."""
    x = as_tensor(x)
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(_GELU_C * (x + DTYPE(0.044715) * x**3)))


def gelu_grad(x) -> np.ndarray:
    """Derivative of :func:`gelu` with respect to its input."""
    x = as_tensor(x)
    inner = _GELU_C * (x + DTYPE(0.044715) * x**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (DTYPE(1.0) + DTYPE(3 * 0.044715) * x * x)
    return DTYPE(0.5) * (DTYPE(1.0) + t) + DTYPE(0.5) * x * (DTYPE(1.0) - t * t) * d_inner


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """Affine map ``x @ weight.T + bias`` with ``weight`` of shape [out, in]."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", as_tensor(self.weight))
        object.__setattr__(self, "bias", as_tensor(self.bias))
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"dense layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]


def dense_forward(layer: DenseLayer, x) -> np.ndarray:
    x = as_tensor(x)
    if x.shape[-1] != layer.in_features:
        raise ShapeError(f"input width {x.shape[-1]} != layer in_features {layer.in_features}")
    return matmul(x, layer.weight.T) + layer.bias


def dense_backward(layer: DenseLayer, x, upstream):
    """Gradients of a dense layer for a [batch, in] input.

    Returns ``(grad_weight, grad_bias, grad_input)``.
    """
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    if x.ndim != 2 or upstream.shape != (x.shape[0], layer.out_features):
        raise ShapeError(f"dense_backward: x {x.shape}, upstream {upstream.shape}")
    if x.shape[1] != layer.in_features:
        raise ShapeError(f"input width {x.shape[1]} != layer in_features {layer.in_features}")
    grad_weight = matmul(upstream.T, x)
    grad_bias = upstream.sum(axis=0)
    grad_input = matmul(upstream, layer.weight)
    return grad_weight, grad_bias, grad_input


def cross_entropy_with_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    batch, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= DTYPE(1.0)
    grad /= DTYPE(batch)
    return loss, grad


class Adam:
    """Adam updates for a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)).astype(p.dtype)
