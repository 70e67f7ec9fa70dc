"""Layers with explicit forward/backward passes.

Every layer caches what its backward needs during ``forward``; the cache is
only valid until the next ``forward`` call on the same instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    ShapeError,
    conv2d,
    conv2d_backward,
    conv_output_size,
    fully_connected,
    max_pool2d,
    max_pool2d_backward,
    pool_output_size,
)


@dataclass
class Param:
    """A named parameter block with its gradient and momentum buffer."""

    name: str
    value: np.ndarray
    lr_mult: float = 1.0
    decay_mult: float = 1.0
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)

    def astype(self, dtype):
        self.value = self.value.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum = self.momentum.astype(dtype)


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------

def mfm_forward(c):
    """Max-Feature-Map: elementwise max of the two channel halves of ``c``."""
    c = np.asarray(c)
    if c.ndim != 4:
        raise ShapeError(f"MFM input must be rank 4, got shape {c.shape}")
    if c.shape[1] % 2:
        raise ShapeError(f"MFM needs an even channel count, got {c.shape[1]}")
    n = c.shape[1] // 2
    return np.maximum(c[:, :n], c[:, n:])


def mfm_backward(c, upstream):
    """Route ``upstream`` to the winning half; ties go to the first half."""
    c = np.asarray(c)
    upstream = np.asarray(upstream)
    if c.ndim != 4 or c.shape[1] % 2:
        raise ShapeError(f"MFM input must be rank 4 with even channels, got {c.shape}")
    n = c.shape[1] // 2
    expected = (c.shape[0], n) + c.shape[2:]
    if upstream.shape != expected:
        raise ShapeError(f"upstream shape {upstream.shape} does not match MFM output {expected}")
    first = c[:, :n] >= c[:, n:]
    grad = np.empty(c.shape, dtype=upstream.dtype)
    grad[:, :n] = np.where(first, upstream, 0)
    grad[:, n:] = np.where(first, 0, upstream)
    return grad


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, upstream):
    return np.where(np.asarray(x) > 0, upstream, 0).astype(np.asarray(upstream).dtype)


def dropout_mask(shape, ratio: float, rng: np.random.Generator, dtype=np.float32):
    """Inverted-dropout mask: zeros with probability ``ratio``, survivors 1/(1-ratio)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    keep = rng.random(shape) >= ratio
    return keep.astype(dtype) / dtype(1.0 - ratio) if ratio else np.ones(shape, dtype=dtype)


def softmax_cross_entropy(logits, labels):
    """Mean softmax cross-entropy over a batch.

    ``logits`` is (N, K) or (K,); ``labels`` integer class ids. Returns
    ``(loss, grad)`` with ``grad`` shaped like ``logits``.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z = logits.reshape(1, -1) if single else logits
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z.shape[1]
    if labels.shape != (z.shape[0],):
        raise ShapeError(f"expected {z.shape[0]} labels, got {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): {labels.min()}..{labels.max()}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    rows = np.arange(z.shape[0])
    loss = -log_p[rows, labels].mean()
    grad = np.exp(log_p)
    grad[rows, labels] -= 1
    grad /= z.shape[0]
    return float(loss), grad.reshape(logits.shape)


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------

class Layer:
    name: str = ""
    kind: str = ""
    # False on the first layer: nothing upstream consumes its input gradient
    input_grad: bool = True

    def params(self) -> list[Param]:
        return []

    def output_shape(self, in_shape):
        raise NotImplementedError

    def trace_rows(self, out):
        """(row name, activation) pairs this layer contributes to a shape trace."""
        return [(self.name, out)]

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class Conv(Layer):
    """Single convolution (used for the 1x1 NIN layers)."""

    kind = "conv"

    def __init__(self, name, in_c, out_c, kernel, stride=1, pad=0, lr_mult=1.0, decay_mult=1.0):
        self.name = name
        self.in_c, self.out_c = in_c, out_c
        self.kernel, self.stride, self.pad = kernel, stride, pad
        self.weight = Param(f"{name}.weight", np.zeros((out_c, in_c, kernel, kernel), np.float32),
                            lr_mult, decay_mult)
        self.bias = Param(f"{name}.bias", np.zeros(out_c, np.float32), lr_mult, decay_mult)

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, self.out_c, conv_output_size(h, self.kernel, self.stride, self.pad),
                conv_output_size(w, self.kernel, self.stride, self.pad))

    def forward(self, x, train=False):
        out, self._cols = conv2d(x, self.weight.value, self.bias.value, self.stride, self.pad,
                                 return_cols=True)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._x_shape, self.weight.value, self._cols,
                                     self.stride, self.pad, self.input_grad)
        self.weight.grad[...] = dw
        self.bias.grad[...] = db
        return dx


class ConvPair(Layer):
    """Two independent convolutions over the same input, concatenated on channels.

    The halves are stored as separate parameter blocks ``<name>_1`` and
    ``<name>_2`` and evaluated with one fused convolution. The output has
    ``2 * out_c`` channels and feeds an :class:`MFM` layer.
    """

    kind = "conv_pair"

    def __init__(self, name, in_c, out_c, kernel, stride=1, pad=0, lr_mult=1.0, decay_mult=1.0):
        self.name = name
        self.in_c, self.out_c = in_c, out_c
        self.kernel, self.stride, self.pad = kernel, stride, pad
        shape = (out_c, in_c, kernel, kernel)
        self.halves = [
            (Param(f"{name}_{i}.weight", np.zeros(shape, np.float32), lr_mult, decay_mult),
             Param(f"{name}_{i}.bias", np.zeros(out_c, np.float32), lr_mult, decay_mult))
            for i in (1, 2)
        ]

    def params(self):
        return [p for half in self.halves for p in half]

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, 2 * self.out_c, conv_output_size(h, self.kernel, self.stride, self.pad),
                conv_output_size(w, self.kernel, self.stride, self.pad))

    def trace_rows(self, out):
        n = self.out_c
        return [(f"{self.name}_1", out[:, :n]), (f"{self.name}_2", out[:, n:])]

    def _fused(self):
        (w1, b1), (w2, b2) = self.halves
        return (np.concatenate([w1.value, w2.value]), np.concatenate([b1.value, b2.value]))

    def forward(self, x, train=False):
        w, b = self._fused()
        self._w = w
        out, self._cols = conv2d(x, w, b, self.stride, self.pad, return_cols=True)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._x_shape, self._w, self._cols,
                                     self.stride, self.pad, self.input_grad)
        n = self.out_c
        (w1, b1), (w2, b2) = self.halves
        w1.grad[...], w2.grad[...] = dw[:n], dw[n:]
        b1.grad[...], b2.grad[...] = db[:n], db[n:]
        return dx


class MFM(Layer):
    kind = "mfm"

    def __init__(self, name):
        self.name = name

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        if c % 2:
            raise ShapeError(f"{self.name}: MFM needs an even channel count, got {c}")
        return (n, c // 2, h, w)

    def forward(self, x, train=False):
        self._x = x
        return mfm_forward(x)

    def backward(self, dout):
        return mfm_backward(self._x, dout)


class ReLU(Layer):
    kind = "relu"

    def __init__(self, name):
        self.name = name

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False):
        self._x = x
        return relu_forward(x)

    def backward(self, dout):
        return relu_backward(self._x, dout)


class MaxPool(Layer):
    kind = "pool"

    def __init__(self, name, kernel=2, stride=2):
        self.name = name
        self.kernel, self.stride = kernel, stride

    def output_shape(self, in_shape):
        n, c, h, w = in_shape
        return (n, c, pool_output_size(h, self.kernel, self.stride),
                pool_output_size(w, self.kernel, self.stride))

    def forward(self, x, train=False):
        out, self._argmax = max_pool2d(x, self.kernel, self.stride)
        self._x_shape = x.shape
        return out

    def backward(self, dout):
        return max_pool2d_backward(dout, self._argmax, self._x_shape,
                                   overlapping=self.kernel > self.stride)


class FullyConnected(Layer):
    """Dense layer; weights stored as (in_dim, out_dim)."""

    kind = "fc"

    def __init__(self, name, in_dim, out_dim, lr_mult=1.0, decay_mult=1.0):
        self.name = name
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Param(f"{name}.weight", np.zeros((in_dim, out_dim), np.float32),
                            lr_mult, decay_mult)
        self.bias = Param(f"{name}.bias", np.zeros(out_dim, np.float32), lr_mult, decay_mult)

    def params(self):
        return [self.weight, self.bias]

    def output_shape(self, in_shape):
        d = int(np.prod(in_shape[1:]))
        if d != self.in_dim:
            raise ShapeError(f"{self.name}: flattened input length {d} != in_dim {self.in_dim}")
        return (in_shape[0], self.out_dim)

    def forward(self, x, train=False):
        self._x_shape = x.shape
        self._flat = x.reshape(x.shape[0], -1)
        return fully_connected(self._flat, self.weight.value, self.bias.value)

    def backward(self, dout):
        self.weight.grad[...] = self._flat.T @ dout
        self.bias.grad[...] = dout.sum(axis=0)
        return (dout @ self.weight.value.T.astype(dout.dtype, copy=False)).reshape(self._x_shape)


class Dropout(Layer):
    """Inverted dropout; identity outside training.

    Setting ``frozen_mask`` reuses one fixed mask for every training-mode
    call, which makes the layer deterministic for gradient checks.
    """

    kind = "dropout"

    def __init__(self, name, ratio=0.7, rng=None):
        if not 0.0 <= ratio < 1.0:
            raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
        self.name = name
        self.ratio = ratio
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.frozen_mask = None
        self._mask = None

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x, train=False):
        if not train or self.ratio == 0.0:
            self._mask = None
            return x
        if self.frozen_mask is not None:
            mask = self.frozen_mask.astype(x.dtype, copy=False)
        else:
            mask = dropout_mask(x.shape, self.ratio, self.rng, x.dtype.type)
        self._mask = mask
        return x * mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


def dropout(x, ratio: float, mode: str, rng: np.random.Generator):
    """Functional dropout; returns ``(out, mask)`` (mask is None in test mode)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"dropout ratio must be in [0, 1), got {ratio}")
    if mode == "test" or ratio == 0.0:
        return x, None
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    x = np.asarray(x)
    dtype = x.dtype.type if np.issubdtype(x.dtype, np.floating) else np.float64
    mask = dropout_mask(x.shape, ratio, rng, dtype)
    return x * mask, mask
