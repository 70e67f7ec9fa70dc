"""Dense NCHW kernels shared by every layer.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out as
(batch, channel, height, width) in C order. Kernels never mutate their
inputs and preserve the input dtype, so the same code serves float32
training and float64 gradient checks.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream; same seed gives the same sequence everywhere."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected rank-4 (N, C, H, W) tensor, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
    return arr


def flat_index(shape, n: int, c: int, h: int, w: int) -> int:
    _, C, H, W = shape
    return ((n * C + c) * H + h) * W + w


def unflat_index(shape, index: int) -> tuple[int, int, int, int]:
    _, C, H, W = shape
    index, w = divmod(index, W)
    index, h = divmod(index, H)
    n, c = divmod(index, C)
    return n, c, h, w


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int) -> int:
    # ceil mode; the last window may hang over the border and is clipped
    out = int(math.ceil((size - kernel) / stride)) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(dcols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = np.ascontiguousarray(dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += d[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return dx


def _check_conv(x, weights, bias, stride, pad):
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4, got shape {x.shape}")
    if weights.ndim != 4:
        raise ShapeError(f"weights must be (outC, inC, kH, kW), got shape {weights.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    out_c, in_c, kh, kw = weights.shape
    if x.shape[1] != in_c:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]} channels, weights expect inC={in_c}")
    if kh > x.shape[2] + 2 * pad:
        raise ShapeError(f"height: kernel {kh} exceeds padded input height {x.shape[2] + 2 * pad}")
    if kw > x.shape[3] + 2 * pad:
        raise ShapeError(f"width: kernel {kw} exceeds padded input width {x.shape[3] + 2 * pad}")
    if bias is not None and np.shape(bias) != (out_c,):
        raise ShapeError(f"bias must have shape ({out_c},), got {np.shape(bias)}")


def conv2d(x, weights, bias=None, stride: int = 1, pad: int = 0, return_cols: bool = False):
    """Cross-correlation of ``x`` (N, inC, H, W) with ``weights`` (outC, inC, kH, kW).

    Lowered to a single matrix product over im2col patches. With
    ``return_cols`` the patch matrix is returned too so backward can reuse it.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    _check_conv(x, weights, bias, stride, pad)
    out_c, _, kh, kw = weights.shape
    cols, oh, ow = _im2col(x, kh, kw, stride, pad)
    out = cols @ weights.reshape(out_c, -1).T.astype(cols.dtype, copy=False)
    if bias is not None:
        out += np.asarray(bias, dtype=out.dtype)
    out = out.reshape(x.shape[0], oh, ow, out_c).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(dout, x_shape, weights, cols, stride: int = 1, pad: int = 0,
                    input_grad: bool = True):
    """Gradients of conv2d w.r.t. input, weights and bias.

    ``cols`` is the patch matrix produced by the forward pass. With
    ``input_grad=False`` the input gradient is skipped and returned as None.
    """
    out_c, _, kh, kw = weights.shape
    n, _, oh, ow = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * oh * ow, out_c)
    dw = (d2.T @ cols).reshape(weights.shape)
    db = d2.sum(axis=0)
    if not input_grad:
        return None, dw, db
    dcols = d2 @ weights.reshape(out_c, -1).astype(d2.dtype, copy=False)
    dx = _col2im(dcols, x_shape, kh, kw, stride, pad, oh, ow)
    return dx, dw, db


def max_pool2d(x, k: int, stride: int):
    """Ceil-mode max pooling with border-clipped windows.

    Returns ``(out, argmax)`` where ``argmax`` holds, for every output
    element, the flat (h * W + w) position of the winning input element
    inside its (n, c) plane. Ties go to the first element in scan order.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4, got shape {x.shape}")
    if k < 1 or stride < 1:
        raise ShapeError(f"kernel and stride must be >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool kernel {k} exceeds input extent {h}x{w}")
    oh, ow = pool_output_size(h, k, stride), pool_output_size(w, k, stride)
    ph = max((oh - 1) * stride + k - h, 0)
    pw = max((ow - 1) * stride + k - w, 0)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    win = win.reshape(n, c, oh, ow, k * k)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(local, k)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    argmax = rows * w + cols
    return np.ascontiguousarray(out), argmax


def max_pool2d_backward(dout, argmax, x_shape, overlapping: bool = True) -> np.ndarray:
    """Route ``dout`` back to the argmax positions recorded by max_pool2d.

    When windows cannot overlap (kernel <= stride) every input receives at
    most one contribution and a plain scatter is used instead of add.at.
    """
    n, c, h, w = x_shape
    dx = np.zeros((n * c, h * w), dtype=dout.dtype)
    idx = argmax.reshape(n * c, -1)
    vals = dout.reshape(n * c, -1)
    if overlapping:
        rows = np.repeat(np.arange(n * c), idx.shape[1])
        np.add.at(dx, (rows, idx.ravel()), vals.ravel())
    else:
        np.put_along_axis(dx, idx, vals, axis=1)
    return dx.reshape(x_shape)


def fully_connected(x, weights, bias=None) -> np.ndarray:
    """``x`` is flattened per batch item to length D; ``weights`` is (D, M)."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    flat = x.reshape(x.shape[0], -1) if x.ndim > 1 else x.reshape(1, -1)
    if weights.ndim != 2 or flat.shape[1] != weights.shape[0]:
        raise ShapeError(
            f"length mismatch: flattened input has D={flat.shape[1]}, weights are {weights.shape}")
    out = flat @ weights.astype(flat.dtype, copy=False)
    if bias is not None:
        if np.shape(bias) != (weights.shape[1],):
            raise ShapeError(f"bias must have shape ({weights.shape[1]},), got {np.shape(bias)}")
        out = out + np.asarray(bias, dtype=out.dtype)
    return out


def crop(x, top: int, left: int, out_h: int, out_w: int) -> np.ndarray:
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if top < 0 or left < 0 or out_h < 1 or out_w < 1 or top + out_h > h or left + out_w > w:
        raise ShapeError(
            f"crop window (top={top}, left={left}, {out_h}x{out_w}) outside {h}x{w} input")
    return np.ascontiguousarray(x[..., top:top + out_h, left:left + out_w])


def mirror(x) -> np.ndarray:
    """Reverse the width axis."""
    return np.ascontiguousarray(np.asarray(x)[..., ::-1])
