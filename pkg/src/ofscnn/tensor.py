"""Fixed-size neural operations on float64 numpy arrays.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout. Every op comes
with an explicit backward function; there is no autograd tape.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_filters(filters: np.ndarray) -> int:
    """Validate a (out, in, s, s) filter bank and return its odd size s."""
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
        raise ShapeError(f"filter bank must have shape (out, in, s, s), got {filters.shape}")
    s = filters.shape[2]
    if s < 1 or s % 2 == 0:
        raise ShapeError(f"filter size must be odd and >= 1, got {s}")
    return s


def im2col(x: np.ndarray, size: int) -> np.ndarray:
    """Zero-pad ``x`` by (size-1)/2 and unfold its receptive fields.

    Returns an array of shape (C*size*size, B*H*W); row order is (c, i, j),
    matching ``filters.reshape(out, -1)``, column order is (b, h, w).
    """
    b, c, h, w = x.shape
    p = (size - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((c, size, size, b, h, w), dtype=DTYPE)
    for i in range(size):
        for j in range(size):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * size * size, b * h * w)


def conv2d_same(x: np.ndarray, filters: np.ndarray, bias: np.ndarray | None = None,
                cols: np.ndarray | None = None) -> np.ndarray:
    """Stride-1 convolution (cross-correlation) with zero 'same' padding.

    ``cols`` may carry a precomputed ``im2col(x, s)`` to avoid unfolding twice.
    """
    if x.ndim != 4:
        raise ShapeError(f"input must be rank 4 (B, C, H, W), got shape {x.shape}")
    s = check_filters(filters)
    if filters.shape[1] != x.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but filter bank "
            f"shape {filters.shape} expects {filters.shape[1]}")
    b, _, h, w = x.shape
    cout = filters.shape[0]
    if cols is None:
        cols = im2col(x, s)
    out = filters.reshape(cout, -1) @ cols
    if bias is not None:
        if np.shape(bias) != (cout,):
            raise ShapeError(f"bias shape {np.shape(bias)} does not match {cout} output channels")
        out += np.asarray(bias)[:, None]
    return np.ascontiguousarray(out.reshape(cout, b, h, w).transpose(1, 0, 2, 3))


def conv2d_same_backward(dout: np.ndarray, x: np.ndarray, filters: np.ndarray,
                         cols: np.ndarray | None = None, need_input: bool = True):
    """Gradients of ``conv2d_same`` w.r.t. input, filters and bias.

    Returns ``(dx, dfilters, dbias)``; ``dx`` is None when ``need_input`` is
    false.
    """
    s = check_filters(filters)
    cout = filters.shape[0]
    if cols is None:
        cols = im2col(x, s)
    dflat = dout.transpose(1, 0, 2, 3).reshape(cout, -1)
    dfilters = (dflat @ cols.T).reshape(filters.shape)
    dbias = dout.sum(axis=(0, 2, 3))
    dx = None
    if need_input:
        # transposed convolution == same-conv with flipped, channel-swapped kernels
        flipped = np.ascontiguousarray(filters[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx = conv2d_same(dout, flipped)
    return dx, dfilters, dbias


def avg_pool(x: np.ndarray, window: int, stride: int) -> np.ndarray:
    if window < 1 or stride < 1:
        raise ValueError(f"window and stride must be >= 1, got {window}, {stride}")
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pooling window {window} exceeds input spatial extent {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    if window == stride:
        crop = x[:, :, :ho * window, :wo * window]
        return crop.reshape(b, c, ho, window, wo, window).mean(axis=(3, 5))
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.mean(axis=(4, 5))


def avg_pool_backward(dout: np.ndarray, input_shape, window: int, stride: int) -> np.ndarray:
    b, c, h, w = input_shape
    ho, wo = dout.shape[2:]
    dx = np.zeros(input_shape, dtype=DTYPE)
    share = dout / (window * window)
    if window == stride:
        dx[:, :, :ho * window, :wo * window] = np.repeat(np.repeat(share, window, axis=2), window, axis=3)
        return dx
    for i in range(window):
        for j in range(window):
            dx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += share
    return dx


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def linear(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"cannot apply weights of shape {weights.shape} to input of shape {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match weights shape {weights.shape}")
    return x @ weights.T + bias


def linear_backward(dout: np.ndarray, x: np.ndarray, weights: np.ndarray):
    """Return ``(dx, dweights, dbias)`` for ``linear``."""
    return dout @ weights, dout.T @ x, dout.sum(axis=0)
