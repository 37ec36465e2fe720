"""Convolution with a learnable, continuous filter size.

A layer of continuous size ``k`` stores a single odd-sized "upper" filter
bank of size ``k_plus``.  The "lower" filter is its inner ``k_minus`` block
and the ring between them is blended in with weight ``alpha``, so the layer
performs exactly one convolution per forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE, ShapeError, check_filters, conv2d_same, im2col

K_MIN = 1.0
K_MAX = 11.0


@dataclass(frozen=True)
class ContinuousFilterSize:
    k: float
    k_minus: int
    k_plus: int
    alpha: float

    def contains(self, k: float) -> bool:
        return self.k_minus <= k < self.k_plus


def bounds_of(k: float) -> ContinuousFilterSize:
    """Odd bracketing sizes and interpolation weight for a continuous size."""
    k = float(k)
    if not math.isfinite(k) or k < 1.0:
        raise ValueError(f"filter size must be a finite value >= 1, got {k}")
    half = math.floor((k + 1.0) / 2.0)
    k_minus = half * 2 - 1
    return ContinuousFilterSize(k=k, k_minus=k_minus, k_plus=k_minus + 2,
                                alpha=(k - k_minus) / 2.0)


def ring_mask(size: int) -> np.ndarray:
    """Boolean (size, size) mask of the outer one-pixel border."""
    mask = np.ones((size, size), dtype=bool)
    if size > 2:
        mask[1:-1, 1:-1] = False
    return mask


def ring_only(filters: np.ndarray) -> np.ndarray:
    """Copy of ``filters`` with the inner block zeroed (the ring part)."""
    return filters * ring_mask(filters.shape[-1])


def lower_padded(filters: np.ndarray) -> np.ndarray:
    """Copy of ``filters`` with the outer ring zeroed (zero-padded lower filter)."""
    return filters * ~ring_mask(filters.shape[-1])


def composite_filter(upper: np.ndarray, alpha: float) -> np.ndarray:
    """Inner block unchanged, outer ring scaled by ``alpha``."""
    out = upper.copy()
    out[..., 0, :] *= alpha
    out[..., -1, :] *= alpha
    out[..., 1:-1, 0] *= alpha
    out[..., 1:-1, -1] *= alpha
    return out


def expand_filters(filters: np.ndarray) -> np.ndarray:
    """Grow spatial size by 2, filling the new border from nearest neighbours."""
    check_filters(filters)
    return np.pad(filters, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")


def shrink_filters(filters: np.ndarray) -> np.ndarray:
    """Zero the outer border, keeping the array size."""
    s = check_filters(filters)
    if s < 3:
        raise ValueError("cannot shrink a 1x1 filter")
    return lower_padded(filters)


def init_filters(rng: np.random.Generator, out_channels: int, in_channels: int, size: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(in_channels * size * size)
    return rng.uniform(-bound, bound, size=(out_channels, in_channels, size, size))


class OfsConv2d:
    """Same-padded convolution whose filter size ``k`` is a trainable scalar.

    All output channels share one size.  ``weight`` always has spatial size
    ``size.k_plus``; the velocity buffers follow it through expand/shrink.
    """

    def __init__(self, in_channels: int, out_channels: int, k: float = 4.0,
                 rng: np.random.Generator | None = None,
                 k_min: float = K_MIN, k_max: float = K_MAX,
                 weight: np.ndarray | None = None, bias: np.ndarray | None = None):
        if not 1.0 <= k_min <= k_max:
            raise ValueError(f"invalid size clamp [{k_min}, {k_max}]")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k_min = float(k_min)
        self.k_max = float(k_max)
        self.size = bounds_of(min(max(k, k_min), k_max))
        s = self.size.k_plus
        if weight is None:
            rng = np.random.default_rng() if rng is None else rng
            # inner block drawn exactly like a fixed layer of size k_minus
            inner = init_filters(rng, out_channels, in_channels, self.size.k_minus)
            bound = 1.0 / math.sqrt(in_channels * self.size.k_minus ** 2)
            weight = np.zeros((out_channels, in_channels, s, s))
            mask = ring_mask(s)
            weight[:, :, 1:-1, 1:-1] = inner
            weight[:, :, mask] = rng.uniform(-bound, bound, size=(out_channels, in_channels, int(mask.sum())))
        weight = np.array(weight, dtype=DTYPE)
        if weight.shape != (out_channels, in_channels, s, s):
            raise ShapeError(f"weight shape {weight.shape} does not match "
                             f"{(out_channels, in_channels, s, s)} for k={self.size.k}")
        self.weight = weight
        self.bias = np.zeros(out_channels) if bias is None else np.array(bias, dtype=DTYPE)
        self.weight_velocity = np.zeros_like(self.weight)
        self.bias_velocity = np.zeros_like(self.bias)
        self.size_velocity = 0.0
        self.need_input_grad = True
        self.grads: dict = {}
        self._x = None
        self._cols = None

    # -- size bookkeeping -------------------------------------------------
    @property
    def k(self) -> float:
        return self.size.k

    def set_size(self, k: float) -> None:
        """Move ``k`` inside the current interval without touching weights."""
        if not self.size.contains(k):
            raise ValueError(f"k={k} leaves the interval [{self.size.k_minus}, {self.size.k_plus})")
        self.size = bounds_of(k)

    def composite(self) -> np.ndarray:
        return composite_filter(self.weight, self.size.alpha)

    # -- forward ------------------------------------------------------------
    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"input shape {x.shape} incompatible with weight shape {self.weight.shape}")
        self._x = x
        self._cols = im2col(x, self.size.k_plus)
        return conv2d_same(x, self.composite(), self.bias, cols=self._cols)

    __call__ = forward

    def forward_interp_oracle(self, x: np.ndarray) -> np.ndarray:
        """Blend of two separate convolutions (upper and zero-padded lower)."""
        a = self.size.alpha
        y_upper = conv2d_same(x, self.weight, self.bias)
        y_lower = conv2d_same(x, lower_padded(self.weight), self.bias)
        return a * y_upper + (1.0 - a) * y_lower

    # -- backward -----------------------------------------------------------
    def _require_cache(self):
        if self._x is None:
            raise RuntimeError("backward called before forward")

    def _upper_weight_grad(self, upstream: np.ndarray) -> np.ndarray:
        """Sum over batch/positions of upstream times the k_plus receptive field."""
        self._require_cache()
        dflat = upstream.transpose(1, 0, 2, 3).reshape(self.out_channels, -1)
        return (dflat @ self._cols.T).reshape(self.weight.shape)

    def _size_grad_from(self, full: np.ndarray) -> float:
        ring = ring_mask(self.size.k_plus)
        return float(np.sum(self.weight[:, :, ring] * full[:, :, ring])) / (self.size.k_plus - self.size.k_minus)

    def _filter_grad_from(self, full: np.ndarray) -> np.ndarray:
        return composite_filter(full, self.size.alpha)

    def grad_size(self, upstream: np.ndarray) -> float:
        return self._size_grad_from(self._upper_weight_grad(upstream))

    def grad_filters(self, upstream: np.ndarray) -> np.ndarray:
        return self._filter_grad_from(self._upper_weight_grad(upstream))

    def grad_bias(self, upstream: np.ndarray) -> np.ndarray:
        self._require_cache()
        return upstream.sum(axis=(0, 2, 3))

    def grad_input(self, upstream: np.ndarray) -> np.ndarray:
        self._require_cache()
        w = self.composite()
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        return conv2d_same(upstream, flipped)

    def backward(self, upstream: np.ndarray):
        full = self._upper_weight_grad(upstream)
        self.grads = {
            "weight": self._filter_grad_from(full),
            "bias": upstream.sum(axis=(0, 2, 3)),
            "k": self._size_grad_from(full),
        }
        return self.grad_input(upstream) if self.need_input_grad else None

    # -- updates ------------------------------------------------------------
    def sgd_step_size(self, grad: float, gamma: float, momentum: float) -> float:
        """Momentum-SGD step on ``k``, clamped; does not transform the filters."""
        if gamma < 0 or not 0 <= momentum < 1:
            raise ValueError(f"need gamma >= 0 and momentum in [0, 1), got {gamma}, {momentum}")
        self.size_velocity = momentum * self.size_velocity + grad
        return min(max(self.size.k - gamma * self.size_velocity, self.k_min), self.k_max)

    def transform_if_needed(self, k_new: float) -> str | None:
        """Adopt ``k_new``, expanding or shrinking the stored filters as needed.

        Returns "expand", "shrink" or None.  A jump of several intervals
        repeats the single-step transformation.
        """
        k_new = min(max(float(k_new), self.k_min), self.k_max)
        event = None
        while k_new >= self.size.k_plus:
            self.weight = expand_filters(self.weight)
            self.weight_velocity = np.pad(self.weight_velocity, ((0, 0), (0, 0), (1, 1), (1, 1)))
            self.size = bounds_of(self.size.k_plus)
            event = "expand"
        while k_new < self.size.k_minus:
            self.weight = np.ascontiguousarray(self.weight[:, :, 1:-1, 1:-1])
            self.weight_velocity = np.ascontiguousarray(self.weight_velocity[:, :, 1:-1, 1:-1])
            self.size = bounds_of(self.size.k_minus - 2)
            event = "shrink"
        self.size = bounds_of(k_new)
        assert self.weight.shape[-1] == self.size.k_plus
        self._x = self._cols = None
        return event

    def state_dict(self) -> dict:
        return {
            "k": self.size.k, "k_minus": self.size.k_minus, "k_plus": self.size.k_plus,
            "alpha": self.size.alpha, "k_min": self.k_min, "k_max": self.k_max,
            "weight": self.weight.copy(), "bias": self.bias.copy(),
            "weight_velocity": self.weight_velocity.copy(),
            "bias_velocity": self.bias_velocity.copy(),
            "size_velocity": self.size_velocity,
        }

    def load_state_dict(self, state: dict) -> None:
        size = bounds_of(state["k"])
        weight = np.array(state["weight"], dtype=DTYPE)
        if weight.shape[-1] != size.k_plus:
            raise ShapeError(f"stored weight size {weight.shape[-1]} does not match k_plus={size.k_plus}")
        self.size = size
        self.k_min = float(state.get("k_min", self.k_min))
        self.k_max = float(state.get("k_max", self.k_max))
        self.weight = weight
        self.bias = np.array(state["bias"], dtype=DTYPE)
        self.weight_velocity = np.array(state.get("weight_velocity", np.zeros_like(weight)), dtype=DTYPE)
        self.bias_velocity = np.array(state.get("bias_velocity", np.zeros_like(self.bias)), dtype=DTYPE)
        self.size_velocity = float(state.get("size_velocity", 0.0))
        self._x = self._cols = None
