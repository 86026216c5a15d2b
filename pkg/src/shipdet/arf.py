"""Active rotating filters and orientation pooling.

An ARF layer owns ``M`` base filters and materializes each in ``N`` clockwise
rotated copies; the clones share the base weights, so gradients of all copies
flow back into the base filter.  Output channels are filter-major,
orientation-minor (channel ``m * N + k``).
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .tensor import Layer, Param, ShapeError, check_tensor4, conv2d, conv2d_backward, gaussian

# clockwise walk around a 3x3 grid, starting top-left
_BORDER3 = ((0, 0), (0, 1), (0, 2), (1, 2), (2, 2), (2, 1), (2, 0), (1, 0))


@lru_cache(maxsize=None)
def rotation_operator(k: int, step: int, n: int) -> np.ndarray:
    """Matrix ``R`` with ``clone.ravel() = R @ base.ravel()`` for one k x k plane.

    3x3 filters with 8 orientations rotate exactly by shifting the border ring;
    every other case resamples the grid bilinearly (zero outside).
    """
    step %= n
    R = np.zeros((k * k, k * k))
    if k == 3 and n == 8:
        R[4, 4] = 1.0
        for p, (r, c) in enumerate(_BORDER3):
            r2, c2 = _BORDER3[(p + step) % 8]
            R[r2 * 3 + c2, r * 3 + c] = 1.0
        return R
    a = 2 * math.pi * step / n
    ca, sa = math.cos(a), math.sin(a)
    half = (k - 1) / 2
    for r in range(k):
        for c in range(k):
            dx, dy = c - half, r - half
            # source of a clockwise turn (rows grow downward)
            sx = dx * ca + dy * sa + half
            sy = -dx * sa + dy * ca + half
            sx, sy = round(sx, 12), round(sy, 12)
            x0, y0 = math.floor(sx), math.floor(sy)
            fx, fy = sx - x0, sy - y0
            for yy, xx, wgt in (
                (y0, x0, (1 - fx) * (1 - fy)),
                (y0, x0 + 1, fx * (1 - fy)),
                (y0 + 1, x0, (1 - fx) * fy),
                (y0 + 1, x0 + 1, fx * fy),
            ):
                if wgt and 0 <= yy < k and 0 <= xx < k:
                    R[r * k + c, yy * k + xx] += wgt
    return R


def rotate_filter(base, step, n):
    """Rotate filter(s) ``(..., k, k)`` clockwise by ``2 pi step / n``."""
    base = np.asarray(base)
    k = base.shape[-1]
    R = rotation_operator(k, step % n, n).astype(base.dtype)
    flat = base.reshape(-1, k * k) @ R.T
    return flat.reshape(base.shape)


def materialize(base, n):
    """(M, in, k, k) base filters -> (M*n, in, k, k) clones, filter-major."""
    M, C, k, _ = base.shape
    flat = base.reshape(M, C, k * k)
    clones = np.stack([flat @ rotation_operator(k, s, n).T.astype(base.dtype) for s in range(n)], axis=1)
    return clones.reshape(M * n, C, k, k)


def materialize_backward(dclones, base_shape, n):
    M, C, k, _ = base_shape
    d = dclones.reshape(M, n, C, k * k)
    out = np.zeros((M, C, k * k), dtype=dclones.dtype)
    for s in range(n):
        out += d[:, s] @ rotation_operator(k, s, n).astype(dclones.dtype)
    return out.reshape(base_shape)


def multi_oriented_response(x, base, n, stride=1, pad=None):
    """Convolve ``x`` with every rotated clone of every base filter."""
    check_tensor4(x, "input")
    if x.shape[1] != base.shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match bank shape {base.shape}")
    k = base.shape[-1]
    pad = k // 2 if pad is None else pad
    out, conv_cache = conv2d(x, materialize(base, n), None, stride, pad)
    return out, (conv_cache, base.shape, n)


def multi_oriented_response_backward(dout, cache):
    """Returns (dx, dbase)."""
    conv_cache, base_shape, n = cache
    dx, dclones, _ = conv2d_backward(dout, conv_cache)
    return dx, materialize_backward(dclones, base_shape, n)


def orientation_pool(resp, n):
    """Max over each group of ``n`` orientation channels."""
    check_tensor4(resp, "response")
    B, C, H, W = resp.shape
    if C % n:
        raise ShapeError(f"channel count {C} not divisible by {n} orientations")
    r = resp.reshape(B, C // n, n, H, W)
    idx = np.argmax(r, axis=2)  # first maximum wins ties
    out = np.take_along_axis(r, idx[:, :, None], axis=2)[:, :, 0]
    return out, (resp.shape, idx, n)


def orientation_pool_backward(dout, cache):
    shape, idx, n = cache
    B, C, H, W = shape
    d = np.zeros((B, C // n, n, H, W), dtype=dout.dtype)
    np.put_along_axis(d, idx[:, :, None], dout[:, :, None], axis=2)
    return d.reshape(shape)


class ARFLayer(Layer):
    """``M`` active rotating filters with ``N`` orientations, no bias."""

    def __init__(self, n_in, n_filters, n_orient, rng, k=3, std=0.01, dtype=np.float32):
        if std == "he":
            std = math.sqrt(2.0 / (n_in * k * k))
        self.base = Param(gaussian(rng, (n_filters, n_in, k, k), std, dtype))
        self.n_orient = n_orient

    @property
    def n_out(self):
        return self.base.value.shape[0] * self.n_orient

    def forward(self, x):
        out, self._cache = multi_oriented_response(x, self.base.value, self.n_orient)
        return out

    def backward(self, dout):
        dx, dbase = multi_oriented_response_backward(dout, self._cache)
        self.base.grad += dbase
        return dx


class OrientationPool(Layer):
    def __init__(self, n_orient):
        self.n_orient = n_orient

    def forward(self, x):
        out, self._cache = orientation_pool(x, self.n_orient)
        return out

    def backward(self, dout):
        return orientation_pool_backward(dout, self._cache)
