"""Dense 4-axis tensor kernels with hand-written backward passes.

Feature maps and filter weights are plain numpy arrays laid out as
(batch, channel, row, column).  Every kernel comes as a forward function that
returns ``(out, cache)`` and a backward function that consumes the cache.
``Layer`` subclasses wrap the kernels and accumulate into ``Param.grad``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse

CHECKPOINT_MAGIC = b"SHIPDETCKPT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


def check_tensor4(x: np.ndarray, name: str = "tensor") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (batch, channel, height, width), got shape {x.shape}")


def assert_finite(x: np.ndarray, name: str = "tensor") -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {name}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv2d(x, w, b=None, stride=1, pad=0):
    """Zero-padded cross-correlation.  ``w`` is (out_ch, in_ch, k, k)."""
    check_tensor4(x, "input")
    check_tensor4(w, "weights")
    n_out, n_in, kh, kw = w.shape
    if kh != kw:
        raise ShapeError(f"weights must be square, got {w.shape}")
    if x.shape[1] != n_in:
        raise ShapeError(f"input shape {x.shape} does not match weights shape {w.shape}")
    if b is not None and b.shape != (n_out,):
        raise ShapeError(f"bias shape {b.shape} does not match weights shape {w.shape}")
    B, C, H, W = x.shape
    k = kh
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"input shape {x.shape} too small for weights shape {w.shape}")
    # im2col in (row, col, channel) order: channels stay contiguous
    xh = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=x.dtype)
    xh[:, pad : pad + H, pad : pad + W] = x.transpose(0, 2, 3, 1)
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xh[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
    cols = cols.reshape(B * Ho * Wo, k * k * C)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(n_out, -1).T
    if b is not None:
        out += b
    out = out.reshape(B, Ho, Wo, n_out).transpose(0, 3, 1, 2)
    cache = (x.shape, w, cols, stride, pad, b is not None)
    return np.ascontiguousarray(out), cache


def conv2d_backward(dout, cache, need_dx=True):
    """Returns (dx, dw, db); db is None without a bias, dx is None unless ``need_dx``."""
    x_shape, w, cols, stride, pad, has_bias = cache
    dout = dout.astype(w.dtype, copy=False)
    B, C, H, W = x_shape
    n_out, _, k, _ = w.shape
    Ho, Wo = dout.shape[2], dout.shape[3]
    d = dout.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, n_out)
    dw = (d.T @ cols).reshape(n_out, k, k, C).transpose(0, 3, 1, 2)
    db = d.sum(axis=0) if has_bias else None
    if not need_dx:
        return None, np.ascontiguousarray(dw), db
    if stride == 1 and 1 < k and pad <= k - 1:
        # full correlation of dout with the flipped, transposed kernel
        wt = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx, _ = conv2d(dout, wt, None, 1, k - 1 - pad)
        return dx, np.ascontiguousarray(dw), db
    dcols = (d @ w.transpose(0, 2, 3, 1).reshape(n_out, -1)).reshape(B, Ho, Wo, k, k, C)
    dxh = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxh[:, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[:, :, :, i, j]
    dx = dxh[:, pad : pad + H, pad : pad + W].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw), db


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _corners(x, y, H, W):
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    xs = np.stack([x0, x0 + 1, x0, x0 + 1], axis=-1)
    ys = np.stack([y0, y0, y0 + 1, y0 + 1], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    valid = (xs >= 0) & (xs < W) & (ys >= 0) & (ys < H)
    return xs, ys, wts, valid, fx, fy


def bilinear_sample(fmap, batch, x, y):
    """Sample ``fmap[batch]`` at continuous pixel coordinates.

    ``x`` indexes columns and ``y`` rows; integer coordinates hit lattice
    points exactly.  Reads outside the map are zero.  Returns an array of
    shape ``x.shape + (channels,)``.
    """
    check_tensor4(fmap, "map")
    x = np.asarray(x, dtype=fmap.dtype)
    y = np.asarray(y, dtype=fmap.dtype)
    batch = np.broadcast_to(np.asarray(batch, dtype=np.int64), x.shape)
    _, C, H, W = fmap.shape
    xs, ys, wts, valid, fx, fy = _corners(x, y, H, W)
    xi = np.where(valid, xs, 0)
    yi = np.where(valid, ys, 0)
    bi = np.broadcast_to(batch[..., None], xi.shape)
    vals = fmap[bi, :, yi, xi]  # (..., 4, C)
    vals = vals * valid[..., None]
    out = np.einsum("...k,...kc->...c", wts, vals)
    cache = (fmap.shape, bi, xi, yi, wts, valid, vals, fx, fy)
    return out, cache


def bilinear_sample_backward(dout, cache):
    """Returns (dmap, dx, dy) for the samples of :func:`bilinear_sample`."""
    shape, bi, xi, yi, wts, valid, vals, fx, fy = cache
    dout = dout.astype(vals.dtype, copy=False)
    contrib = (wts * valid)[..., None] * dout[..., None, :]  # (..., 4, C)
    B, C, H, W = shape
    idx = ((bi * H + yi) * W + xi).reshape(-1)
    # scatter-add as a sparse product; duplicate targets are summed
    scatter = sparse.csr_matrix((np.ones(len(idx), dtype=dout.dtype), (idx, np.arange(len(idx)))),
                                shape=(B * H * W, len(idx)))
    flat = np.asarray(scatter @ contrib.reshape(-1, C))
    dmap = flat.reshape(B, H, W, C).transpose(0, 3, 1, 2)
    v00, v01, v10, v11 = (vals[..., i, :] for i in range(4))
    fy_ = fy[..., None]
    fx_ = fx[..., None]
    dvdx = (1 - fy_) * (v01 - v00) + fy_ * (v11 - v10)
    dvdy = (1 - fx_) * (v10 - v00) + fx_ * (v11 - v01)
    dx = np.sum(dvdx * dout, axis=-1)
    dy = np.sum(dvdy * dout, axis=-1)
    return np.ascontiguousarray(dmap), dx, dy


# ---------------------------------------------------------------------------
# resampling and rearrangement
# ---------------------------------------------------------------------------

def _upsample_matrix(n, dtype):
    # out[2i] = in[i], out[2i+1] = (in[i] + in[i+1]) / 2, edge replicated
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(n):
        m[2 * i, i] = 1.0
        m[2 * i + 1, i] += 0.5
        m[2 * i + 1, min(i + 1, n - 1)] += 0.5
    return m


def upsample2x(x):
    check_tensor4(x, "input")
    mh = _upsample_matrix(x.shape[2], x.dtype)
    mw = _upsample_matrix(x.shape[3], x.dtype)
    out = np.einsum("ih,bchw,jw->bcij", mh, x, mw, optimize=True)
    return out, (mh, mw)


def upsample2x_backward(dout, cache):
    mh, mw = cache
    return np.einsum("ih,bcij,jw->bchw", mh, dout, mw, optimize=True)


def space_to_depth(x, block):
    """(B, C, H, W) -> (B, C*block^2, H/block, W/block), channel = c*block^2 + di*block + dj."""
    check_tensor4(x, "input")
    B, C, H, W = x.shape
    if H % block or W % block:
        raise ShapeError(f"spatial size {H}x{W} not divisible by block {block}")
    y = x.reshape(B, C, H // block, block, W // block, block).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(B, C * block * block, H // block, W // block))


def depth_to_space(x, block):
    B, Cb, h, w = x.shape
    if Cb % (block * block):
        raise ShapeError(f"channel count {Cb} not divisible by block^2 = {block * block}")
    C = Cb // (block * block)
    y = x.reshape(B, C, block, block, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(B, C, h * block, w * block))


# ---------------------------------------------------------------------------
# dense layers and activations
# ---------------------------------------------------------------------------

def fully_connected(x, w, b):
    """``x`` is (n, in) or (in,), ``w`` is (out, in)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input shape {x.shape} does not match weights shape {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {b.shape} does not match weights shape {w.shape}")
    return x @ w.T + b, (x, w)


def fully_connected_backward(dout, cache):
    x, w = cache
    dout = dout.astype(w.dtype, copy=False)
    dx = dout @ w
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dx, d2.T @ x2, d2.sum(axis=0)


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------------------
# parameters, layers, optimizer
# ---------------------------------------------------------------------------

@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad[...] = 0


class Layer:
    """Base class: subclasses register ``Param`` attributes and sub-layers."""

    def params(self, prefix=""):
        out = {}
        for name, val in vars(self).items():
            if isinstance(val, Param):
                out[prefix + name] = val
            elif isinstance(val, Layer):
                out.update(val.params(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        out.update(item.params(f"{prefix}{name}.{i}."))
        return out


def gaussian(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Layer):
    def __init__(self, n_in, n_out, k, rng, stride=1, pad=None, std=0.01, dtype=np.float32):
        if std == "he":
            std = np.sqrt(2.0 / (n_in * k * k))
        self.weight = Param(gaussian(rng, (n_out, n_in, k, k), std, dtype))
        self.bias = Param(np.zeros(n_out, dtype=dtype))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        self.input_grad = True  # False skips dx, e.g. for a layer fed by raw pixels

    def forward(self, x):
        out, self._cache = conv2d(x, self.weight.value, self.bias.value, self.stride, self.pad)
        return out

    def backward(self, dout):
        dx, dw, db = conv2d_backward(dout, self._cache, self.input_grad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class Linear(Layer):
    def __init__(self, n_in, n_out, rng, std=0.01, dtype=np.float32):
        self.weight = Param(gaussian(rng, (n_out, n_in), std, dtype))
        self.bias = Param(np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        out, self._cache = fully_connected(x, self.weight.value, self.bias.value)
        return out

    def backward(self, dout):
        dx, dw, db = fully_connected_backward(dout, self._cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx


class ReLU(Layer):
    def forward(self, x):
        out, self._mask = relu(x)
        return out

    def backward(self, dout):
        return relu_backward(dout, self._mask)


class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        if min(lr, beta1, beta2, eps) <= 0:
            raise ValueError("Adam hyperparameters must be positive")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for p in self.params.values():
            g = p.grad.astype(p.m.dtype, copy=False)
            p.m *= b1
            p.m += (1 - b1) * g
            p.v *= b2
            p.v += (1 - b2) * g * g
            # update = (m / c1) / (sqrt(v / c2) + eps), built in place
            update = p.v / c2
            np.sqrt(update, out=update)
            update += self.eps
            np.divide(p.m, update, out=update)
            update /= c1
            if self.weight_decay:
                update += self.weight_decay * p.value
            update *= self.lr
            p.value -= update.astype(p.value.dtype, copy=False)


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0, t=0):
    """One functional Adam update; returns the new step counter."""
    opt = Adam(params, lr, beta1, beta2, eps, weight_decay)
    opt.t = t
    opt.step()
    return opt.t


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Write a JSON manifest line followed by little-endian float32 payloads.

    Layout: ``SHIPDETCKPT`` magic, uint32-LE header length, UTF-8 JSON header
    ``{"version", "meta", "entries": [{"name", "shape", "offset"}]}``, then the
    concatenated arrays.  Offsets are byte offsets into the payload.
    """
    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape, dtype=np.int64)) * 4
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta or {}, "entries": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, expected_shapes: dict | None = None):
    """Read a checkpoint; returns (arrays, meta).

    When ``expected_shapes`` is given every named entry must be present with
    the same shape.
    """
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", data, pos)
        header = json.loads(data[pos + 4 : pos + 4 + hlen])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('version')!r}")
    payload = memoryview(data)[pos + 4 + hlen :]
    arrays = {}
    for entry in header["entries"]:
        name = entry.get("name")
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed manifest entry {name!r}") from None
        count = int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset + 4 * count > len(payload):
            raise CheckpointError(f"{path}: entry {name!r} runs past end of file")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise CheckpointError(f"{path}: missing entry {name!r}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise CheckpointError(
                    f"{path}: entry {name!r} has shape {arrays[name].shape}, model expects {tuple(shape)}"
                )
    return arrays, header.get("meta", {})
