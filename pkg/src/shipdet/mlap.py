"""Multilevel adaptive pooling.

Each proposal is summarized by 49 bilinear samples arranged on three
concentric rectangles (6/7, 4/7 and 2/7 of the proposal) plus the center.
Samples are evenly spaced by arc length, so the pattern stretches with the
proposal's aspect ratio.  Outer rings read lower (finer) feature levels,
inner rings higher ones.  The pooled grid places ring ``r`` on the ``r``-th
concentric square ring of the 7x7 output.

All levels are first brought to a common grid and channel count by
:class:`LevelSmoother`, so one sampling coordinate serves every level.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Conv2d,
    Layer,
    ShapeError,
    bilinear_sample,
    bilinear_sample_backward,
    space_to_depth,
    depth_to_space,
    upsample2x,
    upsample2x_backward,
)

OUT_SIZE = 7
RING_FRACTIONS = (6 / 7, 4 / 7, 2 / 7)
RING_COUNTS = (24, 16, 8)
GROUP_SIZES = (24, 16, 9)
POOL_MODES = ("standard", "reverse", "channel_concat")
PATTERNS = ("ring", "typical")

# group index per sample in ring order: 0 outer, 1 middle, 2 inner ring, 3 center
SAMPLE_GROUP = np.repeat([0, 1, 2, 3], [24, 16, 8, 1])

# levels (0 = lowest used) feeding groups (outer, middle, inner, center)
LEVEL_TABLE = {
    1: (0, 0, 0, 0),
    2: (0, 1, 1, 1),
    3: (0, 1, 2, 2),
    4: (0, 1, 2, 3),
    5: (0, 1, 3, 4),
}


def _grid_ring_cells(size=OUT_SIZE):
    """Flat cell indices of each concentric ring, clockwise from its top-left cell."""
    cells = []
    for r in range(size // 2):
        lo, hi = r, size - 1 - r
        ring = [(lo, j) for j in range(lo, hi + 1)]
        ring += [(i, hi) for i in range(lo + 1, hi + 1)]
        ring += [(hi, j) for j in range(hi - 1, lo - 1, -1)]
        ring += [(i, lo) for i in range(hi - 1, lo, -1)]
        cells += [i * size + j for i, j in ring]
    c = size // 2
    cells.append(c * size + c)
    return np.array(cells)


GRID_CELLS = _grid_ring_cells()


def _cell_groups(size=OUT_SIZE):
    i, j = np.divmod(np.arange(size * size), size)
    ring = np.minimum(np.minimum(i, j), np.minimum(size - 1 - i, size - 1 - j))
    return np.where(ring == size // 2, 3, ring)


CELL_GROUP = _cell_groups()


def level_map(n_levels, mode="standard"):
    """Level index for each of the four sample groups."""
    if n_levels not in LEVEL_TABLE:
        raise ValueError(f"unsupported level count {n_levels}")
    if mode not in POOL_MODES:
        raise ValueError(f"unknown pooling mode {mode!r}")
    table = np.array(LEVEL_TABLE[n_levels])
    return n_levels - 1 - table if mode == "reverse" else table


def enlarge(boxes, factor=1.2):
    """Scale w and h of (N, 5) boxes; center and angle are kept."""
    if factor < 1:
        raise ValueError("enlargement factor must be >= 1")
    out = np.array(boxes, dtype=np.float64, copy=True)
    out[..., 2:4] *= factor
    return out


def _rect_walk(hw, hh, s):
    """Point at arc length ``s`` along the rectangle [-hw, hw] x [-hh, hh].

    The walk starts at the top-left corner (v = -hh) and goes clockwise:
    top edge, right edge, bottom edge, left edge.
    """
    top = 2 * hw
    right = top + 2 * hh
    bottom = right + 2 * hw
    u = np.where(
        s < top, -hw + s,
        np.where(s < right, hw, np.where(s < bottom, hw - (s - right), -hw)),
    )
    v = np.where(
        s < top, -hh,
        np.where(s < right, -hh + (s - top), np.where(s < bottom, hh, hh - (s - bottom))),
    )
    return u, v


def ring_local_points(w, h):
    """(..., 49, 2) proposal-local ``(u, v)`` samples in ring order."""
    w = np.asarray(w, dtype=np.float64)[..., None]
    h = np.asarray(h, dtype=np.float64)[..., None]
    us, vs = [], []
    for f, n in zip(RING_FRACTIONS, RING_COUNTS):
        hw, hh = f * w / 2, f * h / 2
        s = (np.arange(n) + 0.5) / n * (4 * (hw + hh))
        u, v = _rect_walk(hw, hh, s)
        us.append(u)
        vs.append(v)
    us.append(np.zeros_like(w))
    vs.append(np.zeros_like(w))
    return np.stack([np.concatenate(us, -1), np.concatenate(vs, -1)], axis=-1)


def typical_local_points(w, h, size=OUT_SIZE):
    """(..., size*size, 2) bin centers of a regular rotated grid, row-major."""
    w = np.asarray(w, dtype=np.float64)[..., None]
    h = np.asarray(h, dtype=np.float64)[..., None]
    i, j = np.divmod(np.arange(size * size), size)
    u = ((j + 0.5) / size - 0.5) * w
    v = ((i + 0.5) / size - 0.5) * h
    return np.stack([u, v], axis=-1)


def to_image(boxes, local):
    """Rotate and translate local ``(u, v)`` samples by each box's pose."""
    b = np.asarray(boxes, dtype=np.float64)
    c, s = np.cos(b[..., 4])[..., None], np.sin(b[..., 4])[..., None]
    u, v = local[..., 0], local[..., 1]
    return np.stack([b[..., 0, None] + c * u - s * v, b[..., 1, None] + s * u + c * v], axis=-1)


@dataclass
class RingPattern:
    local: np.ndarray  # (49, 2) proposal-local coordinates
    points: np.ndarray  # (49, 2) image coordinates
    group: np.ndarray  # (49,) 0 outer, 1 middle, 2 inner, 3 center
    level: np.ndarray  # (49,) source level
    cell: np.ndarray  # (49,) flat 7x7 output cell

    @property
    def ring(self):
        """Ring index with the center counted in the inner ring."""
        return np.minimum(self.group, 2)


def ring_sample_points(box, n_levels=3, mode="standard"):
    local = ring_local_points(box[2], box[3])
    levels = level_map(n_levels, mode if mode != "channel_concat" else "standard")
    return RingPattern(local, to_image(box, local), SAMPLE_GROUP.copy(), levels[SAMPLE_GROUP], GRID_CELLS.copy())


def sample_layout(boxes, pattern="ring"):
    """Image-space sample points (P, 49, 2), their groups (49,) and output cells (49,)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    if pattern == "ring":
        return to_image(boxes, ring_local_points(boxes[:, 2], boxes[:, 3])), SAMPLE_GROUP, GRID_CELLS
    if pattern == "typical":
        cells = np.arange(OUT_SIZE * OUT_SIZE)
        return to_image(boxes, typical_local_points(boxes[:, 2], boxes[:, 3])), CELL_GROUP, cells
    raise ValueError(f"unknown sampling pattern {pattern!r}")


def adaptive_pool(levels, batch_idx, boxes, stride, mode="standard", pattern="ring"):
    """Pool rotated proposals from unified levels.

    ``levels`` is a list of same-shaped (B, C, H, W) maps ordered from the
    lowest to the highest level, all on a grid of ``stride`` image pixels
    (cell ``j`` centered at ``(j + 0.5) * stride``).  Returns
    ``(pooled (P, C', 7, 7), cache)`` with ``C' = C`` or ``3C`` for
    ``channel_concat`` over three levels.
    """
    L = len(levels)
    shape = levels[0].shape
    if any(lv.shape != shape for lv in levels):
        raise ShapeError(f"level shapes differ: {[lv.shape for lv in levels]}")
    B, C = shape[:2]
    stack = np.concatenate(levels, axis=0) if L > 1 else levels[0]
    pts, group, cells = sample_layout(boxes, pattern)
    P = len(pts)
    bidx = np.asarray(batch_idx, dtype=np.int64).reshape(P, 1)
    xm = pts[..., 0] / stride - 0.5
    ym = pts[..., 1] / stride - 0.5
    if mode == "channel_concat":
        caches, vals = [], []
        for lv in range(L):
            v, c = bilinear_sample(stack, lv * B + bidx, xm, ym)
            vals.append(v)
            caches.append(c)
        samples = np.concatenate(vals, axis=-1)
    else:
        lvl = level_map(L, mode)[group]
        samples, c = bilinear_sample(stack, lvl[None, :] * B + bidx, xm, ym)
        caches = [c]
    grid = np.zeros((P, OUT_SIZE * OUT_SIZE, samples.shape[-1]), dtype=samples.dtype)
    grid[:, cells] = samples
    out = grid.transpose(0, 2, 1).reshape(P, -1, OUT_SIZE, OUT_SIZE)
    return np.ascontiguousarray(out), (caches, cells, L, B, C, mode)


def adaptive_pool_backward(dout, cache):
    """Returns the list of gradients w.r.t. each level."""
    caches, cells, L, B, C, mode = cache
    P = dout.shape[0]
    d = dout.reshape(P, dout.shape[1], -1).transpose(0, 2, 1)[:, cells]
    if mode == "channel_concat":
        dstack = None
        for lv, c in enumerate(caches):
            part = bilinear_sample_backward(np.ascontiguousarray(d[..., lv * C : (lv + 1) * C]), c)[0]
            dstack = part if dstack is None else dstack + part
    else:
        dstack = bilinear_sample_backward(np.ascontiguousarray(d), caches[0])[0]
    return [dstack[lv * B : (lv + 1) * B] for lv in range(L)]


class LevelSmoother(Layer):
    """Top-down smoothing and unification of backbone levels.

    The highest level passes through a 3x3 conv.  Each lower level is matched
    to the top width by a 1x1 lateral conv, added to the 2x upsampled merged
    map from above, and smoothed by its own 3x3 conv.  Every smoothed level
    is then moved to the top level's grid by space-to-depth and projected to
    ``out_channels`` by a 1x1 conv.

    ``channels`` and ``strides`` are ordered from the lowest to the highest
    level.
    """

    def __init__(self, channels, strides, rng, out_channels=256, adapters=True, std=0.01, dtype=np.float32):
        if len(channels) != len(strides) or not channels:
            raise ValueError("channels and strides must be non-empty and of equal length")
        width = channels[-1]
        if not adapters and any(c != width for c in channels):
            raise ShapeError(f"level channels {list(channels)} differ and no 1x1 adapters are configured")
        self.strides = list(strides)
        self.blocks = []
        for s in strides:
            block = strides[-1] // s
            if block * s != strides[-1] or block & (block - 1):
                raise ValueError(f"stride {s} does not divide the top stride {strides[-1]} by a power of two")
            self.blocks.append(block)
        n = len(channels)
        self.lateral = [Conv2d(c, width, 1, rng, std=std, dtype=dtype) if adapters else None for c in channels[:-1]]
        self.smooth = [Conv2d(width, width, 3, rng, std=std, dtype=dtype) for _ in range(n)]
        self.unify = [Conv2d(width * b * b, out_channels, 1, rng, std=std, dtype=dtype) for b in self.blocks]
        self.out_channels = out_channels

    @property
    def stride(self):
        return self.strides[-1]

    def forward(self, raw):
        if len(raw) != len(self.smooth):
            raise ShapeError(f"expected {len(self.smooth)} levels, got {len(raw)}")
        n = len(raw)
        merged = [None] * n
        merged[-1] = raw[-1]
        self._up = [None] * n
        for i in range(n - 2, -1, -1):
            lat = self.lateral[i].forward(raw[i]) if self.lateral[i] is not None else raw[i]
            up, self._up[i] = upsample2x(merged[i + 1])
            if up.shape != lat.shape:
                raise ShapeError(f"upsampled level {up.shape} does not match lateral {lat.shape}")
            merged[i] = lat + up
        out = []
        for i in range(n):
            sm = self.smooth[i].forward(merged[i])
            out.append(self.unify[i].forward(space_to_depth(sm, self.blocks[i]) if self.blocks[i] > 1 else sm))
        return out

    def backward(self, douts):
        n = len(douts)
        dmerged = [None] * n
        for i in range(n):
            d = self.unify[i].backward(douts[i])
            if self.blocks[i] > 1:
                d = depth_to_space(d, self.blocks[i])
            dmerged[i] = self.smooth[i].backward(d)
        draw = [None] * n
        # merged[i] = lateral(raw[i]) + up(merged[i + 1]); lowest level first
        for i in range(n - 1):
            d = dmerged[i]
            draw[i] = self.lateral[i].backward(d) if self.lateral[i] is not None else d
            dmerged[i + 1] = dmerged[i + 1] + upsample2x_backward(d, self._up[i])
        draw[-1] = dmerged[-1]
        return draw
