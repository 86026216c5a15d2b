"""Rotated-rectangle geometry: canonical boxes, polygon IoU, rotated NMS.

A box is ``(cx, cy, w, h, theta)`` with ``w`` the long side and ``theta`` the
angle from the image x-axis to the ``w`` axis, canonical in [-pi/2, pi/2).
Arrays of boxes are ``(N, 5)`` float arrays in the same order.
"""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

HALF_PI = math.pi / 2
MIN_INTERSECTION = 1e-12
_ANGLE_DECIMALS = 12
_SEAM = round(HALF_PI, _ANGLE_DECIMALS)


def canonical_angle(theta):
    """Fold an angle (scalar or array) into [-pi/2, pi/2); angles mod pi are identified."""
    # rounding makes a box and its theta + pi twin bit-identical
    t = np.round(np.mod(np.asarray(theta, dtype=np.float64) + HALF_PI, math.pi) - HALF_PI, _ANGLE_DECIMALS)
    t = np.where((t <= -HALF_PI) | (t >= _SEAM), -HALF_PI, t)
    return float(t) if np.ndim(t) == 0 else t


def angle_diff(a, b):
    """Signed difference a - b folded into [-pi/2, pi/2)."""
    d = np.mod(np.asarray(a, dtype=np.float64) - b + HALF_PI, math.pi) - HALF_PI
    return float(d) if np.ndim(d) == 0 else d


class RotatedBox(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float
    theta: float

    @classmethod
    def make(cls, cx, cy, w, h, theta):
        """Build a canonical box: swap sides so w >= h, then fold theta."""
        if w <= 0 or h <= 0:
            raise ValueError(f"box sides must be positive, got w={w}, h={h}")
        if w < h:
            w, h = h, w
            theta = theta + HALF_PI
        return cls(float(cx), float(cy), float(w), float(h), canonical_angle(theta))

    @property
    def area(self):
        return self.w * self.h


def canonicalize(boxes):
    """Vectorized :meth:`RotatedBox.make` for an ``(N, 5)`` array."""
    b = np.array(boxes, dtype=np.float64).reshape(-1, 5)
    swap = b[:, 2] < b[:, 3]
    b[swap, 2], b[swap, 3] = b[swap, 3].copy(), b[swap, 2].copy()
    b[swap, 4] += HALF_PI
    b[:, 4] = canonical_angle(b[:, 4])
    return b


def to_polygon(box):
    """Corners of the box as a counter-clockwise list of (x, y)."""
    cx, cy, w, h, theta = box
    c, s = math.cos(theta), math.sin(theta)
    pts = []
    for u, v in ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)):
        pts.append((cx + u * c - v * s, cy + u * s + v * c))
    return pts


def box_corners(boxes):
    """``(N, 5)`` boxes -> ``(N, 4, 2)`` corners in the same order as :func:`to_polygon`."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    c, s = np.cos(b[:, 4]), np.sin(b[:, 4])
    u = np.array([-0.5, 0.5, 0.5, -0.5])[None, :] * b[:, 2:3]
    v = np.array([-0.5, -0.5, 0.5, 0.5])[None, :] * b[:, 3:4]
    x = b[:, 0:1] + u * c[:, None] - v * s[:, None]
    y = b[:, 1:2] + u * s[:, None] + v * c[:, None]
    return np.stack([x, y], axis=-1)


def polygon_area(poly):
    """Signed shoelace area; positive for counter-clockwise order."""
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return acc / 2


def clip_polygon(subject, clip):
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW polygon ``clip``."""
    output = list(subject)
    cp1 = clip[-1]
    for cp2 in clip:
        if not output:
            break
        ex, ey = cp2[0] - cp1[0], cp2[1] - cp1[1]

        def side(p):
            return ex * (p[1] - cp1[1]) - ey * (p[0] - cp1[0])

        def cross_point(p, q, sp, sq):
            t = sp / (sp - sq)
            return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))

        inputs, output = output, []
        s = inputs[-1]
        ss = side(s)
        for e in inputs:
            se = side(e)
            if se >= 0:
                if ss < 0:
                    output.append(cross_point(s, e, ss, se))
                output.append(e)
            elif ss >= 0:
                output.append(cross_point(s, e, ss, se))
            s, ss = e, se
        cp1 = cp2
    return output


def intersection_area(a, b):
    poly = clip_polygon(to_polygon(a), to_polygon(b))
    if len(poly) < 3:
        return 0.0
    area = abs(polygon_area(poly))
    return area if area >= MIN_INTERSECTION else 0.0


def rotated_iou(a, b):
    """IoU of two rotated boxes via polygon clipping."""
    if tuple(b) < tuple(a):
        a, b = b, a  # fixed clip order keeps the result exactly symmetric
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return min(1.0, max(0.0, inter / union))


def orientation_agnostic_iou(a, b):
    """IoU after giving ``a`` the orientation of ``b`` (centres and sizes kept)."""
    aligned = (a[0], a[1], a[2], a[3], b[4])
    return rotated_iou(aligned, b)


# ---------------------------------------------------------------------------
# vectorized IoU
# ---------------------------------------------------------------------------

def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _inside(points, boxes, tol):
    # points (..., K, 2), boxes (..., 5)
    d = points - boxes[..., None, 0:2]
    c = np.cos(boxes[..., 4])[..., None]
    s = np.sin(boxes[..., 4])[..., None]
    u = d[..., 0] * c + d[..., 1] * s
    v = -d[..., 0] * s + d[..., 1] * c
    return (np.abs(u) <= boxes[..., None, 2] / 2 + tol) & (np.abs(v) <= boxes[..., None, 3] / 2 + tol)


def pairwise_intersection(a, b):
    """Elementwise intersection areas of two ``(P, 5)`` box arrays.

    Gathers every vertex of one box inside the other plus all edge crossings,
    orders them by angle about their mean and applies the shoelace formula.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    P = len(a)
    if P == 0:
        return np.zeros(0)
    ca, cb = box_corners(a), box_corners(b)
    scale = np.maximum(np.maximum(a[:, 2], b[:, 2]), 1.0)
    tol = (1e-9 * scale)[:, None]
    in_a = _inside(cb, a, tol)
    in_b = _inside(ca, b, tol)
    # edge crossings: A edge i (p -> p + r) vs B edge j (q -> q + s)
    p = ca[:, :, None, :]
    r = (np.roll(ca, -1, axis=1) - ca)[:, :, None, :]
    q = cb[:, None, :, :]
    s = (np.roll(cb, -1, axis=1) - cb)[:, None, :, :]
    denom = _cross(r, s)
    qp = q - p
    ok = np.abs(denom) > 1e-12 * scale[:, None, None] ** 2
    safe = np.where(ok, denom, 1.0)
    t = _cross(qp, s) / safe
    u = _cross(qp, r) / safe
    eps = 1e-12
    hit = ok & (t >= -eps) & (t <= 1 + eps) & (u >= -eps) & (u <= 1 + eps)
    cross_pts = (p + t[..., None] * r).reshape(P, 16, 2)
    pts = np.concatenate([ca, cb, cross_pts], axis=1)  # (P, 24, 2)
    valid = np.concatenate([in_b, in_a, hit.reshape(P, 16)], axis=1)
    n_valid = valid.sum(axis=1)
    center = (pts * valid[..., None]).sum(axis=1) / np.maximum(n_valid, 1)[:, None]
    rel = pts - center[:, None, :]
    ang = np.where(valid, np.arctan2(rel[..., 1], rel[..., 0]), np.inf)
    order = np.argsort(ang, axis=1, kind="stable")
    rel = np.take_along_axis(rel, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    rel = np.where(valid[..., None], rel, rel[:, :1, :])
    area = 0.5 * _cross(rel, np.roll(rel, -1, axis=1)).sum(axis=1)
    area = np.where(n_valid >= 3, np.abs(area), 0.0)
    return np.where(area >= MIN_INTERSECTION, area, 0.0)


def pairwise_iou(a, b):
    """Elementwise rotated IoU of two ``(P, 5)`` arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    inter = pairwise_intersection(a, b)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def _may_overlap(a, b):
    # circumscribed circles intersect
    ra = 0.5 * np.hypot(a[:, 2], a[:, 3])
    rb = 0.5 * np.hypot(b[:, 2], b[:, 3])
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    return d2 < (ra[:, None] + rb[None, :]) ** 2


def iou_matrix(a, b):
    """Rotated IoU between every box of ``a`` (N, 5) and ``b`` (M, 5)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)
    out = np.zeros((len(a), len(b)))
    if out.size == 0:
        return out
    ii, jj = np.nonzero(_may_overlap(a, b))
    chunk = 20000
    for k in range(0, len(ii), chunk):
        sl = slice(k, k + chunk)
        out[ii[sl], jj[sl]] = pairwise_iou(a[ii[sl]], b[jj[sl]])
    return out


def agnostic_iou_matrix(anchors, gts):
    """Orientation-agnostic IoU between anchors (N, 4 or 5) and boxes (M, 5).

    With the anchor turned to the box's orientation both rectangles are
    axis-aligned in the box frame, so the overlap is a product of 1-D overlaps.
    """
    an = np.asarray(anchors, dtype=np.float64)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    if len(an) == 0 or len(g) == 0:
        return np.zeros((len(an), len(g)))
    dx = an[:, None, 0] - g[None, :, 0]
    dy = an[:, None, 1] - g[None, :, 1]
    c, s = np.cos(g[:, 4]), np.sin(g[:, 4])
    u = dx * c + dy * s
    v = -dx * s + dy * c
    aw, ah = an[:, None, 2], an[:, None, 3]
    gw, gh = g[None, :, 2], g[None, :, 3]
    ou = np.clip(np.minimum(u + aw / 2, gw / 2) - np.maximum(u - aw / 2, -gw / 2), 0, None)
    ov = np.clip(np.minimum(v + ah / 2, gh / 2) - np.maximum(v - ah / 2, -gh / 2), 0, None)
    inter = ou * ov
    inter = np.where(inter >= MIN_INTERSECTION, inter, 0.0)
    return inter / (aw * ah + gw * gh - inter)


# ---------------------------------------------------------------------------
# NMS and the Monte-Carlo oracle
# ---------------------------------------------------------------------------

def iou_upper_bound(a, b):
    """Cheap upper bound on rotated IoU for every pair of ``a`` (N, 5) and ``b`` (M, 5).

    The intersection can exceed neither the smaller area nor the overlap of
    the axis-aligned bounding rectangles, and IoU grows with intersection.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 5)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 5)

    def extents(x):
        c, s = np.abs(np.cos(x[:, 4])), np.abs(np.sin(x[:, 4]))
        return (x[:, 2] * c + x[:, 3] * s) / 2, (x[:, 2] * s + x[:, 3] * c) / 2

    ax, ay = extents(a)
    bx, by = extents(b)
    ox = np.minimum(a[:, None, 0] + ax[:, None], b[None, :, 0] + bx[None]) - np.maximum(
        a[:, None, 0] - ax[:, None], b[None, :, 0] - bx[None]
    )
    oy = np.minimum(a[:, None, 1] + ay[:, None], b[None, :, 1] + by[None]) - np.maximum(
        a[:, None, 1] - ay[:, None], b[None, :, 1] - by[None]
    )
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    inter = np.minimum(np.clip(ox, 0, None) * np.clip(oy, 0, None), np.minimum(area_a[:, None], area_b[None]))
    union = area_a[:, None] + area_b[None] - inter
    return np.divide(inter, union, out=np.zeros_like(union), where=union > 0)


def rotated_nms(boxes, scores, threshold, max_keep=None):
    """Greedy NMS on rotated IoU; returns kept indices in descending score order.

    Ties in score keep the lower original index first.  Pairs whose IoU upper
    bound is at most ``threshold`` are never clipped.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    b = boxes[order]
    ii, jj = [], []
    rows = max(1, 4_000_000 // n)
    for r0 in range(0, n, rows):
        bound = iou_upper_bound(b[r0 : r0 + rows], b)
        i, j = np.nonzero(bound > threshold)
        sel = j > i + r0
        ii.append(i[sel] + r0)
        jj.append(j[sel])
    ii, jj = np.concatenate(ii), np.concatenate(jj)
    starts = np.searchsorted(ii, np.arange(n + 1))  # ii is sorted row-major
    alive = np.ones(n, dtype=bool)
    keep = []
    pos = 0
    while pos < n:
        # IoUs for a wave of live rows in one call, then the greedy pass over them
        rows = np.flatnonzero(alive[pos:])[:64] + pos
        if len(rows) == 0:
            break
        seg = [np.arange(starts[r], starts[r + 1]) for r in rows]
        sel = np.concatenate(seg)
        sel = sel[alive[jj[sel]]]
        hit = pairwise_iou(b[ii[sel]], b[jj[sel]]) > threshold
        src, dst = ii[sel][hit], jj[sel][hit]
        bounds = np.searchsorted(src, np.append(rows, n))
        for k, r in enumerate(rows):
            if not alive[r]:
                continue
            keep.append(order[r])
            if max_keep is not None and len(keep) >= max_keep:
                return np.asarray(keep, dtype=np.int64)
            alive[dst[bounds[k] : bounds[k + 1]]] = False
        pos = rows[-1] + 1
    return np.asarray(keep, dtype=np.int64)


def _inside_box(x, y, box):
    cx, cy, w, h, theta = box
    c, s = math.cos(theta), math.sin(theta)
    u = (x - cx) * c + (y - cy) * s
    v = -(x - cx) * s + (y - cy) * c
    return (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)


def mc_iou_oracle(a, b, samples=1_000_000, seed=0):
    """Monte-Carlo IoU over the joint axis-aligned bounding rectangle.

    Returns ``(estimate, standard_error)``.
    """
    if samples < 100_000:
        raise ValueError("the oracle needs at least 1e5 samples")
    corners = np.concatenate([box_corners(np.asarray(a)), box_corners(np.asarray(b))], axis=1)[0]
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(samples, 2))
    ina = _inside_box(pts[:, 0], pts[:, 1], a)
    inb = _inside_box(pts[:, 0], pts[:, 1], b)
    n_union = int(np.count_nonzero(ina | inb))
    if n_union == 0:
        return 0.0, 0.0
    p = np.count_nonzero(ina & inb) / n_union
    return p, math.sqrt(p * (1 - p) / n_union)
