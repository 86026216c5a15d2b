"""Seeded synthetic ship scenes.

Bright elongated rectangles on a smooth textured sea.  Three modes:

- ``sparse``: 1-4 well separated ships
- ``dense-dock``: 2-4 parallel ships moored side by side with 2-6 px gaps
- ``cluttered``: sparse ships plus compact distractor blobs
"""
from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import box_corners, canonicalize, rotated_iou

MODES = ("sparse", "dense-dock", "cluttered")
LONG_SIDE = (50.0, 120.0)
ASPECT = (3.5, 6.0)
MIN_SHORT = 9.0
DOCK_GAP = (2.0, 6.0)
MARGIN = 3.0


def background(rng, size):
    coarse = gaussian_filter(rng.standard_normal((size, size)), 12) * 60
    fine = rng.standard_normal((size, size)) * 4
    return 70 + rng.uniform(-15, 15) + coarse + fine


def render_box(img, box, value, soft=True):
    """Paint ``box`` onto ``img`` in place with an anti-aliased edge."""
    cx, cy, w, h, th = box
    size_y, size_x = img.shape
    r = 0.5 * math.hypot(w, h) + 2
    x0, x1 = max(int(cx - r), 0), min(int(cx + r) + 2, size_x)
    y0, y1 = max(int(cy - r), 0), min(int(cy + r) + 2, size_y)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
    c, s = math.cos(th), math.sin(th)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    margin = np.minimum(w / 2 - np.abs(u), h / 2 - np.abs(v))
    alpha = np.clip(margin + 0.5, 0, 1) if soft else (margin >= 0).astype(float)
    patch = img[y0:y1, x0:x1]
    patch += alpha * (value - patch)


def _inside(box, size):
    pts = box_corners(np.asarray(box)[None])[0]
    return bool(np.all(pts >= MARGIN) and np.all(pts <= size - MARGIN))


def _random_ship(rng, size):
    long = rng.uniform(*LONG_SIDE)
    short = max(long / rng.uniform(*ASPECT), MIN_SHORT)
    return np.array([rng.uniform(0, size), rng.uniform(0, size), long, short, rng.uniform(-math.pi / 2, math.pi / 2)])


def _separated(box, others, pad=4.0):
    grown = box.copy()
    grown[2:4] += 2 * pad
    return all(rotated_iou(grown, o) == 0.0 for o in others)


def sparse_ships(rng, size, count):
    ships = []
    for _ in range(400):
        if len(ships) == count:
            break
        b = canonicalize(_random_ship(rng, size)[None])[0]
        if _inside(b, size) and _separated(b, ships):
            ships.append(b)
    return ships


def dock_ships(rng, size, count):
    """Parallel ships packed side by side along their short axis."""
    for _ in range(400):
        theta = rng.uniform(-math.pi / 2, math.pi / 2)
        long = rng.uniform(*LONG_SIDE)
        normal = np.array([-math.sin(theta), math.cos(theta)])
        along = np.array([math.cos(theta), math.sin(theta)])
        shorts = np.maximum(long / rng.uniform(*ASPECT, size=count), MIN_SHORT)
        gaps = rng.uniform(*DOCK_GAP, size=count - 1)
        offsets = np.concatenate([[0.0], np.cumsum((shorts[:-1] + shorts[1:]) / 2 + gaps)])
        offsets -= offsets.mean()
        center = rng.uniform(0.25 * size, 0.75 * size, 2)
        ships = []
        for k in range(count):
            lk = long * rng.uniform(0.85, 1.15)
            c = center + offsets[k] * normal + rng.uniform(-0.08, 0.08) * long * along
            ships.append(canonicalize(np.array([[c[0], c[1], lk, shorts[k], theta]]))[0])
        if all(_inside(b, size) for b in ships):
            return ships
    return ships[:1] if ships and _inside(ships[0], size) else []


def render_scene(rng, size=256, mode="sparse"):
    """Returns ``(image uint8 (size, size), boxes (N, 5))``."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    img = background(rng, size)
    if mode == "dense-dock":
        ships = dock_ships(rng, size, int(rng.integers(2, 5)))
    else:
        ships = sparse_ships(rng, size, int(rng.integers(1, 5)))
    if mode == "cluttered":
        for _ in range(int(rng.integers(2, 6))):
            d = rng.uniform(10, 26)
            blob = np.array([rng.uniform(0, size), rng.uniform(0, size), d, d * rng.uniform(0.6, 1.0), rng.uniform(-1.5, 1.5)])
            if _separated(blob, ships, pad=6.0):
                render_box(img, blob, img.mean() + rng.uniform(50, 110))
    for b in ships:
        render_box(img, b, np.median(img) + rng.uniform(70, 130))
    img = np.clip(img + rng.standard_normal(img.shape) * 3, 0, 255)
    boxes = np.array(ships, dtype=np.float64).reshape(-1, 5)
    return np.round(img).astype(np.uint8), boxes


def dock_gaps(boxes):
    """Edge-to-edge gaps between consecutive parallel ships of a dock scene."""
    b = np.asarray(boxes)
    normal = np.array([-math.sin(b[0, 4]), math.cos(b[0, 4])])
    proj = b[:, :2] @ normal
    order = np.argsort(proj)
    b, proj = b[order], proj[order]
    return np.diff(proj) - (b[1:, 3] + b[:-1, 3]) / 2
