"""Dataset, annotation and detection files.

Annotations (``annotations.jsonl``), one JSON object per line::

    {"image_path": "img_0000.png", "objects": [{"cx": .., "cy": .., "w": .., "h": .., "theta_deg": ..}]}

Detections, one JSON object per detection::

    {"image": "img_0000.png", "cx": .., "cy": .., "w": .., "h": .., "theta_deg": .., "score": ..}

Angles are degrees in files and radians in memory.  Boxes are canonicalized
on load (``w >= h``, angle in [-90, 90) degrees).  Coordinates are written
with 6 and angles with 9 decimals so load/save cycles are stable.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import canonicalize


class DataError(ValueError):
    pass


ANNOTATIONS = "annotations.jsonl"


def _box_to_json(box):
    cx, cy, w, h, th = (float(v) for v in box)
    return {"cx": round(cx, 6), "cy": round(cy, 6), "w": round(w, 6), "h": round(h, 6),
            "theta_deg": round(math.degrees(th), 9)}


def _box_from_json(obj):
    try:
        vals = [float(obj[k]) for k in ("cx", "cy", "w", "h", "theta_deg")]
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"malformed box record {obj!r}") from e
    if vals[2] <= 0 or vals[3] <= 0:
        raise DataError(f"box with non-positive size {obj!r}")
    vals[4] = math.radians(vals[4])
    return vals


def boxes_from_objects(objs):
    if not objs:
        return np.zeros((0, 5))
    return canonicalize(np.array([_box_from_json(o) for o in objs]))


def _read_lines(path):
    try:
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    out = []
    for i, ln in enumerate(lines, 1):
        try:
            out.append(json.loads(ln))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{i}: invalid JSON ({e})") from e
    return out


@dataclass
class Sample:
    image_path: str
    boxes: np.ndarray  # (N, 5) canonical

    def load_image(self, root=""):
        return load_image(os.path.join(root, self.image_path))


def write_annotations(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            rec = {"image_path": s.image_path, "objects": [_box_to_json(b) for b in s.boxes]}
            fh.write(json.dumps(rec) + "\n")


def read_annotations(path):
    samples = []
    for rec in _read_lines(path):
        if "image_path" not in rec:
            raise DataError(f"{path}: record without image_path")
        samples.append(Sample(rec["image_path"], boxes_from_objects(rec.get("objects", []))))
    return samples


def write_detections(path, detections):
    """``detections``: iterable of (image name, boxes (N, 5), scores (N,))."""
    with open(path, "w") as fh:
        for name, boxes, scores in detections:
            for b, s in zip(np.asarray(boxes).reshape(-1, 5), np.asarray(scores).reshape(-1)):
                rec = {"image": name, **_box_to_json(b), "score": float(s)}
                fh.write(json.dumps(rec) + "\n")


def read_detections(path):
    """Returns {image name: (boxes (N, 5), scores (N,))} preserving file order."""
    out: dict = {}
    for rec in _read_lines(path):
        if "image" not in rec or "score" not in rec:
            raise DataError(f"{path}: detection record missing image or score")
        boxes, scores = out.setdefault(rec["image"], ([], []))
        boxes.append(_box_from_json(rec))
        scores.append(float(rec["score"]))
    return {k: (canonicalize(np.array(b)), np.array(s)) for k, (b, s) in out.items()}


def load_image(path):
    """Grayscale image as a float32 (H, W) array in [0, 255]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.float32)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {path}: {e}") from e


def save_image(path, arr):
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path, format="PNG")


def load_dataset(root):
    """(images list of (H, W) float32, samples) from a dataset directory."""
    samples = read_annotations(os.path.join(root, ANNOTATIONS))
    if not samples:
        raise DataError(f"dataset {root} is empty")
    return [s.load_image(root) for s in samples], samples


def write_dataset(root, images, boxes_list, names=None):
    os.makedirs(root, exist_ok=True)
    samples = []
    for i, (img, boxes) in enumerate(zip(images, boxes_list)):
        name = names[i] if names else f"img_{i:04d}.png"
        save_image(os.path.join(root, name), img)
        samples.append(Sample(name, np.asarray(boxes).reshape(-1, 5)))
    write_annotations(os.path.join(root, ANNOTATIONS), samples)
    return samples


def resize_sample(image, boxes, short_side):
    """Resize so the shorter side equals ``short_side``; boxes scale along."""
    H, W = image.shape
    scale = short_side / min(H, W)
    if abs(scale - 1) < 1e-12:
        return image, np.asarray(boxes, dtype=np.float64).reshape(-1, 5)
    nw, nh = int(round(W * scale)), int(round(H * scale))
    img = np.asarray(Image.fromarray(image.astype(np.float32), mode="F").resize((nw, nh), Image.BILINEAR))
    b = np.array(boxes, dtype=np.float64).reshape(-1, 5)
    b[:, :4] *= [nw / W, nh / H, scale, scale]
    return img, b
