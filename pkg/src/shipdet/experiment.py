"""Seeded synthetic splits and cached train-then-evaluate runs.

A run is identified by the config digest, the train and test split specs,
the step budget and the code version.  Finished runs leave ``result.json``
(metrics, loss history, timing) next to their checkpoint, so repeated
requests with the same key return immediately.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .config import DetectorConfig
from .synth import render_scene
from .trainer import Trainer, evaluate_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SplitSpec:
    """``count`` scenes; scene ``i`` uses ``modes[i % len(modes)]`` and RNG ``[seed, i]``."""

    seed: int
    count: int
    modes: tuple = ("sparse", "dense-dock")
    size: int = 256

    def to_dict(self):
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d


def make_split(spec: SplitSpec):
    images, boxes = [], []
    for i in range(spec.count):
        img, b = render_scene(np.random.default_rng([spec.seed, i]), spec.size, spec.modes[i % len(spec.modes)])
        images.append(img)
        boxes.append(b)
    return images, boxes


def code_version():
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def run_key(cfg: DetectorConfig, train: SplitSpec, test: SplitSpec | None, steps: int):
    payload = {
        "config": cfg.digest(),
        "train": train.to_dict(),
        "test": test.to_dict() if test else None,
        "steps": steps,
        "code": code_version(),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _summary(metrics):
    out = {k: metrics[k] for k in ("ap", "precision", "recall", "mean_positive_iou", "ar100", "ar300")}
    return {k: (None if v is None else float(v)) for k, v in out.items()}


def train_and_evaluate(cfg: DetectorConfig, train: SplitSpec, test: SplitSpec | None = None,
                       cache_dir="runs", steps=None, time_limit=None):
    """Train on ``train`` and evaluate on ``test`` (default: the training split).

    Returns the result dict; cached under ``cache_dir/<key>/``.
    """
    steps = cfg.steps if steps is None else steps
    key = run_key(cfg, train, test, steps)
    out = Path(cache_dir) / key
    result_path = out / "result.json"
    if result_path.exists():
        with open(result_path) as fh:
            return json.load(fh)
    out.mkdir(parents=True, exist_ok=True)
    images, boxes = make_split(train)
    t0 = time.time()
    tr = Trainer(cfg, images, boxes, out_dir=str(out))
    hist = tr.run(steps, time_limit=time_limit)
    train_seconds = time.time() - t0
    eval_images, eval_boxes = (images, boxes) if test is None else make_split(test)
    t1 = time.time()
    metrics = evaluate_model(tr.model, [im.astype(np.float32) for im in eval_images], eval_boxes)
    result = {
        "key": key,
        "config": cfg.to_dict(),
        "train": train.to_dict(),
        "test": test.to_dict() if test else None,
        "steps": tr.step,
        "code": code_version(),
        "train_seconds": train_seconds,
        "seconds_per_step": train_seconds / max(tr.step, 1),
        "eval_seconds": time.time() - t1,
        "losses": [r.total for r in hist],
        "rpn_pos": [r.rpn.n_pos for r in hist],
        "rpn_neg": [r.rpn.n_neg for r in hist],
        "checkpoint": str(out / "checkpoint.ckpt"),
        **_summary(metrics),
    }
    tmp = result_path.with_suffix(".tmp")
    with open(tmp, "w") as fh:
        json.dump(result, fh, indent=1)
    os.replace(tmp, result_path)
    log.info("run %s: AP %.3f after %d steps (%.0f s)", key, result["ap"], tr.step, train_seconds)
    return result
