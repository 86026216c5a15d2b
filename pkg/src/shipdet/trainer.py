"""Training loop with flip augmentation, checkpointing and evaluation helpers."""
from __future__ import annotations

import csv
import logging
import os
import time

import numpy as np

from .config import DetectorConfig
from .detector import Detector, normalize_image, pad_to_multiple
from .geometry import canonicalize
from .io import DataError, resize_sample
from .metrics import average_recall, evaluate, mean_positive_iou
from .tensor import Adam, CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FLIPS = ("none", "h", "v")


def flip_sample(img, boxes, mode):
    """Mirror an (H, W) image and its boxes; ``mode`` is "h" (left-right) or "v" (up-down)."""
    b = np.array(boxes, dtype=np.float64).reshape(-1, 5)
    H, W = img.shape
    if mode == "none":
        return img, b
    if mode == "h":
        img = img[:, ::-1]
        b[:, 0] = W - b[:, 0]
    elif mode == "v":
        img = img[::-1]
        b[:, 1] = H - b[:, 1]
    else:
        raise ValueError(f"unknown flip {mode!r}")
    b[:, 4] = -b[:, 4]
    return np.ascontiguousarray(img), canonicalize(b)


class Trainer:
    """Joint two-stage training with Adam.

    ``images`` are (H, W) arrays, ``boxes`` per-image (N, 5) canonical boxes.
    With flipping enabled every image also appears mirrored left-right and
    up-down, tripling the pool of training items.
    """

    def __init__(self, cfg: DetectorConfig, images, boxes, out_dir=None):
        if len(images) == 0:
            raise DataError("training set is empty")
        if len(images) != len(boxes):
            raise DataError("images and annotations differ in length")
        self.cfg = cfg
        self.model = Detector(cfg)
        self.opt = Adam(self.model.params(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.step = 0
        self.out_dir = out_dir
        self._data = []
        for img, b in zip(images, boxes):
            im, bb = resize_sample(np.asarray(img, dtype=np.float32), b, cfg.image_short_side)
            self._data.append((normalize_image(im), bb))
        flips = FLIPS if cfg.flip else FLIPS[:1]
        self.items = [(i, f) for i in range(len(self._data)) for f in flips]
        self._queue: list = []
        self.history: list = []

    # -- data ------------------------------------------------------------

    def _next_items(self):
        need = self.cfg.batch_images
        while len(self._queue) < need:
            self._queue.extend(int(i) for i in self.rng.permutation(len(self.items)))
        out, self._queue = self._queue[:need], self._queue[need:]
        return [self.items[i] for i in out]

    def batch(self):
        imgs, gts = [], []
        for i, f in self._next_items():
            img, b = flip_sample(*self._data[i], f)
            imgs.append(pad_to_multiple(img, self.cfg.top_stride))
            gts.append(b)
        H = max(im.shape[0] for im in imgs)
        W = max(im.shape[1] for im in imgs)
        x = np.zeros((len(imgs), 1, H, W), dtype=np.float32)
        for k, im in enumerate(imgs):
            x[k, 0, : im.shape[0], : im.shape[1]] = im
        return x, gts

    # -- optimization ----------------------------------------------------

    def lr_at(self, step):
        return self.cfg.lr if step < self.cfg.lr_drop_step else self.cfg.lr_final

    def train_step(self):
        x, gts = self.batch()
        self.opt.zero_grad()
        self.opt.lr = self.lr_at(self.step)
        report = self.model.loss_and_grads(x, gts, self.rng)
        self.opt.step()
        self.step += 1
        self.model.trained = True
        return report

    def run(self, steps=None, val=None, log_path=None, time_limit=None):
        """Train until ``steps`` (default ``cfg.steps``); returns the list of step reports.

        ``val`` is an optional (images, boxes) pair evaluated every
        ``cfg.val_every`` steps.
        """
        cfg = self.cfg
        total = cfg.steps if steps is None else steps
        log_path = log_path or (os.path.join(self.out_dir, "train_log.csv") if self.out_dir else None)
        writer = fh = None
        header = False
        if log_path:
            header = not os.path.exists(log_path) or self.step == 0
            fh = open(log_path, "w" if header else "a", newline="")
            writer = csv.writer(fh)
        t0 = time.time()
        try:
            while self.step < total:
                rep = self.train_step()
                self.history.append(rep)
                row = {"step": self.step, "lr": self.opt.lr, **rep.as_row(), "elapsed": round(time.time() - t0, 3)}
                if cfg.val_every and val is not None and self.step % cfg.val_every == 0:
                    row["val_ap"] = evaluate_model(self.model, *val)["ap"]
                if writer is not None:
                    if header:
                        writer.writerow(list(row))
                        header = False
                    writer.writerow(list(row.values()))
                if cfg.log_every and self.step % cfg.log_every == 0:
                    log.info("step %d loss %.4f (rpn %.4f det %.4f)", self.step, rep.total, rep.rpn.total, rep.det.total)
                if self.out_dir and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save(os.path.join(self.out_dir, "checkpoint.ckpt"))
                if time_limit is not None and time.time() - t0 > time_limit:
                    log.warning("time limit reached at step %d", self.step)
                    break
        finally:
            if fh is not None:
                fh.close()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "checkpoint.ckpt"))
        return self.history

    # -- persistence -----------------------------------------------------

    def state_arrays(self):
        arrays = {}
        for name, p in self.model.params().items():
            arrays["p/" + name] = p.value
            arrays["m/" + name] = p.m
            arrays["v/" + name] = p.v
        return arrays

    def save(self, path, extra_meta=None):
        meta = {
            "config": self.cfg.to_dict(),
            "step": self.step,
            "adam_t": self.opt.t,
            "rng_state": self.rng.bit_generator.state,
            "queue": self._queue,
            **(extra_meta or {}),
        }
        tmp = str(path) + ".tmp"
        save_checkpoint(tmp, self.state_arrays(), meta)
        os.replace(tmp, path)

    @classmethod
    def resume(cls, path, images, boxes, out_dir=None):
        arrays, meta = load_checkpoint(path)
        cfg = DetectorConfig.from_dict(meta["config"])
        tr = cls(cfg, images, boxes, out_dir=out_dir)
        _restore(tr.model, arrays, path, with_moments=True)
        tr.step = int(meta["step"])
        tr.opt.t = int(meta["adam_t"])
        tr.rng.bit_generator.state = meta["rng_state"]
        tr._queue = [int(i) for i in meta["queue"]]
        tr.model.trained = tr.step > 0
        return tr


def _restore(model, arrays, path, with_moments=False):
    for name, p in model.params().items():
        for prefix, attr in (("p/", "value"), ("m/", "m"), ("v/", "v")):
            if prefix != "p/" and not with_moments:
                continue
            key = prefix + name
            if key not in arrays:
                raise CheckpointError(f"{path}: missing entry {key!r}")
            arr = arrays[key]
            if arr.shape != p.value.shape:
                raise CheckpointError(f"{path}: entry {key!r} has shape {arr.shape}, expected {p.value.shape}")
            getattr(p, attr)[...] = arr


def load_detector(path):
    """Detector with weights and config from a checkpoint."""
    arrays, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: manifest has no config entry")
    cfg = DetectorConfig.from_dict(meta["config"])
    model = Detector(cfg)
    _restore(model, arrays, path)
    model.trained = True
    return model


def run_detector(model, images, proposals=False):
    dets, props = [], []
    for img in images:
        d, p = model.detect(img, return_proposals=True)
        dets.append(d)
        props.append(p)
    return (dets, props) if proposals else dets


def evaluate_model(model, images, boxes, iou_threshold=0.5, ar_k=(100, 300)):
    """AP at ``iou_threshold``, AR over proposals and mean positive-proposal IoU."""
    dets, props = run_detector(model, images, proposals=True)
    ap, cut, p, r, _ = evaluate([d[0] for d in dets], [d[1] for d in dets], boxes, iou_threshold)
    out = {
        "ap": ap,
        "precision": float(p[-1]) if len(p) else 1.0,
        "recall": float(r[-1]) if len(r) else 0.0,
        "mean_positive_iou": mean_positive_iou([q[0] for q in props], boxes),
        "pr": (cut, p, r),
        "detections": dets,
    }
    for k in ar_k:
        out[f"ar{k}"] = average_recall([q[0] for q in props], [q[1] for q in props], boxes, k)
    return out
