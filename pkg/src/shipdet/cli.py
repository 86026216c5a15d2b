"""Command-line interface: ``shipdet {synth,train,detect,eval}``.

Exit codes: 0 success, 1 unexpected failure, 2 usage, 3 configuration,
4 data, 5 checkpoint.  Every command writes ``manifest.json`` next to its
outputs with the config digest, seed and code version.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .experiment import code_version
from .io import (
    ANNOTATIONS,
    DataError,
    load_dataset,
    load_image,
    read_detections,
    write_dataset,
    write_detections,
)
from .metrics import average_recall, evaluate, mean_positive_iou, plot_pr_svg, write_pr_csv
from .synth import MODES, render_scene
from .tensor import CheckpointError

log = logging.getLogger("shipdet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")


class UsageError(Exception):
    pass


def _write_manifest(out_dir, command, args, cfg=None, seed=None, extra=None):
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")},
        "config_digest": cfg.digest() if cfg else None,
        "seed": seed if seed is not None else (cfg.seed if cfg else None),
        "code_version": code_version(),
        **(extra or {}),
    }
    path = Path(out_dir) / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return manifest


def _ablation_overrides(args):
    out = {}
    for flag, key in (("pooling", "pooling"), ("levels", "n_levels"), ("arrangement", "arrangement"),
                      ("rpn", "rpn_mode"), ("steps", "steps"), ("seed", "seed")):
        val = getattr(args, flag, None)
        if val is not None:
            out[key] = val
    return out


def _config(args):
    cfg = load_config(getattr(args, "config", None))
    over = _ablation_overrides(args)
    if "steps" in over and over["steps"] < cfg.lr_drop_step:
        over.setdefault("lr_drop_step", int(round(0.8 * over["steps"])))
    return cfg.replace(**over) if over else cfg


def _parse_modes(text):
    modes = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in modes if m not in MODES]
    if not modes or bad:
        raise UsageError(f"unknown mode(s) {bad or text!r}; choose from {', '.join(MODES)}")
    return modes


# -- commands ----------------------------------------------------------------

def cmd_synth(args):
    if args.count <= 0:
        raise UsageError("--count must be positive")
    modes = _parse_modes(args.mode)
    images, boxes = [], []
    for i in range(args.count):
        img, b = render_scene(np.random.default_rng([args.seed, i]), args.size, modes[i % len(modes)])
        images.append(img)
        boxes.append(b)
    try:
        write_dataset(args.out, images, boxes)
    except OSError as e:
        raise DataError(f"cannot write dataset to {args.out}: {e}") from e
    _write_manifest(args.out, "synth", args, seed=args.seed)
    print(f"wrote {args.count} images with {sum(len(b) for b in boxes)} ships to {args.out}")


def _load_training_data(root):
    images, samples = load_dataset(root)
    return images, [s.boxes for s in samples]


def cmd_train(args):
    from .trainer import Trainer

    cfg = _config(args)
    images, boxes = _load_training_data(args.data)
    os.makedirs(args.out, exist_ok=True)
    ckpt = Path(args.out) / "checkpoint.ckpt"
    if args.resume and ckpt.exists():
        tr = Trainer.resume(ckpt, images, boxes, out_dir=args.out)
        cfg = tr.cfg
        print(f"resuming at step {tr.step}")
    else:
        tr = Trainer(cfg, images, boxes, out_dir=args.out)
    cfg.save(Path(args.out) / "config.json")
    val = None
    if args.val:
        vi, vb = _load_training_data(args.val)
        val = ([im.astype(np.float32) for im in vi], vb)
    _write_manifest(args.out, "train", args, cfg)
    hist = tr.run(val=val, time_limit=args.time_limit)
    last = hist[-1].total if hist else float("nan")
    print(f"trained to step {tr.step}; last loss {last:.4f}; checkpoint {ckpt}")


def _image_list(path):
    p = Path(path)
    if p.is_file():
        return [p.name], [p]
    if (p / ANNOTATIONS).exists():
        _, samples = load_dataset(p)
        return [s.image_path for s in samples], [p / s.image_path for s in samples]
    files = sorted(f for f in p.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) if p.is_dir() else []
    if not files:
        raise DataError(f"no images found at {path}")
    return [f.name for f in files], files


def _overlay(path, image, boxes):
    from PIL import Image, ImageDraw

    from .geometry import box_corners

    im = Image.fromarray(np.clip(image, 0, 255).astype(np.uint8)).convert("RGB")
    draw = ImageDraw.Draw(im)
    for c in box_corners(boxes) if len(boxes) else []:
        draw.polygon([tuple(map(float, q)) for q in c], outline=(255, 40, 40))
    im.save(path)


def cmd_detect(args):
    from .trainer import load_detector

    model = load_detector(args.checkpoint)
    names, paths = _image_list(args.images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.overlay:
        os.makedirs(args.overlay, exist_ok=True)
    records = []
    for name, path in zip(names, paths):
        img = load_image(path)
        boxes, scores = model.detect(img, score_threshold=args.score_threshold)
        records.append((name, boxes, scores))
        if args.overlay:
            _overlay(Path(args.overlay) / (Path(name).stem + ".png"), img, boxes)
    write_detections(out, records)
    _write_manifest(out.parent, "detect", args, model.cfg)
    print(f"wrote {sum(len(r[1]) for r in records)} detections for {len(records)} images to {out}")


def cmd_eval(args):
    if (args.checkpoint is None) == (args.detections is None):
        raise UsageError("give exactly one of --checkpoint or --detections")
    images, samples = load_dataset(args.data)
    gts = [s.boxes for s in samples]
    os.makedirs(args.out, exist_ok=True)
    summary = {}
    cfg = None
    if args.checkpoint:
        from .trainer import load_detector

        model = load_detector(args.checkpoint)
        cfg = model.cfg
        dets, props = [], []
        for img in images:
            d, p = model.detect(img, score_threshold=args.score_threshold, return_proposals=True)
            dets.append(d)
            props.append(p)
        write_detections(Path(args.out) / "detections.jsonl",
                         [(s.image_path, d[0], d[1]) for s, d in zip(samples, dets)])
        pboxes = [p[0] for p in props]
        summary["mean_positive_iou"] = mean_positive_iou(pboxes, gts)
        for k in (100, 300):
            summary[f"ar{k}"] = average_recall(pboxes, [p[1] for p in props], gts, k)
    else:
        table = read_detections(args.detections)
        known = {s.image_path for s in samples}
        stray = sorted(set(table) - known)
        if stray:
            raise DataError(f"detections reference images not in the dataset: {stray[:3]}")
        empty = (np.zeros((0, 5)), np.zeros(0))
        dets = [table.get(s.image_path, empty) for s in samples]
    ap, cut, p, r, results = evaluate([d[0] for d in dets], [d[1] for d in dets], gts, args.iou)
    tp = int(sum(m.tp.sum() for m in results))
    n_det = int(sum(len(m.tp) for m in results))
    n_gt = int(sum(len(g) for g in gts))
    summary.update({
        "ap": ap,
        "precision": tp / n_det if n_det else 1.0,
        "recall": tp / n_gt if n_gt else 0.0,
        "tp": tp, "fp": n_det - tp, "fn": n_gt - tp,
        "iou_threshold": args.iou,
        "images": len(samples),
    })
    with open(Path(args.out) / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_pr_csv(Path(args.out) / "pr.csv", cut, p, r)
    plot_pr_svg(Path(args.out) / "pr.svg", p, r, ap)
    _write_manifest(args.out, "eval", args, cfg)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(summary.items())))


# -- parser -----------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_ablation_flags(p):
    p.add_argument("--pooling", choices=("typical", "adaptive"), help="pooling pattern")
    p.add_argument("--levels", type=int, choices=range(1, 6), metavar="{1..5}", help="feature levels to pool")
    p.add_argument("--arrangement", choices=("standard", "reverse", "concat"), help="level-to-ring arrangement")
    p.add_argument("--rpn", choices=("dual", "single"), help="RPN variant")


def build_parser():
    parser = _Parser(prog="shipdet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", default="sparse", help=f"one of {', '.join(MODES)} or a comma list cycled per image")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True, help="dataset directory with annotations.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON config (default: $SHIPDET_CONFIG, then the desk preset)")
    p.add_argument("--val", help="validation dataset for periodic AP logging")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--time-limit", type=float, help="stop after this many seconds")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ckpt if present")
    _add_ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run a trained detector on images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="image file, image directory or dataset directory")
    p.add_argument("--out", required=True, help="detections JSON Lines file")
    p.add_argument("--score-threshold", type=float)
    p.add_argument("--overlay", help="directory for rendered detection overlays")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="score detections against a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--detections")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--score-threshold", type=float)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as e:
        print(f"shipdet: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"shipdet: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"shipdet: checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as e:
        print(f"shipdet: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
