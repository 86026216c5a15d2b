"""Detection metrics: matching, precision/recall, AP, AR and proposal IoU."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix

AR_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)


@dataclass
class MatchResult:
    tp: np.ndarray  # (D,) bool, detections in descending score order
    scores: np.ndarray  # (D,)
    gt_matched: np.ndarray  # (G,) bool
    det_gt: np.ndarray  # (D,) matched gt index or -1
    ious: np.ndarray  # (D,) IoU with the matched gt (0 for false positives)

    @property
    def fp(self):
        return ~self.tp

    @property
    def n_gt(self):
        return len(self.gt_matched)


def match_detections(dets, scores, gts, iou_threshold=0.5):
    """Greedy one-to-one matching by descending score.

    Each detection takes the unmatched gt of highest IoU, provided the IoU
    exceeds ``iou_threshold``.  Ties in score keep input order.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 5)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    dets, scores = dets[order], scores[order]
    D, G = len(dets), len(gts)
    tp = np.zeros(D, dtype=bool)
    det_gt = np.full(D, -1)
    ious = np.zeros(D)
    matched = np.zeros(G, dtype=bool)
    if D and G:
        m = iou_matrix(dets, gts)
        for i in range(D):
            cand = np.where(matched, -1.0, m[i])
            j = int(np.argmax(cand))
            if cand[j] > iou_threshold:
                tp[i], det_gt[i], ious[i] = True, j, cand[j]
                matched[j] = True
    return MatchResult(tp, scores, matched, det_gt, ious)


def precision_recall(results):
    """PR sweep over pooled detections of several images.

    Returns ``(cutoffs, precision, recall)``; entry ``k`` counts every detection
    with score >= ``cutoffs[k]`` (cutoffs descending).  With no detections the
    curve is the single point (precision 1, recall 0).
    """
    if isinstance(results, MatchResult):
        results = [results]
    n_gt = sum(r.n_gt for r in results)
    scores = np.concatenate([r.scores for r in results]) if results else np.zeros(0)
    tp = np.concatenate([r.tp for r in results]) if results else np.zeros(0, dtype=bool)
    if len(scores) == 0:
        return np.array([np.inf]), np.array([1.0]), np.array([0.0])
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # collapse equal scores: a cutoff admits all of them at once
    last = np.r_[scores[1:] != scores[:-1], True]
    ctp, cfp, cut = ctp[last], cfp[last], scores[last]
    precision = ctp / (ctp + cfp)
    recall = ctp / n_gt if n_gt else np.zeros_like(precision, dtype=float)
    return cut, precision, recall


def counts_precision_recall(tp, fp, fn):
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return precision, recall


def average_precision(precision, recall):
    """All-points interpolated area under the precision envelope."""
    p = np.concatenate([[0.0], np.asarray(precision, dtype=np.float64), [0.0]])
    r = np.concatenate([[0.0], np.asarray(recall, dtype=np.float64), [np.max(recall, initial=0.0)]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    step = np.diff(r)
    return float(np.sum(step * p[1:]))


def evaluate(dets_per_image, scores_per_image, gts_per_image, iou_threshold=0.5):
    """Dataset AP with pooled detections; returns (ap, cutoffs, precision, recall, matches)."""
    results = [
        match_detections(d, s, g, iou_threshold)
        for d, s, g in zip(dets_per_image, scores_per_image, gts_per_image)
    ]
    cut, p, r = precision_recall(results)
    n_gt = sum(x.n_gt for x in results)
    ap = average_precision(p, r) if n_gt else 0.0
    return ap, cut, p, r, results


def average_recall(proposals_per_image, scores_per_image, gts_per_image, k, thresholds=AR_THRESHOLDS):
    """Mean recall over IoU thresholds for the top-``k`` proposals per image.

    A gt counts as recalled at threshold ``t`` when some proposal among the
    top ``k`` overlaps it with IoU >= ``t``.
    """
    best = []
    for props, sc, gts in zip(proposals_per_image, scores_per_image, gts_per_image):
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
        if len(gts) == 0:
            continue
        props = np.asarray(props, dtype=np.float64).reshape(-1, 5)
        order = np.argsort(-np.asarray(sc, dtype=np.float64), kind="stable")[:k]
        if len(order) == 0:
            best.append(np.zeros(len(gts)))
            continue
        best.append(iou_matrix(props[order], gts).max(axis=0))
    if not best:
        return 0.0
    best = np.concatenate(best)
    # rounding guards thresholds against float noise in exact-overlap cases
    best = np.round(best, 12)
    return float(np.mean([np.mean(best >= t) for t in thresholds]))


def mean_positive_iou(proposals_per_image, gts_per_image, threshold=0.5):
    """Mean best-match IoU over proposals whose best IoU exceeds ``threshold``; None if none do."""
    vals = []
    for props, gts in zip(proposals_per_image, gts_per_image):
        props = np.asarray(props, dtype=np.float64).reshape(-1, 5)
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
        if len(props) == 0 or len(gts) == 0:
            continue
        b = iou_matrix(props, gts).max(axis=1)
        vals.append(b[b > threshold])
    vals = np.concatenate(vals) if vals else np.zeros(0)
    return float(vals.mean()) if len(vals) else None


def write_pr_csv(path, cutoffs, precision, recall):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cutoff", "precision", "recall"])
        for c, p, r in zip(cutoffs, precision, recall):
            w.writerow([repr(float(c)), repr(float(p)), repr(float(r))])


def plot_pr_svg(path, precision, recall, ap=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(np.r_[0.0, recall], np.r_[precision[:1], precision], drawstyle="steps-post")
    ax.set_xlim(0, 1.01)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    if ap is not None:
        ax.set_title(f"AP = {ap:.3f}")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
