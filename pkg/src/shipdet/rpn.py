"""Dual-branch rotated region proposal network.

Orientation-agnostic anchors (theta-free ``(cx, cy, w, h)``) regress
``(tx, ty, tw, th)`` from rotation-invariant features; a second branch
regresses an angle offset for each of six fixed orientations from
rotation-sensitive features.  Every anchor paired with every fixed
orientation is an *oriented anchor*, the unit of objectness scoring.

Flat index conventions for a feature map of ``H x W`` locations:
anchor ``a`` at location ``l = i * W + j`` has index ``l * 8 + a``; oriented
anchor ``(anchor, k)`` has index ``anchor * 6 + k``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geometry import agnostic_iou_matrix, angle_diff, canonicalize, rotated_nms
from .tensor import Conv2d, Layer, ReLU, sigmoid

log = logging.getLogger(__name__)

SCALES = (32, 64, 128, 256)
RATIOS = (4, 7)  # h:w = 1:r
N_ORIENT = 6
ANCHORS_PER_LOCATION = len(SCALES) * len(RATIOS)
MAX_LOG_SIZE = math.log(1000 / 16)
TAN_GUARD = 1e-3


def anchor_shapes(scales=SCALES, ratios=RATIOS):
    """(w, h) with w * h = scale^2 and h : w = 1 : r, scale-major."""
    return np.array([(s * math.sqrt(r), s / math.sqrt(r)) for s in scales for r in ratios])


def generate_anchors(feat_h, feat_w, stride, scales=SCALES, ratios=RATIOS):
    """(feat_h * feat_w * n_shapes, 4) anchors ``(cx, cy, w, h)``."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    shapes = anchor_shapes(scales, ratios)
    ys, xs = np.meshgrid((np.arange(feat_h) + 0.5) * stride, (np.arange(feat_w) + 0.5) * stride, indexing="ij")
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1)
    n = len(shapes)
    out = np.empty((len(centers) * n, 4))
    out[:, :2] = np.repeat(centers, n, axis=0)
    out[:, 2:] = np.tile(shapes, (len(centers), 1))
    return out


def orientation_set(n=N_ORIENT):
    """Fixed orientations evenly spaced by pi/n, offset half a bin from -pi/2."""
    return -math.pi / 2 + (np.arange(n) + 0.5) * math.pi / n


# ---------------------------------------------------------------------------
# offset coding
# ---------------------------------------------------------------------------

def encode(gts, anchors, theta_a):
    """Vectorized offsets of boxes ``gts`` (N, 5) w.r.t. anchors (N, 4) at ``theta_a``.

    Returns (N, 5) ``(tx, ty, tw, th, t_theta)``.  The angle difference is
    folded into [-pi/2, pi/2) and is not checked here; see :func:`encode_offsets`.
    """
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = angle_diff(g[:, 4], np.asarray(theta_a, dtype=np.float64))
    d = np.clip(d, -math.pi / 2 + TAN_GUARD, math.pi / 2 - TAN_GUARD)
    return np.column_stack(
        [
            (g[:, 0] - a[:, 0]) / a[:, 2],
            (g[:, 1] - a[:, 1]) / a[:, 3],
            np.log(g[:, 2] / a[:, 2]),
            np.log(g[:, 3] / a[:, 3]),
            np.tan(d),
        ]
    )


def encode_offsets(gt, anchor, theta_a):
    """Offsets of one box w.r.t. one anchor; rejects near-orthogonal angles."""
    d = angle_diff(gt[4], theta_a)
    if abs(d) >= math.pi / 2 - TAN_GUARD:
        raise ValueError(f"angle difference {d:.6f} too close to pi/2 for tan encoding")
    return tuple(float(v) for v in encode([gt], [anchor[:4]], [theta_a])[0])


def decode(anchors, theta_a, t):
    """Inverse of :func:`encode`; returns canonical (N, 5) boxes."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(t, dtype=np.float64).reshape(-1, 5)
    tw = np.minimum(t[:, 2], MAX_LOG_SIZE)
    th = np.minimum(t[:, 3], MAX_LOG_SIZE)
    boxes = np.column_stack(
        [
            t[:, 0] * a[:, 2] + a[:, 0],
            t[:, 1] * a[:, 3] + a[:, 1],
            a[:, 2] * np.exp(tw),
            a[:, 3] * np.exp(th),
            np.asarray(theta_a, dtype=np.float64) + np.arctan(t[:, 4]),
        ]
    )
    return canonicalize(boxes)


def decode_offsets(anchor, theta_a, t):
    return tuple(float(v) for v in decode([anchor[:4]], [theta_a], [t])[0])


# ---------------------------------------------------------------------------
# label assignment
# ---------------------------------------------------------------------------

def _canonical_order(gts):
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    return np.lexsort(g.T[::-1])


def assign_agnostic_labels(anchors, gts, pos_iou=0.7):
    """Positive anchor labels p1 from orientation-agnostic IoU.

    Positive if the anchor is (one of) the best anchors of some box, or its
    agnostic IoU with any box exceeds ``pos_iou``.  Returns
    ``(p1, matched, iou)``: boolean labels, matched box index (-1 when there
    are no boxes) and the agnostic IoU with the matched box.
    """
    A = len(anchors)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    if len(gts) == 0:
        return np.zeros(A, dtype=bool), np.full(A, -1), np.zeros(A)
    order = _canonical_order(gts)
    ious = agnostic_iou_matrix(anchors, gts[order])  # (A, G) in canonical gt order
    matched = np.argmax(ious, axis=1)
    best = ious[np.arange(A), matched]
    p1 = best > pos_iou
    gt_best = ious.max(axis=0)
    # rule (I): the best anchors of each box, matched to that box
    is_best = (ious == gt_best[None, :]) & (gt_best[None, :] > 0)
    fallback = is_best.any(axis=1)
    if fallback.any():
        masked = np.where(is_best, ious, -1.0)
        matched = np.where(fallback, np.argmax(masked, axis=1), matched)
        best = ious[np.arange(A), matched]
        p1 |= fallback
    return p1, order[matched], best


def assign_orientation_labels(thetas, gt_theta, max_dev=math.pi / 6):
    """p2 per (anchor, orientation): folded deviation from the box angle < ``max_dev``.

    Returns (p2, deviation) with deviation in [0, pi/2].
    """
    dev = np.abs(angle_diff(np.asarray(gt_theta, dtype=np.float64)[:, None], np.asarray(thetas)[None, :]))
    return dev < max_dev, dev


def assign_oriented_labels(p1, p2, agnostic_iou, delta_theta, neg_iou=0.3, neg_dev=math.pi / 3):
    """Oriented anchor labels: 1 positive, 0 negative, -1 ignored.

    ``p1`` / ``agnostic_iou`` are per anchor (broadcast over orientations),
    ``p2`` / ``delta_theta`` per (anchor, orientation).
    """
    p1 = np.asarray(p1, dtype=bool)
    p2 = np.asarray(p2, dtype=bool)
    iou = np.asarray(agnostic_iou, dtype=np.float64)
    if p2.ndim == 2:
        p1 = p1[:, None]
        iou = iou[:, None]
    pos = p1 & p2
    neg = ~pos & ((iou < neg_iou) | (np.asarray(delta_theta) > neg_dev))
    return np.where(pos, 1, np.where(neg, 0, -1))


@dataclass
class RPNTargets:
    p1: np.ndarray  # (A,) bool
    p2: np.ndarray  # (A, K) bool
    pc: np.ndarray  # (A, K) in {1, 0, -1}
    matched: np.ndarray  # (A,) gt index or -1
    iou: np.ndarray  # (A,) agnostic IoU with matched gt
    t: np.ndarray  # (A, 4)
    t_theta: np.ndarray  # (A, K)


def build_targets(anchors, gts, thetas, pos_iou=0.7, neg_iou=0.3, pos_dev=math.pi / 6, neg_dev=math.pi / 3):
    A, K = len(anchors), len(thetas)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
    p1, matched, iou = assign_agnostic_labels(anchors, gts, pos_iou)
    if len(gts) == 0:
        z = np.zeros((A, K))
        return RPNTargets(p1, z.astype(bool), np.zeros((A, K), dtype=int), matched, iou, np.zeros((A, 4)), z)
    g = gts[matched]
    p2, dev = assign_orientation_labels(thetas, g[:, 4], pos_dev)
    pc = assign_oriented_labels(p1, p2, iou, dev, neg_iou, neg_dev)
    t = encode(g, anchors, np.zeros(A))[:, :4]
    d = np.clip(angle_diff(g[:, 4][:, None], np.asarray(thetas)[None, :]), -math.pi / 2 + TAN_GUARD, math.pi / 2 - TAN_GUARD)
    return RPNTargets(p1, p2, pc, matched, iou, t, np.tan(d))


def sample_minibatch(pc, rng, total=256, fg_fraction=0.25):
    """Indices (into ``pc.ravel()``) of a balanced oriented-anchor minibatch."""
    flat = np.asarray(pc).ravel()
    pos = np.flatnonzero(flat == 1)
    neg = np.flatnonzero(flat == 0)
    n_pos = min(len(pos), int(round(total * fg_fraction)))
    if n_pos == 0:
        log.info("no positive oriented anchors; minibatch is all negative")
    pos = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    n_neg = min(len(neg), total - n_pos)
    neg = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.concatenate([pos, neg]).astype(np.int64)


# ---------------------------------------------------------------------------
# heads and proposals
# ---------------------------------------------------------------------------

class RPNHead(Layer):
    """Regression and objectness heads.

    ``dual``: a 3x3 conv per branch (agnostic features -> box offsets,
    oriented features -> angle offsets) and objectness from both hidden maps.
    ``single``: one shared 3x3 conv over one feature map feeds all three heads.
    """

    def __init__(self, n_agnostic, n_oriented, hidden, rng, mode="dual", std=0.01, dtype=np.float32,
                 n_anchors=ANCHORS_PER_LOCATION, n_orient=N_ORIENT):
        self.mode = mode
        self.n_anchors, self.n_orient = n_anchors, n_orient
        if mode == "dual":
            self.conv_a = Conv2d(n_agnostic, hidden, 3, rng, std=std, dtype=dtype)
            self.conv_o = Conv2d(n_oriented, hidden, 3, rng, std=std, dtype=dtype)
            cls_in = 2 * hidden
        elif mode == "single":
            self.conv_a = Conv2d(n_agnostic, hidden, 3, rng, std=std, dtype=dtype)
            cls_in = hidden
        else:
            raise ValueError(f"unknown rpn mode {mode!r}")
        self.relu_a, self.relu_o = ReLU(), ReLU()
        self.reg = Conv2d(hidden, 4 * n_anchors, 1, rng, std=std, dtype=dtype)
        self.reg_theta = Conv2d(hidden, n_orient, 1, rng, std=std, dtype=dtype)
        self.cls = Conv2d(cls_in, n_anchors * n_orient, 1, rng, std=std, dtype=dtype)

    @property
    def output_widths(self):
        return 4 * self.n_anchors, self.n_orient, self.n_anchors * self.n_orient

    def forward(self, agnostic, oriented=None):
        """Returns (reg (B, 32, H, W), reg_theta (B, 6, H, W), cls logits (B, 48, H, W))."""
        ha = self.relu_a.forward(self.conv_a.forward(agnostic))
        if self.mode == "dual":
            ho = self.relu_o.forward(self.conv_o.forward(oriented))
            self._split = ha.shape[1]
            return self.reg.forward(ha), self.reg_theta.forward(ho), self.cls.forward(np.concatenate([ha, ho], axis=1))
        return self.reg.forward(ha), self.reg_theta.forward(ha), self.cls.forward(ha)

    def backward(self, d_reg, d_theta, d_cls):
        """Returns gradients w.r.t. (agnostic, oriented) inputs; oriented is None in single mode."""
        dh_cls = self.cls.backward(d_cls)
        if self.mode == "dual":
            dha = self.reg.backward(d_reg) + dh_cls[:, : self._split]
            dho = self.reg_theta.backward(d_theta) + dh_cls[:, self._split :]
            da = self.conv_a.backward(self.relu_a.backward(dha))
            do = self.conv_o.backward(self.relu_o.backward(dho))
            return da, do
        dha = self.reg.backward(d_reg) + self.reg_theta.backward(d_theta) + dh_cls
        return self.conv_a.backward(self.relu_a.backward(dha)), None


def flatten_heads(reg, reg_theta, cls_logits, n_anchors=ANCHORS_PER_LOCATION, n_orient=N_ORIENT):
    """Per-image head maps -> (reg (A, 4), theta (L, K), logits (A, K)) in flat index order."""
    C, H, W = reg.shape
    L = H * W
    reg_f = reg.reshape(n_anchors, 4, L).transpose(2, 0, 1).reshape(L * n_anchors, 4)
    theta_f = reg_theta.reshape(n_orient, L).T
    cls_f = cls_logits.reshape(n_anchors, n_orient, L).transpose(2, 0, 1).reshape(L * n_anchors, n_orient)
    return reg_f, theta_f, cls_f


def unflatten_heads(d_reg, d_theta, d_cls, H, W, n_anchors=ANCHORS_PER_LOCATION, n_orient=N_ORIENT):
    """Adjoint of :func:`flatten_heads`."""
    L = H * W
    r = d_reg.reshape(L, n_anchors, 4).transpose(1, 2, 0).reshape(n_anchors * 4, H, W)
    t = d_theta.T.reshape(n_orient, H, W)
    c = d_cls.reshape(L, n_anchors, n_orient).transpose(1, 2, 0).reshape(n_anchors * n_orient, H, W)
    return r, t, c


def generate_proposals(reg, theta, scores, anchors, thetas, max_keep, nms_threshold=0.7, pre_nms=None):
    """Per-image proposals from flattened head outputs.

    ``reg`` (A, 4), ``theta`` (L, K), ``scores`` (A, K) probabilities.  Each
    anchor keeps its highest-scoring orientation clone and is decoded with
    that orientation's angle offset.  Returns (boxes (P, 5), scores (P,)) in
    descending score order.
    """
    A = len(anchors)
    n_per_loc = A // len(theta)
    best = np.argmax(scores, axis=1)
    best_score = scores[np.arange(A), best]
    t_theta = theta[np.arange(A) // n_per_loc, best]
    order = np.argsort(-best_score, kind="stable")
    if pre_nms is not None:
        order = order[:pre_nms]
    t = np.column_stack([reg[order], t_theta[order]])
    boxes = decode(anchors[order], np.asarray(thetas)[best[order]], t)
    sc = best_score[order]
    keep = rotated_nms(boxes, sc, nms_threshold, max_keep=max_keep)
    return boxes[keep], sc[keep]


def proposal_scores(cls_logits):
    return sigmoid(cls_logits)
