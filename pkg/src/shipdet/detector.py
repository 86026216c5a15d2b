"""Two-stage rotated ship detector: assembly, training step and inference.

Pipeline: backbone -> rotation-sensitive stack on the top level (ARF layers,
orientation pooling) -> dual-branch RPN -> rotated proposals -> enlarged
proposals pooled from smoothed multilevel features -> two FC layers -> score
and box refinement -> rotated NMS.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .arf import ARFLayer, OrientationPool
from .config import DetectorConfig
from .geometry import box_corners, iou_matrix, rotated_nms
from .io import resize_sample
from .losses import LossReport, detection_head_loss, rpn_loss
from .mlap import LevelSmoother, adaptive_pool, adaptive_pool_backward, enlarge
from .rpn import (
    RPNHead,
    build_targets,
    decode,
    encode,
    flatten_heads,
    generate_anchors,
    generate_proposals,
    orientation_set,
    sample_minibatch,
    unflatten_heads,
)
from .tensor import Conv2d, Layer, Linear, ReLU, ShapeError, sigmoid

log = logging.getLogger(__name__)


class NotTrainedError(RuntimeError):
    pass


class Block(Layer):
    """conv3x3 (stride s) -> ReLU -> conv3x3 -> ReLU."""

    def __init__(self, n_in, n_out, stride, rng, std, dtype):
        self.conv_a = Conv2d(n_in, n_out, 3, rng, stride=stride, pad=1, std=std, dtype=dtype)
        self.conv_b = Conv2d(n_out, n_out, 3, rng, std=std, dtype=dtype)
        self.relu_a, self.relu_b = ReLU(), ReLU()

    def forward(self, x):
        return self.relu_b.forward(self.conv_b.forward(self.relu_a.forward(self.conv_a.forward(x))))

    def backward(self, d):
        return self.conv_a.backward(self.relu_a.backward(self.conv_b.backward(self.relu_b.backward(d))))


class Backbone(Layer):
    """Small convolutional stack; block ``i`` outputs the level at stride ``2**i``."""

    def __init__(self, widths, rng, std="he", dtype=np.float32):
        self.blocks = []
        n_in = 1
        for i, w in enumerate(widths):
            self.blocks.append(Block(n_in, w, 1 if i == 0 else 2, rng, std, dtype))
            n_in = w
        self.blocks[0].conv_a.input_grad = False  # no gradient w.r.t. the image
        self.top_stride = 2 ** (len(widths) - 1)

    def forward(self, x):
        H, W = x.shape[2:]
        if H < self.top_stride or W < self.top_stride or H % self.top_stride or W % self.top_stride:
            raise ShapeError(f"image {H}x{W} must be a positive multiple of the top stride {self.top_stride}")
        feats = []
        for b in self.blocks:
            x = b.forward(x)
            feats.append(x)
        return feats

    def backward(self, dfeats):
        """``dfeats``: per-level gradients, ``None`` for unused levels.  Returns None."""
        g = None
        for i in range(len(self.blocks) - 1, -1, -1):
            if dfeats[i] is not None:
                g = dfeats[i] if g is None else g + dfeats[i]
            if g is not None:
                g = self.blocks[i].backward(g)
        return g


@dataclass
class StepReport(LossReport):
    rpn: LossReport = field(default_factory=LossReport)
    det: LossReport = field(default_factory=LossReport)

    @classmethod
    def combine(cls, rpn, det):
        s = rpn + det
        return cls(s.cls, s.reg1, s.reg2, s.total, s.n_pos, s.n_neg, rpn, det)

    def as_row(self):
        return {
            "cls": self.cls, "reg1": self.reg1, "reg2": self.reg2, "total": self.total,
            "rpn_cls": self.rpn.cls, "rpn_reg1": self.rpn.reg1, "rpn_reg2": self.rpn.reg2,
            "rpn_pos": self.rpn.n_pos, "rpn_neg": self.rpn.n_neg,
            "det_cls": self.det.cls, "det_reg1": self.det.reg1, "det_reg2": self.det.reg2,
            "det_pos": self.det.n_pos, "det_neg": self.det.n_neg,
        }


def normalize_image(img):
    img = np.asarray(img, dtype=np.float64)
    return ((img - img.mean()) / (img.std() + 1e-6)).astype(np.float32)


def pad_to_multiple(img, m):
    H, W = img.shape
    ph, pw = -H % m, -W % m
    return np.pad(img, ((0, ph), (0, pw))) if ph or pw else img


class Detector(Layer):
    def __init__(self, cfg: DetectorConfig, rng=None):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        dt = self.dtype
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        std = cfg.init_std
        widths = cfg.backbone_widths
        self.backbone = Backbone(widths, rng, cfg.backbone_init, dt)
        n_in = widths[-1]
        self.rot = []
        if cfg.rpn_mode == "dual":
            for _ in range(cfg.arf_layers):
                self.rot.append(ARFLayer(n_in, cfg.arf_filters, cfg.arf_orientations, rng, std=std, dtype=dt))
                n_in = cfg.arf_filters * cfg.arf_orientations
            self.opool = OrientationPool(cfg.arf_orientations)
            n_agn, n_ori = cfg.arf_filters, n_in
        else:
            for _ in range(cfg.arf_layers):
                self.rot.append(Conv2d(n_in, cfg.arf_filters, 3, rng, std=std, dtype=dt))
                n_in = cfg.arf_filters
            n_agn, n_ori = n_in, 0
        self.rot_relu = [ReLU() for _ in self.rot]
        self.n_anchors = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        self.n_orient = cfg.n_orientation_bins
        self.rpn = RPNHead(n_agn, n_ori, cfg.rpn_hidden, rng, mode=cfg.rpn_mode, std=std, dtype=dt,
                           n_anchors=self.n_anchors, n_orient=self.n_orient)
        lv = cfg.n_levels
        self.smoother = LevelSmoother(list(widths[-lv:]), list(cfg.level_strides), rng,
                                      out_channels=cfg.pooled_channels, std=std, dtype=dt)
        pool_ch = cfg.pooled_channels * (lv if cfg.pool_mode == "channel_concat" else 1)
        self.fc1 = Linear(pool_ch * cfg.out_size**2, cfg.fc_dim, rng, std=std, dtype=dt)
        self.fc2 = Linear(cfg.fc_dim, cfg.fc_dim, rng, std=std, dtype=dt)
        self.det_cls = Linear(cfg.fc_dim, 1, rng, std=std, dtype=dt)
        self.det_reg = Linear(cfg.fc_dim, 5, rng, std=std, dtype=dt)
        self.relu1, self.relu2 = ReLU(), ReLU()
        self.thetas = orientation_set(self.n_orient)
        self.bbox_std = np.asarray(cfg.bbox_std, dtype=np.float64)
        self.trained = False
        self._anchors = {}

    # ------------------------------------------------------------------
    # building blocks
    # ------------------------------------------------------------------

    def anchors(self, H, W):
        key = (H, W)
        if key not in self._anchors:
            self._anchors[key] = generate_anchors(H, W, self.cfg.top_stride, self.cfg.anchor_scales, self.cfg.anchor_ratios)
        return self._anchors[key]

    def _features(self, x):
        feats = self.backbone.forward(x)
        h = feats[-1]
        for layer, relu in zip(self.rot, self.rot_relu):
            h = relu.forward(layer.forward(h))
        if self.cfg.rpn_mode == "dual":
            heads = self.rpn.forward(self.opool.forward(h), h)
        else:
            heads = self.rpn.forward(h)
        return feats, heads

    def _features_backward(self, dfeats, dheads):
        d_agn, d_ori = self.rpn.backward(*dheads)
        dh = self.opool.backward(d_agn) + d_ori if self.cfg.rpn_mode == "dual" else d_agn
        for layer, relu in zip(reversed(self.rot), reversed(self.rot_relu)):
            dh = layer.backward(relu.backward(dh))
        dfeats = list(dfeats)
        dfeats[-1] = dh if dfeats[-1] is None else dfeats[-1] + dh
        self.backbone.backward(dfeats)

    def _head(self, feats, rois, batch_idx):
        cfg = self.cfg
        levels = self.smoother.forward(feats[-cfg.n_levels :])
        pooled, pcache = adaptive_pool(levels, batch_idx, enlarge(rois, cfg.enlarge), cfg.top_stride,
                                       mode=cfg.pool_mode, pattern=cfg.pattern)
        flat = pooled.reshape(len(rois), -1)
        h = self.relu1.forward(self.fc1.forward(flat))
        h = self.relu2.forward(self.fc2.forward(h))
        return self.det_cls.forward(h)[:, 0], self.det_reg.forward(h), (pcache, pooled.shape)

    def _head_backward(self, d_cls, d_reg, cache):
        pcache, pshape = cache
        dt = self.dtype
        dh = self.det_cls.backward(d_cls[:, None].astype(dt)) + self.det_reg.backward(d_reg.astype(dt))
        dh = self.fc2.backward(self.relu2.backward(dh))
        dflat = self.fc1.backward(self.relu1.backward(dh))
        dlevels = adaptive_pool_backward(dflat.reshape(pshape), pcache)
        draw = self.smoother.backward(dlevels)
        n_all = len(self.backbone.blocks)
        return [None] * (n_all - len(draw)) + draw

    def _proposals(self, heads, b, H, W, train):
        cfg = self.cfg
        reg_f, th_f, cls_f = flatten_heads(heads[0][b], heads[1][b], heads[2][b], self.n_anchors, self.n_orient)
        return generate_proposals(
            reg_f.astype(np.float64), th_f.astype(np.float64), sigmoid(cls_f.astype(np.float64)),
            self.anchors(H, W), self.thetas,
            max_keep=cfg.rpn_post_nms_train if train else cfg.rpn_post_nms_test,
            nms_threshold=cfg.rpn_nms,
            pre_nms=cfg.rpn_pre_nms_train if train else cfg.rpn_pre_nms_test,
        )

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def _rpn_terms(self, heads, gts_list, rng):
        """Sampled RPN loss and gradients w.r.t. the three head maps."""
        cfg = self.cfg
        B, _, H, W = heads[0].shape
        K, nA = self.n_orient, self.n_anchors
        anchors = self.anchors(H, W)
        parts = []
        for b in range(B):
            reg_f, th_f, cls_f = flatten_heads(heads[0][b], heads[1][b], heads[2][b], nA, K)
            T = build_targets(anchors, gts_list[b], self.thetas, cfg.rpn_pos_iou, cfg.rpn_neg_iou,
                              cfg.angle_pos, cfg.angle_neg)
            idx = sample_minibatch(T.pc, rng, cfg.rpn_batch, cfg.rpn_fg_fraction)
            a, k = np.divmod(idx, K)
            parts.append(dict(
                a=a, k=k, logits=cls_f[a, k], reg=reg_f[a], theta=th_f[a // nA, k],
                pc=T.pc[a, k], p1=T.p1[a], p2=T.p2[a, k], t=T.t[a], t_theta=T.t_theta[a, k],
            ))
        cat = {key: np.concatenate([p[key] for p in parts]) for key in ("logits", "reg", "theta", "pc", "p1", "p2", "t", "t_theta")}
        report, d_cls, d_reg, d_theta = rpn_loss(cat["logits"], cat["reg"], cat["theta"], cat, cfg.lam, cfg.focal_gamma)
        d_heads = [np.zeros_like(h) for h in heads]
        off = 0
        L = H * W
        for b, p in enumerate(parts):
            n = len(p["a"])
            sl = slice(off, off + n)
            off += n
            g_reg = np.zeros((L * nA, 4))
            g_th = np.zeros((L, K))
            g_cls = np.zeros((L * nA, K))
            np.add.at(g_reg, p["a"], d_reg[sl])
            np.add.at(g_th, (p["a"] // nA, p["k"]), d_theta[sl])
            np.add.at(g_cls, (p["a"], p["k"]), d_cls[sl])
            for dst, src in zip(d_heads, unflatten_heads(g_reg, g_th, g_cls, H, W, nA, K)):
                dst[b] = src
        return report, d_heads

    def _stage2_targets(self, props, gts, rng):
        cfg = self.cfg
        gts = np.asarray(gts, dtype=np.float64).reshape(-1, 5)
        rois = np.vstack([props, gts]) if len(gts) else np.asarray(props).reshape(-1, 5)
        if len(gts):
            ious = iou_matrix(rois, gts)
            best = ious.argmax(axis=1)
            max_iou = ious.max(axis=1)
        else:
            best = np.zeros(len(rois), dtype=int)
            max_iou = np.zeros(len(rois))
        pos = np.flatnonzero(max_iou > cfg.det_pos_iou)
        neg = np.flatnonzero(max_iou <= cfg.det_neg_iou)
        n_pos = min(len(pos), int(round(cfg.det_batch * cfg.det_fg_fraction)))
        pos = rng.choice(pos, n_pos, replace=False) if n_pos else pos[:0]
        n_neg = min(len(neg), cfg.det_batch - n_pos)
        neg = rng.choice(neg, n_neg, replace=False) if n_neg else neg[:0]
        idx = np.concatenate([pos, neg]).astype(int)
        labels = np.r_[np.ones(n_pos, dtype=int), np.zeros(n_neg, dtype=int)]
        targets = np.zeros((len(idx), 5))
        if n_pos:
            r = rois[pos]
            targets[:n_pos] = encode(gts[best[pos]], r[:, :4], r[:, 4]) / self.bbox_std
        return rois[idx], labels, targets

    def loss_and_grads(self, images, gts_list, rng, proposals=None):
        """Joint forward/backward over both stages; gradients accumulate into params.

        ``images``: (B, 1, H, W) normalized; ``gts_list``: per-image (N, 5) boxes.
        Proposals are treated as constants: no gradient flows from the second
        stage back through their coordinates.  ``proposals`` (per-image (P, 5)
        arrays) replaces the RPN's own proposals when given.
        """
        cfg = self.cfg
        x = np.asarray(images, dtype=self.dtype)
        B, _, H, W = x.shape
        feats, heads = self._features(x)
        rpn_report, d_heads = self._rpn_terms(heads, gts_list, rng)
        rois, bidx, labels, targets = [], [], [], []
        for b in range(B):
            if proposals is None:
                props, _ = self._proposals(heads, b, *heads[0].shape[2:], train=True)
            else:
                props = np.asarray(proposals[b], dtype=np.float64).reshape(-1, 5)
            r, lab, tgt = self._stage2_targets(props, gts_list[b], rng)
            rois.append(r)
            labels.append(lab)
            targets.append(tgt)
            bidx.append(np.full(len(r), b))
        rois = np.vstack(rois)
        det_report = LossReport()
        dfeats = [None] * len(feats)
        if len(rois):
            labels, targets, bidx = np.concatenate(labels), np.vstack(targets), np.concatenate(bidx)
            cls, reg, cache = self._head(feats, rois, bidx)
            det_report, d_cls, d_reg = detection_head_loss(cls, reg, labels, targets, cfg.lam, cfg.focal_gamma, cfg.det_focal)
            dfeats = self._head_backward(d_cls, d_reg, cache)
        self._features_backward(dfeats, [d.astype(self.dtype) for d in d_heads])
        return StepReport.combine(rpn_report, det_report)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def prepare(self, image, boxes=None):
        """Resize, normalize and pad one (H, W) image; returns (tensor, boxes, scale)."""
        image = np.asarray(image, dtype=np.float32)
        H, W = image.shape
        if min(H, W) < self.cfg.top_stride:
            raise ShapeError(f"image {H}x{W} smaller than the top stride {self.cfg.top_stride}")
        img, b = resize_sample(image, np.zeros((0, 5)) if boxes is None else boxes, self.cfg.image_short_side)
        scale = img.shape[0] / H, img.shape[1] / W
        x = pad_to_multiple(normalize_image(img), self.cfg.top_stride)
        return x[None, None], b, scale

    def propose(self, image):
        """Test-time RPN proposals in input image coordinates: (boxes, scores)."""
        x, _, scale = self.prepare(image)
        _, heads = self._features(x)
        boxes, scores = self._proposals(heads, 0, *heads[0].shape[2:], train=False)
        return _unscale(boxes, scale), scores

    def detect(self, image, score_threshold=None, return_proposals=False):
        """Detections on one (H, W) image: (boxes (N, 5), scores (N,)) by descending score."""
        if not self.trained:
            raise NotTrainedError("detector weights are not loaded or trained")
        cfg = self.cfg
        thr = cfg.score_threshold if score_threshold is None else score_threshold
        x, _, scale = self.prepare(image)
        feats, heads = self._features(x)
        props, pscores = self._proposals(heads, 0, *heads[0].shape[2:], train=False)
        empty = (np.zeros((0, 5)), np.zeros(0))
        if len(props) == 0:
            out = empty
        else:
            cls, reg, _ = self._head(feats, props, np.zeros(len(props), dtype=int))
            scores = sigmoid(cls.astype(np.float64))
            boxes = decode(props[:, :4], props[:, 4], reg.astype(np.float64) * self.bbox_std)
            keep = np.flatnonzero(scores >= thr)
            boxes, scores = boxes[keep], scores[keep]
            keep = rotated_nms(boxes, scores, cfg.final_nms, max_keep=cfg.max_detections)
            boxes, scores = _unscale(boxes[keep], scale), scores[keep]
            inside = _within(boxes, image.shape, slack=0.1)
            out = (boxes[inside], scores[inside])
        if return_proposals:
            return out, (_unscale(props, scale), pscores)
        return out


def _unscale(boxes, scale):
    sy, sx = scale
    if sx == 1 and sy == 1:
        return boxes
    b = np.array(boxes, dtype=np.float64)
    b[:, 0] /= sx
    b[:, 1] /= sy
    b[:, 2:4] /= (sx + sy) / 2
    return b


def _within(boxes, shape, slack=0.1):
    if len(boxes) == 0:
        return np.zeros(0, dtype=bool)
    H, W = shape
    c = box_corners(boxes)
    lo = np.array([-slack * W, -slack * H])
    hi = np.array([(1 + slack) * W, (1 + slack) * H])
    return np.all((c >= lo) & (c <= hi), axis=(1, 2))
