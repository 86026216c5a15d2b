"""Focal classification loss, smooth-L1 regression and the two-stage losses.

Loss functions return the scalar value together with gradients with respect
to the raw head outputs (logits and offsets), ready to be fed back through
the network.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

P_CLAMP = 1e-7


@dataclass
class LossReport:
    cls: float = 0.0
    reg1: float = 0.0
    reg2: float = 0.0
    total: float = 0.0
    n_pos: int = 0
    n_neg: int = 0

    def __add__(self, other):
        return LossReport(
            self.cls + other.cls,
            self.reg1 + other.reg1,
            self.reg2 + other.reg2,
            self.total + other.total,
            self.n_pos + other.n_pos,
            self.n_neg + other.n_neg,
        )

    def as_dict(self):
        return asdict(self)


def smooth_l1(x):
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


def focal_loss(p, positive, gamma=2.0):
    """-(1 - p_hat)^gamma log(p_hat), p_hat = p for positives and 1 - p otherwise."""
    p = np.clip(np.asarray(p, dtype=np.float64), P_CLAMP, 1 - P_CLAMP)
    p_hat = np.where(positive, p, 1 - p)
    return -((1 - p_hat) ** gamma) * np.log(p_hat)


def focal_loss_logits(z, positive, gamma=2.0):
    """Focal loss of sigmoid(z); returns (per-element loss, d loss / d z)."""
    z = np.asarray(z, dtype=np.float64)
    sign = np.where(positive, 1.0, -1.0)
    zs = sign * z
    # p_hat = sigmoid(sign * z), computed stably
    e = np.exp(-np.abs(zs))
    p_hat = np.where(zs >= 0, 1 / (1 + e), e / (1 + e))
    clamped = (p_hat < P_CLAMP) | (p_hat > 1 - P_CLAMP)
    p_hat = np.clip(p_hat, P_CLAMP, 1 - P_CLAMP)
    q = 1 - p_hat
    log_p = np.log(p_hat)
    loss = -(q**gamma) * log_p
    if gamma == 0:
        dl_dp = -1 / p_hat
    else:
        dl_dp = gamma * q ** (gamma - 1) * log_p - q**gamma / p_hat
    grad = np.where(clamped, 0.0, dl_dp * p_hat * q * sign)
    return loss, grad


def classification_loss(logits, positive, gamma=2.0, focal=True):
    return focal_loss_logits(logits, positive, gamma if focal else 0.0)


def rpn_loss(cls_logits, reg, reg_theta, targets, lam=1.0, gamma=2.0):
    """Multi-task loss over the sampled oriented anchors.

    Per sampled oriented anchor: classification, plus agnostic regression when
    its anchor is positive (p1) and angle regression when additionally its
    orientation is positive (p2).  Inputs are flattened over the batch:

    - ``cls_logits``: (S,) logits of the sampled oriented anchors
    - ``reg``: (S, 4) agnostic offsets of each sample's anchor
    - ``reg_theta``: (S,) angle offset of each sample's orientation
    - ``targets``: dict with ``pc`` (S,) in {0, 1}, ``p1`` (S,), ``p2`` (S,),
      ``t`` (S, 4), ``t_theta`` (S,)

    Returns (LossReport, d_cls, d_reg, d_theta).
    """
    S = len(cls_logits)
    pc = np.asarray(targets["pc"]).astype(bool)
    p1 = np.asarray(targets["p1"]).astype(bool)
    p2 = np.asarray(targets["p2"]).astype(bool) & p1
    d_cls = np.zeros(S)
    d_reg = np.zeros((S, 4))
    d_theta = np.zeros(S)
    if S == 0:
        return LossReport(), d_cls, d_reg, d_theta
    cls_each, g = focal_loss_logits(cls_logits, pc, gamma)
    cls = cls_each.sum() / S
    d_cls = g / S
    reg1 = reg2 = 0.0
    n1, n2 = int(p1.sum()), int(p2.sum())
    if n1:
        diff = np.asarray(reg, dtype=np.float64)[p1] - np.asarray(targets["t"])[p1]
        reg1 = smooth_l1(diff).sum() / n1
        d_reg[p1] = lam * smooth_l1_grad(diff) / n1
    if n2:
        diff = np.asarray(reg_theta, dtype=np.float64)[p2] - np.asarray(targets["t_theta"])[p2]
        reg2 = smooth_l1(diff).sum() / n2
        d_theta[p2] = lam * smooth_l1_grad(diff) / n2
    total = cls + lam * (reg1 + reg2)
    report = LossReport(float(cls), float(reg1), float(reg2), float(total), int(pc.sum()), int(S - pc.sum()))
    return report, d_cls, d_reg, d_theta


def detection_head_loss(cls_logits, box_offsets, labels, targets, lam=1.0, gamma=2.0, focal=True):
    """Second-stage loss on sampled proposals.

    ``box_offsets`` and ``targets`` are (P, 5) = (tx, ty, tw, th, t_theta);
    regression only counts for positive proposals.  Returns
    (LossReport, d_cls, d_offsets).
    """
    P = len(cls_logits)
    pos = np.asarray(labels).astype(bool)
    d_cls = np.zeros(P)
    d_off = np.zeros((P, 5))
    if P == 0:
        return LossReport(), d_cls, d_off
    cls_each, g = classification_loss(cls_logits, pos, gamma, focal)
    cls = cls_each.sum() / P
    d_cls = g / P
    reg1 = reg2 = 0.0
    n = int(pos.sum())
    if n:
        diff = np.asarray(box_offsets, dtype=np.float64)[pos] - np.asarray(targets)[pos]
        reg1 = smooth_l1(diff[:, :4]).sum() / n
        reg2 = smooth_l1(diff[:, 4]).sum() / n
        d_off[pos] = lam * smooth_l1_grad(diff) / n
    total = cls + lam * (reg1 + reg2)
    return LossReport(float(cls), float(reg1), float(reg2), float(total), n, P - n), d_cls, d_off
