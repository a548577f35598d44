"""Refinement targets and losses."""

from dataclasses import dataclass
import math

import numpy as np

from .geom import iou_3d

POSITIVE_IOU = 0.55


def score_target(iou):
    """IoU-guided soft label ``clip(2 * iou - 0.5, 0, 1)``."""
    return np.minimum(1.0, np.maximum(0.0, 2.0 * np.asarray(iou, dtype=np.float64) - 0.5))


def wrap_residual(dtheta):
    """``dtheta - floor(dtheta / pi + 0.5) * pi``, in ``[-pi/2, pi/2)``."""
    d = np.asarray(dtheta, dtype=np.float64)
    return d - np.floor(d / np.pi + 0.5) * np.pi


def regression_targets(proposal, gt):
    """Center and size differences (global frame) plus the wrapped yaw residual."""
    tc = np.array([gt.cx - proposal.cx, gt.cy - proposal.cy, gt.cz - proposal.cz])
    ts = np.array([gt.l - proposal.l, gt.w - proposal.w, gt.h - proposal.h])
    to = float(wrap_residual(gt.yaw - proposal.yaw))
    return np.concatenate([tc, ts, [to]])


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_with_logits(logits, targets):
    """Mean of ``-I log p - (1 - I) log(1 - p)`` with ``p = sigmoid(logit)``,
    evaluated as ``softplus(z) - I z``."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if z.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(_softplus(z) - t * z))


def bce_with_logits_grad(logits, targets):
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return (p - t) / z.size


def bce_loss(scores, targets):
    """Probability-space BCE, clamped to ``[1e-12, 1 - 1e-12]``."""
    p = np.clip(np.asarray(scores, dtype=np.float64).reshape(-1), 1e-12, 1.0 - 1e-12)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if p.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(-t * np.log(p) - (1.0 - t) * np.log(1.0 - p)))


def l1_loss(residuals, targets, positive):
    """Mean over positives of ``sum |o - t|``; 0 when there are none."""
    o = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 7)
    pos = np.asarray(positive, dtype=bool).reshape(-1)
    npos = int(pos.sum())
    if npos == 0:
        return 0.0
    return float(np.abs(o[pos] - t[pos]).sum() / npos)


def l1_loss_grad(residuals, targets, positive):
    o = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 7)
    pos = np.asarray(positive, dtype=bool).reshape(-1)
    g = np.zeros_like(o)
    npos = int(pos.sum())
    if npos:
        g[pos] = np.sign(o[pos] - t[pos]) / npos
    return g


def total_loss(cls, reg, alpha=1.0):
    return cls + alpha * reg


@dataclass
class TargetSet:
    score: np.ndarray  # (B,)
    targets: np.ndarray  # (B, 7), zero rows for negatives
    positive: np.ndarray  # (B,) bool
    matched: np.ndarray  # (B,) gt index or -1
    iou: np.ndarray  # (B,)

    @property
    def B(self):
        return len(self.score)

    @property
    def B_pos(self):
        return int(self.positive.sum())


def assign_targets(proposals, gts, positive_iou=POSITIVE_IOU):
    """Match each proposal to its max-IoU ground truth (lowest index on ties)."""
    b = len(proposals)
    ious = np.zeros(b)
    matched = np.full(b, -1, np.int64)
    targets = np.zeros((b, 7))
    for i, p in enumerate(proposals):
        best, best_j = 0.0, -1
        for j, g in enumerate(gts):
            v = iou_3d(p, g)
            if v > best:
                best, best_j = v, j
        ious[i] = best
        matched[i] = best_j
    positive = (matched >= 0) & (ious >= positive_iou)
    for i in np.nonzero(positive)[0]:
        targets[i] = regression_targets(proposals[i], gts[matched[i]])
    return TargetSet(score_target(ious), targets, positive, matched, ious)


def loss_terms(logits, residuals, ts, alpha=1.0):
    """``(total, cls, reg, grad_logits, grad_residuals)`` for a batch."""
    cls = bce_with_logits(logits, ts.score)
    reg = l1_loss(residuals, ts.targets, ts.positive)
    g_logit = bce_with_logits_grad(logits, ts.score)
    g_res = alpha * l1_loss_grad(residuals, ts.targets, ts.positive)
    return total_loss(cls, reg, alpha), cls, reg, g_logit, g_res


def angle_error_mod_pi(a, b):
    d = (a - b) % math.pi
    return min(d, math.pi - d)
