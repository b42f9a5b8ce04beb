"""Multi-part detection loss: localisation, objectness and class terms.

For every slot (i, j, g) with responsibility S::

    loss = xi * S * LOC + OP + CLS
    LOC  = sl1(x - tx) + sl1(y - ty) + (w - tw)^2 + (h - th)^2 + sl1(IoU - 1)
    OP   = alpha * (1 - S) * |O| + S * |O - IoU|
    CLS  = -[S log C + (1 - S) log(1 - C)]

x, y are sigmoid cell offsets, w, h sigmoid image fractions, O and C the
sigmoid objectness and class scores.  IoU is between the decoded prediction
and the assigned ground truth; it is a constant target inside OP and a
differentiable term inside LOC.  CLS is evaluated from the class logit c as
softplus(-c) or softplus(c), which equals the cross-entropy above without
clamping, so saturated scores keep finite values and gradients.  The scalar
``cls_loss`` helper takes a probability and clamps it instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from yolopeds.head import HeadConfig, ResponsibilityMap, decode_boxes, merge_head, split_head
from yolopeds.tensor import sigmoid

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    xi: float = 5.0
    iou_term: bool = True

    def __post_init__(self):
        if self.alpha <= 0 or self.xi <= 0:
            raise ValueError("alpha and xi must be positive")


@dataclass
class LossBreakdown:
    total: float
    loc: float  # already multiplied by xi
    op: float
    cls: float
    loc_iou: float = 0.0  # the xi-weighted sl1(IoU - 1) share of loc
    per_grid: list = field(default_factory=list)

    def to_json(self, step: int | None = None) -> str:
        d = {"step": step, "total": self.total, "loc": self.loc, "op": self.op, "cls": self.cls}
        return json.dumps(d)


def smooth_l1(x):
    ax = np.abs(x)
    out = np.where(ax < 1, 0.5 * np.square(x), ax - 0.5)
    return float(out) if np.ndim(out) == 0 else out


def _smooth_l1_grad(x):
    return np.where(np.abs(x) < 1, x, np.sign(x))


def loc_loss(pred, target, iou_value: float, iou_term: bool = True) -> float:
    """Localisation term of one responsible slot; pred/target are (x, y, w, h)."""
    x, y, w, h = pred
    tx, ty, tw, th = target
    out = smooth_l1(x - tx) + smooth_l1(y - ty) + (w - tw) ** 2 + (h - th) ** 2
    if iou_term:
        out += smooth_l1(iou_value - 1.0)
    return float(out)


def op_loss(objectness: float, responsible: int, iou_value: float, alpha: float = 0.1) -> float:
    if responsible:
        return abs(objectness - iou_value)
    return alpha * abs(objectness)


def cls_loss(score: float, responsible: int) -> float:
    """Binary cross-entropy of a class probability, clamped away from 0 and 1."""
    c = min(max(score, PROB_EPS), 1 - PROB_EPS)
    return float(-np.log(c)) if responsible else float(-np.log1p(-c))


def iou_with_grad(pred: np.ndarray, gt: np.ndarray):
    """IoU of center-format boxes along axis 0, and d IoU / d pred.

    ``pred`` and ``gt`` have shape (4, ...).  Disjoint pairs get IoU 0 and a
    zero gradient.
    """
    px, py, pw, ph = pred
    gx, gy, gw, gh = gt
    lo_x, hi_x = np.maximum(px - pw / 2, gx - gw / 2), np.minimum(px + pw / 2, gx + gw / 2)
    lo_y, hi_y = np.maximum(py - ph / 2, gy - gh / 2), np.minimum(py + ph / 2, gy + gh / 2)
    iw, ih = hi_x - lo_x, hi_y - lo_y
    overlap = (iw > 0) & (ih > 0)
    iw, ih = np.where(overlap, iw, 0.0), np.where(overlap, ih, 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    safe = np.where(overlap & (union > 0), union, 1.0)
    value = np.where(overlap, inter / safe, 0.0)

    # which side of the intersection each predicted edge defines
    left_p = (px - pw / 2 > gx - gw / 2).astype(float)
    right_p = (px + pw / 2 < gx + gw / 2).astype(float)
    top_p = (py - ph / 2 > gy - gh / 2).astype(float)
    bot_p = (py + ph / 2 < gy + gh / 2).astype(float)
    d_iw = np.stack([right_p - left_p, 0.5 * (right_p + left_p)])  # d/dpx, d/dpw
    d_ih = np.stack([bot_p - top_p, 0.5 * (bot_p + top_p)])  # d/dpy, d/dph

    # dIoU = dI (U + I) / U^2 - I / U^2 * d(pw ph)
    a = (union + inter) / safe**2
    b = inter / safe**2
    grad = np.stack([
        a * ih * d_iw[0],
        a * iw * d_ih[0],
        a * ih * d_iw[1] - b * ph,
        a * iw * d_ih[1] - b * pw,
    ])
    return value, np.where(overlap, grad, 0.0)


def _gt_array(resp: ResponsibilityMap, gt_boxes) -> np.ndarray:
    gt = np.zeros((4,) + resp.selector.shape)
    for (i, j, g) in resp.active_slots():
        gt[:, i, j, g] = gt_boxes[resp.assigned[i, j, g]].to_list()
    return gt


def objectness_targets(head: np.ndarray, resp: ResponsibilityMap, gt_boxes, head_cfg: HeadConfig) -> np.ndarray:
    """IoU of each responsible slot's decoded box with its ground truth, (G, G, k)."""
    raw = split_head(np.asarray(head, dtype=np.float64), head_cfg)
    value, _ = iou_with_grad(decode_boxes(raw, head_cfg.grid_size), _gt_array(resp, gt_boxes))
    return np.where(resp.selector.astype(bool), value, 0.0)


def branch_signature(head: np.ndarray, resp: ResponsibilityMap, gt_boxes, head_cfg: HeadConfig,
                     obj_target: np.ndarray | None = None) -> list[np.ndarray]:
    """Every piecewise branch the loss takes at ``head`` (for kink-aware checks)."""
    raw = split_head(np.asarray(head, dtype=np.float64), head_cfg)
    s = sigmoid(raw)
    pred = decode_boxes(raw, head_cfg.grid_size)
    gt = _gt_array(resp, gt_boxes)
    S = resp.selector.astype(bool)
    iou_val, _ = iou_with_grad(pred, gt)
    target = np.where(S, iou_val, 0.0) if obj_target is None else obj_target
    delta = s[:2] - np.moveaxis(resp.targets, -1, 0)[:2]
    px, py, pw, ph = pred
    gx, gy, gw, gh = gt
    return [
        S & (np.abs(delta) < 1),
        S & (px - pw / 2 > gx - gw / 2), S & (px + pw / 2 < gx + gw / 2),
        S & (py - ph / 2 > gy - gh / 2), S & (py + ph / 2 < gy + gh / 2),
        S & (iou_val > 0),
        np.sign(np.where(S, s[4] - target, s[4])),
    ]


def loss_and_grad(head: np.ndarray, resp: ResponsibilityMap, gt_boxes, head_cfg: HeadConfig,
                  cfg: LossConfig = LossConfig(), need_grad: bool = True,
                  obj_target: np.ndarray | None = None):
    """Loss of a single image's raw head tensor (1, 6k, G, G).

    Returns ``(LossBreakdown, grad)`` where ``grad`` has the head's shape and
    dtype (``None`` when ``need_grad`` is false).  The objectness target is
    the current IoU, held constant for differentiation; pass ``obj_target``
    (see :func:`objectness_targets`) to pin it, e.g. for finite differences.
    """
    raw = split_head(np.asarray(head, dtype=np.float64), head_cfg)
    G = head_cfg.grid_size
    s = sigmoid(raw)
    S = resp.selector.astype(bool)
    dsig = s * (1 - s)

    pred = decode_boxes(raw, G)
    gt = _gt_array(resp, gt_boxes)
    iou_val, iou_grad = iou_with_grad(pred, gt)
    iou_val = np.where(S, iou_val, 0.0)

    t = np.moveaxis(resp.targets, -1, 0)
    delta = s[:4] - t
    loc_terms = np.stack([smooth_l1(delta[0]), smooth_l1(delta[1]), delta[2] ** 2, delta[3] ** 2])
    iou_loss = smooth_l1(iou_val - 1.0) if cfg.iou_term else np.zeros_like(iou_val)
    loc = np.where(S, loc_terms.sum(axis=0) + iou_loss, 0.0)

    O = s[4]
    target = iou_val if obj_target is None else obj_target
    op = np.where(S, np.abs(O - target), cfg.alpha * np.abs(O))
    # -log(sigmoid(c)) = softplus(-c): exact in logit space, so saturated
    # slots keep a gradient instead of stalling at a probability clamp
    cls = np.where(S, np.logaddexp(0.0, -raw[5]), np.logaddexp(0.0, raw[5]))
    per_slot = cfg.xi * loc + op + cls

    if not np.all(np.isfinite(per_slot)):
        i, j, g = (int(v) for v in np.argwhere(~np.isfinite(per_slot))[0])
        raise FloatingPointError(
            f"non-finite loss at slot i={i} j={j} grid={g}: "
            f"loc={loc[i, j, g]} op={op[i, j, g]} cls={cls[i, j, g]}"
        )

    breakdown = LossBreakdown(
        total=float(per_slot.sum()),
        loc=float(cfg.xi * loc.sum()),
        op=float(op.sum()),
        cls=float(cls.sum()),
        loc_iou=float(cfg.xi * np.where(S, iou_loss, 0.0).sum()),
        per_grid=[float(v) for v in per_slot.sum(axis=(0, 1))],
    )
    if not need_grad:
        return breakdown, None

    g_s = np.zeros_like(s)  # gradient w.r.t. the sigmoid outputs
    g_s[0] = _smooth_l1_grad(delta[0])
    g_s[1] = _smooth_l1_grad(delta[1])
    g_s[2] = 2 * delta[2]
    g_s[3] = 2 * delta[3]
    if cfg.iou_term:
        g_iou = _smooth_l1_grad(iou_val - 1.0)
        # pred x, y = (cell + sigmoid) / G; pred w, h = sigmoid
        g_s[0] += g_iou * iou_grad[0] / G
        g_s[1] += g_iou * iou_grad[1] / G
        g_s[2] += g_iou * iou_grad[2]
        g_s[3] += g_iou * iou_grad[3]
    g_s[:4] *= cfg.xi * S
    g_s[4] = np.where(S, np.sign(O - target), cfg.alpha * np.sign(O))
    g_raw = g_s * dsig
    g_raw[5] = s[5] - S

    grad = merge_head(g_raw).astype(np.asarray(head).dtype)
    return breakdown, grad


def total_loss(head, resp, gt_boxes, head_cfg: HeadConfig, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    return loss_and_grad(head, resp, gt_boxes, head_cfg, cfg, need_grad=False)[0]


def batch_loss(heads: np.ndarray, resps, gt_lists, head_cfg: HeadConfig, cfg: LossConfig = LossConfig(),
               need_grad: bool = True, obj_targets=None):
    """Mean of per-image losses over the batch, with the matching head gradient."""
    n = heads.shape[0]
    parts, grads = [], []
    for b in range(n):
        pinned = None if obj_targets is None else obj_targets[b]
        bd, g = loss_and_grad(heads[b:b + 1], resps[b], gt_lists[b], head_cfg, cfg, need_grad, pinned)
        parts.append(bd)
        grads.append(g)
    mean = LossBreakdown(
        total=sum(p.total for p in parts) / n,
        loc=sum(p.loc for p in parts) / n,
        op=sum(p.op for p in parts) / n,
        cls=sum(p.cls for p in parts) / n,
        loc_iou=sum(p.loc_iou for p in parts) / n,
        per_grid=[sum(vals) / n for vals in zip(*(p.per_grid for p in parts))],
    )
    if not need_grad:
        return mean, None
    return mean, np.concatenate(grads, axis=0) / n
