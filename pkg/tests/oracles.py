"""Slow, obviously-correct reference implementations used only by the tests.

Everything here is written with explicit Python loops over scalars and
shares no code with the package's vectorised paths.
"""

import itertools
import math

import numpy as np

from yolopeds.head import BBox, Detection, gt_box


def pad_amounts(extent, k, stride):
    out = math.ceil(extent / stride)
    need = max((out - 1) * stride + k - extent, 0)
    return out, need // 2


def depthwise_conv(x, kernels, stride):
    n, c, h, w = x.shape
    k = kernels.shape[1]
    oh, pt = pad_amounts(h, k, stride)
    ow, pl = pad_amounts(w, k, stride)
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            y = i * stride + u - pt
                            z = j * stride + v - pl
                            if 0 <= y < h and 0 <= z < w:
                                acc += float(x[b, ch, y, z]) * float(kernels[ch, u, v])
                    out[b, ch, i, j] = acc
    return out


def pointwise_conv(x, weights, bias):
    n, c, h, w = x.shape
    out = np.zeros((n, weights.shape[0], h, w), dtype=np.float64)
    for b in range(n):
        for o in range(weights.shape[0]):
            for i in range(h):
                for j in range(w):
                    acc = float(bias[o])
                    for ch in range(c):
                        acc += float(weights[o, ch]) * float(x[b, ch, i, j])
                    out[b, o, i, j] = acc
    return out


def avg_pool(x, window, stride):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // stride, w // stride))
    for b, ch, i, j in itertools.product(range(n), range(c), range(h // stride), range(w // stride)):
        vals = [float(x[b, ch, i * stride + u, j * stride + v]) for u in range(window) for v in range(window)]
        out[b, ch, i, j] = sum(vals) / len(vals)
    return out


def separable_conv(x, dw, pw, b, stride):
    z = pointwise_conv(depthwise_conv(x, dw, stride), pw, b)
    return np.maximum(z, 0)


def box_iou(a, b):
    """IoU of (cx, cy, w, h) tuples via explicit corner arithmetic."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    ix = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def numeric_grad(f, x, eps=1e-4):
    """Central differences of scalar f over every element of float64 array x."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        up = f(x)
        x[idx] = orig - eps
        down = f(x)
        x[idx] = orig
        g[idx] = (up - down) / (2 * eps)
    return g


def max_rel_err(a, n, atol=1e-6):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)))


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def sl1(x):
    return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5


def scalar_total(raw, boxes, alpha=0.1, xi=5.0, iou_term=True):
    """Slot-by-slot recomputation of the loss with plain floats.

    ``raw`` is indexed [channel, i, j, g].  Responsibility is re-derived here
    from the boxes with its own interval arithmetic.
    """
    G, k = raw.shape[1], raw.shape[3]
    owner = {}
    for n, b in enumerate(boxes):
        i, j = min(int(b.cx * G), G - 1), min(int(b.cy * G), G - 1)
        a = math.sqrt(b.w * b.h)
        g = max(math.ceil(a * k) - 1, 0)
        while (i, j, g) in owner and g < k:
            g += 1
        if g < k:
            owner[(i, j, g)] = n
    total = loc_sum = op_sum = cls_sum = 0.0
    for i in range(G):
        for j in range(G):
            for g in range(k):
                x, y, w, h, o, c = (sig(float(v)) for v in raw[:, i, j, g])
                if (i, j, g) in owner:
                    b = boxes[owner[(i, j, g)]]
                    pred = ((i + x) / G, (j + y) / G, w, h)
                    v = box_iou(pred, b.to_list())
                    loc = sl1(x - (b.cx * G - i)) + sl1(y - (b.cy * G - j)) + (w - b.w) ** 2 + (h - b.h) ** 2
                    if iou_term:
                        loc += sl1(v - 1)
                    op = abs(o - v)
                    cl = -math.log(c)
                    loc_sum += xi * loc
                else:
                    op = alpha * abs(o)
                    cl = -math.log(1 - c)
                op_sum += op
                cls_sum += cl
    total = loc_sum + op_sum + cls_sum
    return total, loc_sum, op_sum, cls_sum


def boxes_with_sqrt_area(rng, n):
    a = 1.0 - rng.uniform(0.0, 1.0, n)  # uniform on (0, 1]
    ratio = np.exp(rng.uniform(-0.5, 0.5, n))
    w = np.minimum(a * np.sqrt(ratio), 1.0)
    h = np.minimum(a * a / w, 1.0)
    w = a * a / h
    return [gt_box(0.5, 0.5, float(x), float(y)) for x, y in zip(w, h)]


def reference_nms(dets, thr):
    """Suppression by a precomputed IoU matrix over the explicitly ranked list."""
    order = sorted(range(len(dets)), key=lambda n: (-dets[n].objectness, dets[n].grid, dets[n].cell))
    m = np.array([[box_iou(dets[a].bbox.to_list(), dets[b].bbox.to_list()) for b in order] for a in order])
    alive = np.ones(len(order), bool)
    for r in range(len(order)):
        if alive[r]:
            alive[r + 1:] &= m[r, r + 1:] <= thr
    return [dets[order[r]] for r in np.flatnonzero(alive)]


def exhaustive_nms(dets, thr):
    """The unique subset that is self-consistent under ranked suppression."""
    ranked = sorted(dets, key=lambda d: (-d.objectness, d.grid, d.cell))
    found = []
    for mask in itertools.product([0, 1], repeat=len(ranked)):
        ok = True
        for r, d in enumerate(ranked):
            hit = any(mask[q] and box_iou(ranked[q].bbox.to_list(), d.bbox.to_list()) > thr
                      for q in range(r))
            if mask[r] == hit:
                ok = False
                break
        if ok:
            found.append([d for d, m in zip(ranked, mask) if m])
    assert len(found) == 1
    return found[0]


def random_dets(rng, n):
    dets = []
    for _ in range(n):
        w, h = rng.uniform(0.05, 0.4, 2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        obj = round(float(rng.uniform(0.5, 1.0)), 2)  # rounding forces some ties
        dets.append(Detection(BBox(float(cx), float(cy), float(w), float(h)), obj, 0.9,
                              int(rng.integers(5)), (int(rng.integers(10)), int(rng.integers(10)))))
    return dets


def brute_force_match(preds, gts, thr=0.5):
    """Search every partial injective assignment (depth-first, pruned as soon
    as a prefix breaks the claiming rule) and return the unique survivor."""
    ranked = sorted(preds, key=lambda d: (-d.objectness, d.grid, d.cell))
    m = [[box_iou(p.bbox.to_list(), g.to_list()) for g in gts] for p in ranked]
    found = []

    def admissible(r, a, taken):
        free = [g for g in range(len(gts)) if g not in taken and m[r][g] >= thr]
        if a is None:
            return not free
        return a in free and m[r][a] == max(m[r][g] for g in free)

    def search(r, assign, taken):
        if r == len(ranked):
            found.append(tuple(assign))
            return
        for a in [None] + list(range(len(gts))):
            if admissible(r, a, taken):
                search(r + 1, assign + [a], taken | ({a} - {None}))

    search(0, [], frozenset())
    assert len(found) == 1
    assign = found[0]
    ious = tuple(m[r][a] for r, a in enumerate(assign) if a is not None)
    tp = len(ious)
    return tp, len(ranked) - tp, len(gts) - tp, ious
