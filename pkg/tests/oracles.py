"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: pixel counting, bit-at-a-time CRC,
explicit loops. None of it imports the code under test beyond plain data types.
"""

from __future__ import annotations

import math

import numpy as np


def pixel_iou(a, b) -> float:
    """IoU of integer boxes ``(xmin, ymin, xmax, ymax)`` by counting unit cells."""
    xa0, ya0, xa1, ya1 = (int(v) for v in a)
    xb0, yb0, xb1, yb1 = (int(v) for v in b)
    lo_x, lo_y = min(xa0, xb0), min(ya0, yb0)
    hi_x, hi_y = max(xa1, xb1), max(ya1, yb1)
    inter = union = 0
    for y in range(lo_y, hi_y):
        for x in range(lo_x, hi_x):
            ina = xa0 <= x < xa1 and ya0 <= y < ya1
            inb = xb0 <= x < xb1 and yb0 <= y < yb1
            inter += ina and inb
            union += ina or inb
    return inter / union if union else 0.0


def crc32c_bitwise(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 if crc & 1 else 0)
    return crc ^ 0xFFFFFFFF


def mask_reference(crc: int) -> int:
    rotated = ((crc >> 15) | (crc << 17)) & 0xFFFFFFFF
    return (rotated + 0xA282EAD8) % (1 << 32)


def frame_reference(payload: bytes) -> bytes:
    n = len(payload).to_bytes(8, "little")
    return (
        n
        + mask_reference(crc32c_bitwise(n)).to_bytes(4, "little")
        + payload
        + mask_reference(crc32c_bitwise(payload)).to_bytes(4, "little")
    )


# ---------------------------------------------------------------- detection metrics


def det_order(d):
    """Rank order: score descending, then image id, then box, then class."""
    return (-d.score, d.image_id, d.box.xmin, d.box.ymin, d.box.xmax, d.box.ymax, d.class_name)


def _box(b):
    return (b.xmin, b.ymin, b.xmax, b.ymax)


def greedy_match_oracle(dets, gts: dict, thr: float):
    """Returns (outcome per ranked detection, tp, fp, fn) per class, via pixel IoU."""
    ranked = sorted(dets, key=det_order)
    taken = set()
    outcomes = []
    tp, fp = {}, {}
    for d in ranked:
        best, best_j = -1.0, None
        on_difficult = False
        for j, g in enumerate(gts.get(d.image_id, [])):
            if g.class_name != d.class_name:
                continue
            v = pixel_iou(_box(d.box), _box(g.box))
            if g.difficult:
                if v >= thr:
                    on_difficult = True
                continue
            if (d.image_id, j) in taken:
                continue
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            taken.add((d.image_id, best_j))
            outcomes.append("TP")
            tp[d.class_name] = tp.get(d.class_name, 0) + 1
        elif on_difficult:
            outcomes.append("IGNORED")
        else:
            outcomes.append("FP")
            fp[d.class_name] = fp.get(d.class_name, 0) + 1
    n_gt = {}
    for objs in gts.values():
        for g in objs:
            if not g.difficult:
                n_gt[g.class_name] = n_gt.get(g.class_name, 0) + 1
    classes = set(n_gt) | {d.class_name for d in dets}
    counts = {c: (tp.get(c, 0), fp.get(c, 0), n_gt.get(c, 0) - tp.get(c, 0)) for c in classes}
    return ranked, outcomes, counts


def _prefix_stats(flags, total_gt):
    out = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += bool(f)
        out.append((tp / total_gt, tp / k))
    return out


def _interp(stats, r):
    """max precision over prefixes whose recall reaches r (0 if none)."""
    best = 0.0
    for rec, prec in stats:
        if rec >= r - 1e-15 and prec > best:
            best = prec
    return best


def ap_oracle(flags, total_gt: int, mode: str) -> float:
    stats = _prefix_stats(flags, total_gt)
    if mode in ("101", "11"):
        n = 101 if mode == "101" else 11
        # sample points as exact fractions k/(n-1), compared by integer arithmetic
        vals = []
        for k in range(n):
            best = 0.0
            tp = 0
            for rank, f in enumerate(flags, 1):
                tp += bool(f)
                if tp * (n - 1) >= k * total_gt:
                    best = max(best, tp / rank)
            vals.append(best)
        return sum(vals) / n
    # exact area: integrate the interpolated curve over the intervals between recall levels
    levels = sorted({0.0} | {rec for rec, _ in stats})
    area = 0.0
    for lo, hi in zip(levels, levels[1:]):
        area += (hi - lo) * _interp(stats, hi)
    return area


def recall_at_k_oracle(dets, gts: dict, thr: float, k: int | None):
    """Per-class mean over images (with gts of that class) of per-image recall, then mean over classes."""
    classes = sorted({g.class_name for objs in gts.values() for g in objs if not g.difficult})
    per_class = []
    for c in classes:
        vals = []
        for image_id in sorted(gts):
            objs = [g for g in gts[image_id] if g.class_name == c]
            n = sum(not g.difficult for g in objs)
            if n == 0:
                continue
            mine = sorted((d for d in dets if d.image_id == image_id and d.class_name == c), key=det_order)
            if k is not None:
                mine = mine[:k]
            _, outcomes, _ = greedy_match_oracle(mine, {image_id: objs}, thr)
            vals.append(outcomes.count("TP") / n)
        per_class.append(sum(vals) / len(vals))
    return sum(per_class) / len(per_class)


def nms_oracle(dets, thr: float, score_thr: float = 0.0):
    """Repeatedly take the best remaining detection and delete its group-mates that overlap it."""
    pool = [d for d in dets if d.score >= score_thr]
    kept = []
    while pool:
        best = min(pool, key=det_order)
        kept.append(best)
        pool = [
            d
            for d in pool
            if d is not best
            and not (
                d.image_id == best.image_id
                and d.class_name == best.class_name
                and pixel_iou(_box(d.box), _box(best.box)) >= thr
            )
        ]
    return sorted(kept, key=det_order)


def float_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def anchor_match_oracle(anchor_boxes, gt_boxes, thr: float):
    n, g = len(anchor_boxes), len(gt_boxes)
    assign = [-1] * n
    claimed = [False] * n
    for j in range(g):
        best, best_i = -1.0, None
        for i in range(n):
            if claimed[i]:
                continue
            v = float_iou(anchor_boxes[i], gt_boxes[j])
            if v > best:
                best, best_i = v, i
        if best_i is None:
            break
        claimed[best_i] = True
        assign[best_i] = j
    for i in range(n):
        if claimed[i] or g == 0:
            continue
        best, best_j = -1.0, None
        for j in range(g):
            v = float_iou(anchor_boxes[i], gt_boxes[j])
            if v > best:
                best, best_j = v, j
        if best >= thr:
            assign[i] = best_j
    return assign


# ---------------------------------------------------------------- network


def conv3x3_loop(x, W, b):
    """Zero-padded 3x3 cross-correlation on ``(H, W, C)`` with ``W (F, C, 3, 3)``."""
    h, w, c = x.shape
    f = W.shape[0]
    out = np.zeros((h, w, f))
    for o in range(f):
        for i in range(h):
            for j in range(w):
                s = b[o]
                for ch in range(c):
                    for di in range(3):
                        for dj in range(3):
                            y, xx = i + di - 1, j + dj - 1
                            if 0 <= y < h and 0 <= xx < w:
                                s += W[o, ch, di, dj] * x[y, xx, ch]
                out[i, j, o] = s
    return out


def maxpool_loop(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c))
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                out[i, j, ch] = max(x[2 * i + a, 2 * j + bb, ch] for a in range(2) for bb in range(2))
    return out


def reference_forward(params: dict, x2d, kinds):
    """Straight-loop forward pass of a sequential net on one standardized ``(H, W)`` image."""
    a = np.asarray(x2d, dtype=np.float64)[:, :, None]
    for name, kind in kinds:
        if kind == "conv3x3":
            a = conv3x3_loop(a, params[(name, "W")], params[(name, "b")])
        elif kind == "relu":
            a = np.array([max(v, 0.0) for v in a.ravel()]).reshape(a.shape)
        elif kind == "maxpool2x2":
            a = maxpool_loop(a)
        elif kind == "global_average_pool":
            a = np.array([sum(a[:, :, ch].ravel()) / (a.shape[0] * a.shape[1]) for ch in range(a.shape[2])])
        elif kind == "dropout":
            pass
        elif kind == "dense":
            W, b = params[(name, "W")], params[(name, "b")]
            a = np.array([b[o] + sum(a[i] * W[i, o] for i in range(W.shape[0])) for o in range(W.shape[1])])
        elif kind == "sigmoid":
            p = 1.0 / (1.0 + math.exp(-a[0]))
            a = np.array([1.0 - p, p])
        elif kind == "softmax":
            m = max(a)
            e = [math.exp(v - m) for v in a]
            a = np.array([v / sum(e) for v in e])
    return a


def cam_loop(acts, weights):
    h, w, c = acts.shape
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            s = 0.0
            for k in range(c):
                s += weights[k] * acts[i, j, k]
            out[i, j] = s
    return out
