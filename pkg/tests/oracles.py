"""Brute-force reference implementations for the metric code."""
import itertools
from fractions import Fraction

from dap3d.parsing import iou_3d


def voxel_iou(a, b):
    """IoU by counting the unit voxels of integer-cornered cuboids."""
    def cells(c):
        lo = [int(c[k] - c[k + 3] / 2) for k in range(3)]
        return set(itertools.product(*(range(lo[k], lo[k] + int(c[k + 3])) for k in range(3))))
    ca, cb = cells(a), cells(b)
    return len(ca & cb) / len(ca | cb)


def oracle_nms(dets, thr):
    """The unique subset K where each detection is in K exactly when no
    higher-scoring member of K of its category overlaps it beyond ``thr``;
    found by trying every subset."""
    n = len(dets)
    order = sorted(range(n), key=lambda i: -dets[i].score)
    rank = {i: r for r, i in enumerate(order)}
    found = []
    for mask in range(1 << n):
        K = {i for i in range(n) if mask >> i & 1}
        ok = True
        for i in range(n):
            blocked = any(rank[j] < rank[i] and dets[j].category_id == dets[i].category_id
                          and iou_3d(dets[i].volume, dets[j].volume) > thr for j in K)
            if (i in K) == blocked:
                ok = False
                break
        if ok:
            found.append(K)
    assert len(found) == 1
    return found[0]


def oracle_ap(flags, n_gt):
    """Interpolated precision at each recall level from explicit PR points,
    in exact arithmetic."""
    points, tp = [], 0
    for k, f in enumerate(flags, start=1):
        tp += f
        points.append((Fraction(tp, n_gt), Fraction(tp, k)))
    ap, prev = Fraction(0), Fraction(0)
    for r in sorted({r for r, _ in points}):
        if r == 0:
            continue
        ap += (r - prev) * max(p for rr, p in points if rr >= r)
        prev = r
    return float(ap)


def oracle_auc(scores, labels):
    """Fraction of positive/negative pairs ranked correctly, ties half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))
