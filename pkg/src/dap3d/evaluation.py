"""Detection AP/MAP under the volume-overlap rules and per-attribute ROC AUC."""
from __future__ import annotations

import csv
import io
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from .parsing import cuboid_volume, intersection_volume, iou_3d
from .synth import H1_NAMES, H2_NAMES

DEFAULT_HIT_THRESHOLD = 0.6


@dataclass(frozen=True)
class MatchRule:
    precision_fraction: float = 1.0 / 8.0
    recall_fraction: float = 1.0 / 8.0

    def __post_init__(self):
        for v in (self.precision_fraction, self.recall_fraction):
            if not 0.0 < v <= 1.0:
                raise ValueError(f"overlap fractions must lie in (0, 1], got {v}")


def match_detections(detections, ground_truths, rule: MatchRule = MatchRule()):
    """TP flags for ``detections`` (already sorted by score, descending) and
    covered flags for ``ground_truths``.

    A detection claims the unclaimed same-category GT of the same video with
    the largest overlap, provided overlap / detection volume reaches the
    precision fraction. A GT is covered when any same-category detection
    overlaps at least the recall fraction of its volume.
    """
    tp = [j >= 0 for j in _greedy_match(detections, ground_truths, rule)]
    covered = []
    for g in ground_truths:
        gv = cuboid_volume(g.volume)
        covered.append(any(d.category_id == g.category_id and d.video_id == g.video_id
                           and intersection_volume(d.volume, g.volume) / gv >= rule.recall_fraction
                           for d in detections))
    return tp, covered


def pr_curve(tp_flags, num_ground_truths: int):
    tp = np.cumsum(np.asarray(tp_flags, dtype=np.float64))
    n = np.arange(1, len(tp) + 1)
    precision = tp / n if len(tp) else np.zeros(0)
    recall = tp / num_ground_truths if num_ground_truths else np.zeros(len(tp))
    return recall, precision


def average_precision(tp_flags, num_ground_truths: int) -> float:
    """All-points AP with the monotone precision envelope."""
    if num_ground_truths < 0:
        raise ValueError("num_ground_truths must be >= 0")
    if num_ground_truths == 0 or len(tp_flags) == 0:
        return 0.0
    # each hit adds 1/num_ground_truths of recall at the envelope precision;
    # summed as exact fractions so the result is the correctly rounded AP
    flags = [bool(f) for f in tp_flags]
    total, best = Fraction(0), Fraction(0)
    tp = np.cumsum(flags)
    for k in range(len(flags) - 1, -1, -1):
        best = max(best, Fraction(int(tp[k]), k + 1))
        if flags[k]:
            total += best
    return float(total / num_ground_truths)


def map_score(aps: dict) -> float:
    if not aps:
        raise ValueError("need at least one category AP")
    return float(np.mean(list(aps.values())))


def roc_auc(scores, labels, method: str = "auto"):
    """Mann-Whitney AUC, ``None`` when only one class is present."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        return None
    if method == "pairs" or (method == "auto" and npos * nneg <= 250_000):
        pos, neg = s[y][:, None], s[~y][None, :]
        return float(((pos > neg).sum() + 0.5 * (pos == neg).sum()) / (npos * nneg))
    # rank-sum with midranks for ties
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s))
    sorted_s = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return float((ranks[y].sum() - npos * (npos + 1) / 2.0) / (npos * nneg))


@dataclass
class AttributeLevel:
    names: tuple
    auc: list               # per attribute, None when undefined
    hit_threshold: float

    @property
    def defined(self) -> list[float]:
        return [a for a in self.auc if a is not None]

    @property
    def mean_auc(self):
        d = self.defined
        return float(np.mean(d)) if d else None

    @property
    def std_auc(self):
        d = self.defined
        return float(np.std(d)) if d else None

    @property
    def hits(self) -> int:
        return sum(a >= self.hit_threshold for a in self.defined)

    @property
    def excluded(self) -> list[str]:
        return [n for n, a in zip(self.names, self.auc) if a is None]


def attribute_report(h1_probs, h1_bits, h2_probs, h2_bits, hit_threshold: float = DEFAULT_HIT_THRESHOLD):
    h1_probs, h1_bits = np.asarray(h1_probs), np.asarray(h1_bits)
    h2_probs, h2_bits = np.asarray(h2_probs), np.asarray(h2_bits)
    if h1_probs.shape[-1:] != (19,) or h2_probs.shape[-1:] != (14,):
        raise ValueError("expected 19 H1 and 14 H2 columns")
    if h1_probs.shape != h1_bits.shape or h2_probs.shape != h2_bits.shape:
        raise ValueError("probabilities and bits are not aligned")
    lv1 = AttributeLevel(H1_NAMES, [roc_auc(h1_probs[:, k], h1_bits[:, k]) for k in range(19)], hit_threshold)
    lv2 = AttributeLevel(H2_NAMES, [roc_auc(h2_probs[:, k], h2_bits[:, k]) for k in range(14)], hit_threshold)
    return lv1, lv2


@dataclass
class EvalReport:
    ap: dict
    pr: dict                      # category -> (recall, precision)
    recall: dict                  # category -> covered fraction
    h1: AttributeLevel | None = None
    h2: AttributeLevel | None = None
    matched: int = 0
    notes: list = field(default_factory=list)

    @property
    def map(self) -> float:
        return map_score(self.ap)


def evaluate(detections, ground_truths, rule: MatchRule = MatchRule(),
             hit_threshold: float = DEFAULT_HIT_THRESHOLD, categories=None) -> EvalReport:
    """Per-category AP over all videos plus attribute AUCs on TP detections
    paired with the GT they claimed."""
    if categories is None:
        categories = sorted({g.category_id for g in ground_truths})
    dets = sorted(detections, key=lambda d: -d.score)
    ap, pr, rec = {}, {}, {}
    pairs = []
    for c in categories:
        dc = [d for d in dets if d.category_id == c]
        gc = [g for g in ground_truths if g.category_id == c]
        tp, covered = match_detections(dc, gc, rule)
        ap[c] = average_precision(tp, len(gc))
        pr[c] = pr_curve(tp, len(gc))
        rec[c] = float(np.mean(covered)) if gc else 0.0
        pairs += _tp_pairs(dc, gc, rule)
    report = EvalReport(ap, pr, rec, matched=len(pairs))
    stray = {d.category_id for d in dets} - set(categories)
    if stray:
        report.notes.append(f"detections of categories absent from ground truth counted as FP: {sorted(stray)}")
    if pairs:
        report.h1, report.h2 = attribute_report(np.stack([d.h1 for d, _ in pairs]), np.stack([g.h1 > 0.5 for _, g in pairs]),
                                                np.stack([d.h2 for d, _ in pairs]), np.stack([g.h2 > 0.5 for _, g in pairs]),
                                                hit_threshold)
    return report


def _greedy_match(dets, gts, rule):
    """Index of the GT each detection claims, or -1. Largest overlap wins;
    equal overlaps go to the higher IoU, then the lower index."""
    claimed = [False] * len(gts)
    out = []
    for d in dets:
        dv = cuboid_volume(d.volume)
        best, best_i = (-1.0, -1.0), -1
        for j, g in enumerate(gts):
            if claimed[j] or g.category_id != d.category_id or g.video_id != d.video_id:
                continue
            inter = intersection_volume(d.volume, g.volume)
            key = (inter, iou_3d(d.volume, g.volume))
            if inter / dv >= rule.precision_fraction and key > best:
                best, best_i = key, j
        if best_i >= 0:
            claimed[best_i] = True
        out.append(best_i)
    return out


def _tp_pairs(dets, gts, rule):
    return [(d, gts[j]) for d, j in zip(dets, _greedy_match(dets, gts, rule)) if j >= 0]


# -- report output ---------------------------------------------------------------

def _f(v) -> str:
    return "NA" if v is None else f"{v:.4f}"


def report_table(r: EvalReport) -> str:
    lines = ["category      AP       recall", "-" * 30]
    for c in sorted(r.ap):
        lines.append(f"{c:<10d}  {_f(r.ap[c])}   {_f(r.recall[c])}")
    lines.append(f"MAP         {_f(r.map)}")
    for name, lv in (("H1", r.h1), ("H2", r.h2)):
        if lv is None:
            lines.append(f"{name}: no matched detections")
            continue
        lines.append(f"{name}: mean AUC {_f(lv.mean_auc)}  std {_f(lv.std_auc)}  "
                     f"hits {lv.hits}/{len(lv.defined)} (AUC >= {lv.hit_threshold})")
        if lv.excluded:
            lines.append(f"{name}: constant labels, excluded: {', '.join(lv.excluded)}")
    lines += r.notes
    return "\n".join(lines) + "\n"


def _csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerows(rows)
    return buf.getvalue()


def category_csv(r: EvalReport) -> str:
    rows = [("category", "ap", "recall")]
    rows += [(c, _f(r.ap[c]), _f(r.recall[c])) for c in sorted(r.ap)]
    rows.append(("MAP", _f(r.map), ""))
    return _csv(rows)


def attribute_csv(r: EvalReport) -> str:
    rows = [("level", "attribute", "auc")]
    for name, lv, names in (("H1", r.h1, H1_NAMES), ("H2", r.h2, H2_NAMES)):
        aucs = lv.auc if lv is not None else [None] * len(names)
        rows += [(name, n, _f(a)) for n, a in zip(names, aucs)]
    return _csv(rows)


def pr_csv(r: EvalReport) -> str:
    rows = [("category", "recall", "precision")]
    for c in sorted(r.pr):
        rec, prec = r.pr[c]
        rows += [(c, f"{a:.6f}", f"{b:.6f}") for a, b in zip(rec, prec)]
    return _csv(rows)
