"""
Detection metrics by hand
=========================

Cuboid IoU, non-maximum suppression, the 1/8 overlap rule, AP and ROC AUC on
examples small enough to check with pencil and paper.
"""
from dap3d import evaluation as E, parsing as P

# cuboids are (cx, cy, ct, w, h, l)
a = (5, 5, 5, 10, 10, 10)
b = (10, 5, 5, 10, 10, 10)
print("IoU of two cubes offset by half a side:", P.iou_3d(a, b))      # 500 / 1500

# three boxes in a row, each overlapping the next by half
dets = [P.Detection("v", (5 + 5 * i, 5, 5), (10, 10, 10), 0, s) for i, s in enumerate((0.9, 0.8, 0.7))]
kept = P.nms(dets, 0.3)
print("NMS keeps scores", [d.score for d in kept])                    # the middle one goes

# a small detection inside a large ground truth: correct, but the truth is not retrieved
small = P.Detection("v", (5, 5, 5), (2, 2, 2), 0, 1.0)
big = P.Detection("v", (5, 5, 5), (10, 10, 10), 0, 1.0)
tp, covered = E.match_detections([small], [big])
print("hit:", tp, "retrieved:", covered)

# ranked hits and misses with two ground truths
print("AP of hit, miss, hit:", E.average_precision([True, False, True], 2))     # 5/6

# attribute AUC: probability a positive outscores a negative
print("AUC:", E.roc_auc([0.9, 0.6, 0.4, 0.1], [1, 0, 1, 0]))                    # 0.75
