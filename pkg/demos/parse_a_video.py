"""
Parsing a composite video
=========================

Places a few actions on a long canvas, cuts sliding-window proposals, runs
a network over every proposal and keeps the refined, de-duplicated
detections. The network here is untrained, so the point is the plumbing:
proposal counts, what a detection carries, and how the evaluator scores it.
Overlay frames with the detections drawn in are written to a temp folder.
"""
import tempfile
from pathlib import Path

from dap3d import data, evaluation, model, parsing
from dap3d.appearance import load_clip
from dap3d.cli import write_overlay

root = Path(tempfile.mkdtemp())
(vid,) = data.generate_videos(root, 1, seed=3)
frames = load_clip(root / f"{vid}.aptn")
truth = parsing.read_detections(root / f"{vid}.gt")
print("video", frames.shape, "with", len(truth), "actions:")
for g in truth:
    print("  %-14s centre (%.0f, %.0f, %.0f) size %s" % (data.PARSING_PROGRAMS[g.category_id], *g.center,
                                                           tuple(int(e) for e in g.extent)))

dims = frames.shape[:3]
scales = parsing.default_scales(dims)
for stride in (1.0, 0.5):
    n = len(parsing.sliding_window_proposals(dims, scales, (stride, stride, stride)))
    print("stride %.1f of the window -> %d proposals" % (stride, n))

net = model.build(model.toy_profile(len(data.PARSING_PROGRAMS), include_background=True), seed=0)
props = parsing.sliding_window_proposals(dims, scales, video_id=vid)
dets = parsing.parse_video(net, frames, props, video_id=vid, iterations=50)
print(len(dets), "detections after NMS")
if dets:
    d = dets[0]
    print("top detection: class %d score %.2f, %d H1 and %d H2 probabilities" % (d.category_id, d.score,
                                                                                 len(d.h1), len(d.h2)))

report = evaluation.evaluate(dets, truth, categories=range(len(data.PARSING_PROGRAMS)))
print(evaluation.report_table(report))

# the ground truth scored against itself
print("self MAP:", evaluation.evaluate(truth, truth).map)

write_overlay(frames, dets[:5], root / "overlay")
print("overlay frames in", root / "overlay")
