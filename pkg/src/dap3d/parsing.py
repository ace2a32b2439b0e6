"""Multi-action parsing of a long video: proposals -> network -> refined,
de-duplicated detections.

Cuboids are ``(cx, cy, ct, w, h, l)``; pixel ``i`` covers ``[i, i+1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .appearance import compose
from .data import extract_subvolume, fit_input
from .model import DAP3DNet

DEFAULT_NMS = 0.3


class ParseError(ValueError):
    pass


@dataclass
class Proposal:
    video_id: str
    volume: tuple

    def __post_init__(self):
        self.volume = tuple(float(v) for v in self.volume)
        if len(self.volume) != 6 or min(self.volume[3:]) < 1:
            raise ValueError(f"proposal extents must be >= 1: {self.volume}")


@dataclass(eq=False)
class Detection:
    video_id: str
    center: tuple
    extent: tuple
    category_id: int
    score: float
    h1: np.ndarray = field(default_factory=lambda: np.zeros(19))
    h2: np.ndarray = field(default_factory=lambda: np.zeros(14))

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.extent = tuple(float(v) for v in self.extent)
        self.h1 = np.asarray(self.h1, dtype=np.float64).reshape(-1)
        self.h2 = np.asarray(self.h2, dtype=np.float64).reshape(-1)
        if self.h1.size != 19 or self.h2.size != 14:
            raise ValueError("detections carry 19 H1 and 14 H2 probabilities")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    @property
    def volume(self) -> tuple:
        return self.center + self.extent


# -- proposals -----------------------------------------------------------------------

def _axis_starts(extent: float, size: float, stride: float) -> list[float]:
    if size >= extent:
        return [0.0]
    n = int(math.floor((extent - size) / stride + 1e-9)) + 1
    starts = [i * stride for i in range(n)]
    if starts[-1] + size < extent - 1e-9:
        starts.append(extent - size)      # cover the far edge
    return starts


def sliding_window_proposals(video_dims, scales, stride_fractions=(0.5, 0.5, 0.5), video_id: str = ""):
    """Regular grid of cuboids for ``video_dims = (T, H, W)``.

    ``scales`` holds ``(w, h, l)`` window sizes; strides are fractions of the
    window size per axis ``(x, y, t)``.
    """
    if not scales:
        raise ValueError("need at least one proposal scale")
    T, H, W = video_dims
    fx, fy, ft = stride_fractions
    if min(fx, fy, ft) <= 0:
        raise ValueError("stride fractions must be positive")
    out = []
    for w, h, l in scales:
        if w > W or h > H or l > T or min(w, h, l) < 1:
            raise ValueError(f"scale {(w, h, l)} does not fit video {(W, H, T)}")
        for t0 in _axis_starts(T, l, ft * l):
            for y0 in _axis_starts(H, h, fy * h):
                for x0 in _axis_starts(W, w, fx * w):
                    out.append(Proposal(video_id, (x0 + w / 2, y0 + h / 2, t0 + l / 2, w, h, l)))
    return out


def default_scales(video_dims) -> list[tuple]:
    """Window sizes for composite test videos: two spatial sizes times
    three temporal lengths."""
    T, H, W = video_dims
    sizes = [min(32, H, W), min(40, H, W)]
    lengths = sorted({max(2, T // 3), max(2, (2 * T) // 3), T})
    return [(s, s, l) for s in sizes for l in lengths]


def _fmt(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def write_proposals(path, proposals) -> None:
    lines = ["\t".join([p.video_id, *(_fmt(v) for v in p.volume)]) for p in proposals]
    Path(path).write_text("".join(line + "\n" for line in lines))


def load_proposals(path, video_dims: dict | None = None):
    """Read ``video_id x y t w h l`` lines. With ``video_dims`` (id -> (T,H,W))
    volumes are clipped to the video; returns ``(proposals, clipped_count)``."""
    out, clipped = [], 0
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 7:
            raise ParseError(f"{path}:{no}: expected 7 tab-separated fields, got {len(f)}")
        try:
            vol = [float(v) for v in f[1:]]
            p = Proposal(f[0], vol)
        except ValueError as e:
            raise ParseError(f"{path}:{no}: {e}") from None
        if video_dims and f[0] in video_dims:
            new = clip_to_video(p.volume, video_dims[f[0]])
            if new is None:
                raise ParseError(f"{path}:{no}: proposal lies outside video {f[0]}")
            if new != p.volume:
                clipped += 1
                p = Proposal(f[0], new)
        out.append(p)
    return out, clipped


def clip_to_video(volume, dims):
    T, H, W = dims
    lo, hi = [], []
    for c, e, n in zip(volume[:3], volume[3:], (W, H, T)):
        a, b = max(0.0, c - e / 2), min(float(n), c + e / 2)
        if b - a < 1:
            return None
        lo.append(a)
        hi.append(b)
    return tuple((a + b) / 2 for a, b in zip(lo, hi)) + tuple(b - a for a, b in zip(lo, hi))


# -- geometry -------------------------------------------------------------------------

def refine_location(proposal: Proposal, loc, mode: str = "normalized") -> tuple:
    """Proposal centre shifted by the predicted offset; time is unchanged."""
    x, y, t, w, h, _ = proposal.volume
    dx, dy = float(loc[0]), float(loc[1])
    if mode == "normalized":
        return (x + dx * w, y + dy * h, t)
    if mode == "raw":
        return (x + dx, y + dy, t)
    raise ValueError(f"unknown loc mode {mode!r}")


def intersection_volume(a, b) -> float:
    inter = 1.0
    for k in range(3):
        lo = max(a[k] - a[k + 3] / 2, b[k] - b[k + 3] / 2)
        hi = min(a[k] + a[k + 3] / 2, b[k] + b[k + 3] / 2)
        if hi <= lo:
            return 0.0
        inter *= hi - lo
    return inter


def cuboid_volume(a) -> float:
    return float(a[3] * a[4] * a[5])


def iou_3d(a, b) -> float:
    inter = intersection_volume(a, b)
    union = cuboid_volume(a) + cuboid_volume(b) - inter
    # rounding can push a box against itself a hair past 1
    return min(1.0, inter / union) if union > 0 else 0.0


def nms(detections, iou_threshold: float = DEFAULT_NMS, per_category: bool = True):
    """Greedy suppression in descending score order (ties keep input order)."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept = []
    for i in order:
        d = detections[i]
        if all(iou_3d(d.volume, k.volume) <= iou_threshold
               for k in kept if not per_category or k.category_id == d.category_id):
            kept.append(d)
    return kept


# -- pipeline -----------------------------------------------------------------------

@dataclass
class ParseConfig:
    nms_threshold: float = DEFAULT_NMS
    per_category_nms: bool = True
    batch_size: int = 64
    min_score: float = 0.0


def proposal_inputs(volume: np.ndarray, proposals, input_shape) -> np.ndarray:
    """Warp every proposal's subvolume of a composed video to the input size."""
    xs = np.empty((len(proposals), *input_shape), dtype=np.float32)
    for i, p in enumerate(proposals):
        xs[i] = fit_input(extract_subvolume(volume, p.volume), input_shape)
    return xs


def parse_video(model: DAP3DNet, video: np.ndarray, proposals, config: ParseConfig | None = None,
                video_id: str | None = None, volume: np.ndarray | None = None, **flow_kw):
    """Detections for one raw video ``(T,H,W,C)``.

    The appearance-motion volume of the whole video is composed once and
    each proposal is cut from it (zero-padded at the borders).
    """
    config = config or ParseConfig()
    if not proposals:
        return []
    cfg = model.config
    if cfg.background_class is None:
        raise ValueError("parsing needs a model with a background class")
    if volume is None:
        volume = compose(video, **flow_kw)
    xs = proposal_inputs(volume, proposals, cfg.input_shape)
    out = model.predict(xs, batch_size=config.batch_size)
    probs = out.class_probs
    h1, h2 = out.h1_probs, out.h2_probs
    bg = cfg.background_class
    dets = []
    for i, p in enumerate(proposals):
        cat = int(np.argmax(probs[i]))
        if cat == bg:
            continue
        fg = np.delete(probs[i], bg)
        score = float(np.clip(fg.max(), 0.0, 1.0))
        if score < config.min_score:
            continue
        center = refine_location(p, out.loc[i], cfg.loc_mode)
        dets.append(Detection(video_id or p.video_id, center, p.volume[3:], cat, score, h1[i], h2[i]))
    return nms(dets, config.nms_threshold, config.per_category_nms)


# -- detection files --------------------------------------------------------------

def detection_line(d: Detection) -> str:
    fields = [d.video_id, *(_fmt(v) for v in d.center + d.extent), str(d.category_id), repr(float(d.score)),
              *(repr(float(v)) for v in d.h1), *(repr(float(v)) for v in d.h2)]
    return "\t".join(fields)


def write_detections(path, detections) -> None:
    Path(path).write_text("".join(detection_line(d) + "\n" for d in detections))


def read_detections(path) -> list[Detection]:
    out = []
    for no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 9 + 19 + 14:
            raise ParseError(f"{path}:{no}: expected {9 + 33} tab-separated fields, got {len(f)}")
        try:
            v = [float(x) for x in f[1:7]]
            out.append(Detection(f[0], v[:3], v[3:], int(f[7]), float(f[8]),
                                 [float(x) for x in f[9:28]], [float(x) for x in f[28:42]]))
        except ValueError as e:
            raise ParseError(f"{path}:{no}: {e}") from None
    return out
