"""Datasets on disk: five-crop/temporal augmentation, manifests, composite
multi-action videos and the builders that turn them into training arrays.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import synth
from .appearance import (appearance_only, compose, load_clip, rgb_volume, resize_volume, save_clip, temporal_rescale,
                         warp_clip)
from .model import ArrayDataset
from .synth import ActionAnnotation, ActionSpec, Placement
from .tensor import DTYPE, rng

MANIFEST_VERSION = 1
T_RANGE = (10.0, 50.0)      # crop margin range on a 256-pixel-wide canvas
T_RANGE_REF_WIDTH = 256.0
P_RANGE = (0.5, 1.5)


class DataError(ValueError):
    pass


# -- five-crop augmentation ----------------------------------------------------------

@dataclass
class Crop:
    frames: np.ndarray
    offset: tuple          # crop centre minus clip centre, pixels
    loc_target: tuple      # action centre relative to crop centre
    origin: tuple          # (x0, y0) of the crop window


def crop_windows(width: int, height: int, t: int):
    """``(x0, y0, offset)`` for s1..s5: top-left, top-right, bottom-left,
    bottom-right, centre."""
    t = int(t)
    if not 0 <= t or not 2 * t < min(width, height):
        raise ValueError(f"t={t} must satisfy 0 <= t < min(w, h)/2 for a {width}x{height} clip")
    return [(0, 0, (-t, -t)), (2 * t, 0, (t, -t)), (0, 2 * t, (-t, t)), (2 * t, 2 * t, (t, t)), (t, t, (0, 0))]


def loc_from_offset(offset, crop_w: int, crop_h: int, normalized: bool = True) -> tuple:
    dx, dy = -float(offset[0]), -float(offset[1])
    if normalized:
        return (dx / crop_w, dy / crop_h)
    return (dx, dy)


def crop5(frames: np.ndarray, t: int, normalized: bool = True) -> list[Crop]:
    """Five ``(W-2t) x (H-2t)`` crops of a ``(T,H,W,C)`` clip, no resampling."""
    frames = np.asarray(frames)
    _, H, W = frames.shape[:3]
    cw, ch = W - 2 * int(t), H - 2 * int(t)
    out = []
    for x0, y0, off in crop_windows(W, H, t):
        out.append(Crop(frames[:, y0:y0 + ch, x0:x0 + cw].copy(), off,
                        loc_from_offset(off, cw, ch, normalized), (x0, y0)))
    return out


def t_range(width: int) -> tuple[float, float]:
    s = width / T_RANGE_REF_WIDTH
    return T_RANGE[0] * s, T_RANGE[1] * s


def sample_augmentation(seed: int, width: int, height: int):
    """Crop margin ``t`` and five temporal factors ``p``."""
    g = rng(seed, 31)
    lo, hi = t_range(width)
    t = int(round(g.uniform(lo, hi)))
    t = max(0, min(t, (min(width, height) - 1) // 2))
    ps = g.uniform(*P_RANGE, size=5)
    return t, [float(p) for p in ps]


def _shift_annotation(ann: ActionAnnotation, crop: Crop, T_old: int, T_new: int) -> ActionAnnotation:
    cx, cy, ct, w, h, l = ann.volume
    s = T_new / T_old
    return ActionAnnotation((cx - crop.origin[0], cy - crop.origin[1], ct * s, w, h, l * s),
                            ann.category_id, ann.h1, ann.h2, crop.loc_target)


def augment(frames: np.ndarray, annotation: ActionAnnotation, seed: int):
    """Five cropped, temporally rescaled subclips with updated annotations."""
    frames = np.asarray(frames)
    T, H, W = frames.shape[:3]
    t, ps = sample_augmentation(seed, W, H)
    out = []
    for crop, p in zip(crop5(frames, t), ps):
        clip = temporal_rescale(crop.frames, p)
        out.append((clip, _shift_annotation(annotation, crop, T, clip.shape[0])))
    return out


def augment_volume(am: np.ndarray, seed: int, flow: bool = True):
    """Same sampling as :func:`augment`, applied to a composed ``(C,T,H,W)``
    volume. Temporal resampling scales flow channels by the frame-rate change.

    Returns ``[(volume, loc_target), ...]`` for the five crops.
    """
    _, T, H, W = am.shape
    t, ps = sample_augmentation(seed, W, H)
    cw, ch = W - 2 * t, H - 2 * t
    out = []
    for (x0, y0, off), p in zip(crop_windows(W, H, t), ps):
        n = int(round(p * T))
        if n < 2:
            raise ValueError(f"rescaled clip would have {n} frames")
        v = resize_volume(am[:, :, y0:y0 + ch, x0:x0 + cw], (n,), axes=(1,))
        if flow:
            v[1:] *= T / n
        out.append((v.astype(DTYPE), loc_from_offset(off, cw, ch)))
    return out


# -- manifests -----------------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list            # (relative clip path, ActionAnnotation)
    split: str = "all"
    seed: int = 0
    version: int = MANIFEST_VERSION
    root: Path = field(default=Path("."))

    def paths(self) -> list[Path]:
        return [self.root / p for p, _ in self.entries]

    def __len__(self):
        return len(self.entries)


def _bits(b) -> str:
    return "".join(str(int(v)) for v in b)


def _fmt(v: float) -> str:
    return repr(float(v))


def manifest_text(m: DatasetManifest) -> str:
    lines = [f"# dap3d-manifest version={m.version} seed={m.seed} split={m.split}"]
    for path, a in m.entries:
        fields = [str(path), str(a.category_id), _bits(a.h1), _bits(a.h2),
                  *(_fmt(v) for v in a.loc_target), *(_fmt(v) for v in a.volume)]
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def write_manifest(path, m: DatasetManifest) -> None:
    Path(path).write_text(manifest_text(m))


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith("# dap3d-manifest"):
        raise DataError(f"{path}: missing manifest header")
    head = dict(kv.split("=", 1) for kv in lines[0].split()[2:])
    entries = []
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        f = line.split("\t")
        if len(f) != 12:
            raise DataError(f"{path}:{no}: expected 12 tab-separated fields, got {len(f)}")
        try:
            ann = ActionAnnotation(tuple(float(v) for v in f[6:12]), int(f[1]),
                                   [int(c) for c in f[2]], [int(c) for c in f[3]],
                                   (float(f[4]), float(f[5])))
        except ValueError as e:
            raise DataError(f"{path}:{no}: {e}") from None
        entries.append((f[0], ann))
    return DatasetManifest(entries, head.get("split", "all"), int(head.get("seed", 0)),
                           int(head.get("version", MANIFEST_VERSION)), path.parent)


def generate_dataset(root, num_categories: int = 10, clips_per_category: int = 40,
                     canvas=synth.ALIGNED_CANVAS, seed: int = 0) -> DatasetManifest:
    """Render aligned clips to ``root/clips`` and write ``root/all.tsv`` plus
    ``root/specs.jsonl`` (the generating spec of every clip)."""
    if num_categories < 1 or clips_per_category < 1:
        raise ValueError("need at least one category and one clip per category")
    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    entries, specs = [], []
    for c in range(num_categories):
        length = synth.category_length(c, seed)
        for k in range(clips_per_category):
            spec = synth.sample_spec(c, seed, k, length)
            frames, ann = synth.synth_action_clip(spec, canvas, length, seed=seed * 100003 + c * 1009 + k)
            rel = f"clips/c{c:03d}_{k:04d}.aptn"
            save_clip(root / rel, frames)
            entries.append((rel, ann))
            specs.append({"path": rel, "length": length, **spec.to_dict()})
    m = DatasetManifest(entries, "all", seed, root=root)
    write_manifest(root / "all.tsv", m)
    (root / "specs.jsonl").write_text("".join(json.dumps(s, sort_keys=True) + "\n" for s in specs))
    return m


def read_specs(root) -> dict[str, ActionSpec]:
    out = {}
    for line in (Path(root) / "specs.jsonl").read_text().splitlines():
        d = json.loads(line)
        path = d.pop("path")
        d.pop("length", None)
        out[path] = ActionSpec(**d)
    return out


def build_manifest(root, split_ratio=(9, 1), seed: int = 0):
    """Deterministic per-category shuffled split of ``root/all.tsv``.

    Writes ``train.tsv`` and ``test.tsv`` next to it.
    """
    root = Path(root)
    if not (root / "all.tsv").exists():
        raise DataError(f"{root}: no generated clips (all.tsv missing)")
    full = read_manifest(root / "all.tsv")
    if not full.entries:
        raise DataError(f"{root}: manifest has no entries")
    a, b = split_ratio
    if a < 0 or b < 0 or a + b <= 0:
        raise ValueError(f"invalid split ratio {split_ratio}")
    by_cat: dict[int, list] = {}
    for e in full.entries:
        by_cat.setdefault(e[1].category_id, []).append(e)
    train, test = [], []
    for c in sorted(by_cat):
        items = by_cat[c]
        order = rng(seed, 41, c).permutation(len(items))
        n_train = int(math.floor(len(items) * a / (a + b) + 0.5))
        train += [items[i] for i in order[:n_train]]
        test += [items[i] for i in order[n_train:]]
    mt = DatasetManifest(train, "train", seed, root=root)
    ms = DatasetManifest(test, "test", seed, root=root)
    write_manifest(root / "train.tsv", mt)
    write_manifest(root / "test.tsv", ms)
    return mt, ms


# -- network inputs ------------------------------------------------------------------

def clip_volume(frames: np.ndarray, mode: str = "am", **flow_kw) -> np.ndarray:
    """Raw clip -> ``(3,T,H,W)`` network volume for an input mode."""
    if mode == "am":
        return compose(frames, **flow_kw)
    if mode == "gray":
        return appearance_only(frames)
    if mode == "rgb":
        return rgb_volume(frames)
    raise ValueError(f"unknown input mode {mode!r}")


def fit_input(volume: np.ndarray, input_shape, mode: str = "am") -> np.ndarray:
    """Warp a ``(3,T,H,W)`` volume to ``input_shape = (3, T', H', W')``."""
    return warp_clip(volume, tuple(input_shape[1:]), rescale_flow=(mode == "am"))


def _stack(samples, labels, h1, h2, loc) -> ArrayDataset:
    return ArrayDataset(np.stack(samples).astype(DTYPE), np.asarray(labels, dtype=np.int64),
                        np.stack(h1).astype(DTYPE), np.stack(h2).astype(DTYPE),
                        np.asarray(loc, dtype=DTYPE).reshape(-1, 2))


def build_arrays(manifest: DatasetManifest, input_shape, mode: str = "am", augment_clips: bool = True,
                 seed: int = 0, volumes: dict | None = None, **flow_kw) -> ArrayDataset:
    """Network-ready arrays from a manifest.

    Each clip is composed once at full size; with ``augment_clips`` the five
    crops and temporal factors are then applied to the composed volume
    (:func:`augment_volume`). ``volumes`` may carry precomposed volumes
    keyed by manifest path.
    """
    xs, labels, h1, h2, loc = [], [], [], [], []
    for i, (rel, ann) in enumerate(manifest.entries):
        vol = None if volumes is None else volumes.get(rel)
        if vol is None:
            vol = clip_volume(load_clip(manifest.root / rel), mode, **flow_kw)
            if volumes is not None:
                volumes[rel] = vol
        if augment_clips:
            items = augment_volume(vol, seed * 1000003 + i, flow=(mode == "am"))
        else:
            items = [(vol, ann.loc_target)]
        for v, lt in items:
            xs.append(fit_input(v, input_shape, mode))
            labels.append(ann.category_id)
            h1.append(ann.h1)
            h2.append(ann.h2)
            loc.append(lt)
    return _stack(xs, labels, h1, h2, loc)


# -- composite multi-action videos --------------------------------------------------

VIDEO_CANVAS = (64, 128)
VIDEO_LENGTH = 48
PARSING_PROGRAMS = ("walk", "wave", "kick", "spin", "jumping_jacks")
_SLOTS_X = (24.0, 64.0, 104.0)


def parsing_spec(category_id: int, seed: int, index: int, programs=PARSING_PROGRAMS) -> ActionSpec:
    """Spec for a composite-video action; ``category_id`` indexes ``programs``."""
    program = programs[category_id]
    base = synth.sample_spec(synth.PROGRAMS.index(program), seed, index)
    return ActionSpec(category_id, program, base.speed, base.direction, base.limb_phase,
                      base.cyclic, base.character_variant)


def sample_video_layout(seed: int, video_index: int, programs=PARSING_PROGRAMS,
                        canvas=VIDEO_CANVAS, length: int = VIDEO_LENGTH):
    """2-3 actions in distinct horizontal slots with random start frames."""
    g = rng(seed, 51, video_index)
    H, W = canvas
    sx = W / 128.0
    k = int(g.integers(2, 4))
    slots = sorted(g.choice(len(_SLOTS_X), size=k, replace=False))
    out = []
    for j, s in enumerate(slots):
        c = int(g.integers(len(programs)))
        prog_cat = synth.PROGRAMS.index(programs[c])
        L = min(synth.category_length(prog_cat, seed), length)
        spec = parsing_spec(c, seed, video_index * 8 + j, programs)
        if spec.motion_program in synth.TRANSLATING:
            spec = ActionSpec(c, spec.motion_program, round(min(spec.speed, 20.0 / L), 4), spec.direction,
                              spec.limb_phase, spec.cyclic, spec.character_variant)
        t0 = int(g.integers(0, length - L + 1))
        x = _SLOTS_X[s] * sx + float(g.uniform(-3, 3))
        y = H / 2.0 + float(g.uniform(-3, 3))
        out.append((spec, Placement(x, y, t0, L)))
    return out


def generate_videos(root, num_videos: int, seed: int = 0, programs=PARSING_PROGRAMS,
                    canvas=VIDEO_CANVAS, length: int = VIDEO_LENGTH, prefix: str = "v") -> list[str]:
    """Render composite videos to ``root/<id>.aptn`` with ground truth in
    ``root/<id>.gt`` (detection-file lines, score 1)."""
    from .parsing import Detection, write_detections
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(num_videos):
        vid = f"{prefix}{i:04d}"
        layout = sample_video_layout(seed, i, programs, canvas, length)
        kind = synth.BACKGROUNDS[i % len(synth.BACKGROUNDS)]
        frames, anns = synth.compose_multiaction_video(layout, canvas, length, kind, seed=seed * 7919 + i)
        save_clip(root / f"{vid}.aptn", frames)
        dets = [Detection(vid, a.volume[:3], a.volume[3:], a.category_id, 1.0,
                          a.h1.astype(float), a.h2.astype(float)) for a in anns]
        write_detections(root / f"{vid}.gt", dets)
        ids.append(vid)
    return ids


def extract_subvolume(vol: np.ndarray, box) -> np.ndarray:
    """Integer window of a ``(C,T,H,W)`` volume around cuboid ``box``
    ``(cx, cy, ct, w, h, l)``, clamped to bounds and zero-padded."""
    C, T, H, W = vol.shape
    cx, cy, ct, w, h, l = box
    w, h, l = (max(1, int(round(v))) for v in (w, h, l))
    x0 = int(math.floor(cx - w / 2.0 + 0.5))
    y0 = int(math.floor(cy - h / 2.0 + 0.5))
    t0 = int(math.floor(ct - l / 2.0 + 0.5))
    out = np.zeros((C, l, h, w), dtype=vol.dtype)
    sx, sy, st = max(x0, 0), max(y0, 0), max(t0, 0)
    ex, ey, et = min(x0 + w, W), min(y0 + h, H), min(t0 + l, T)
    if ex > sx and ey > sy and et > st:
        out[:, st - t0:et - t0, sy - y0:ey - y0, sx - x0:ex - x0] = vol[:, st:et, sy:ey, sx:ex]
    return out


def _overlap_fraction(a, b) -> float:
    """Intersection volume of ``a`` and ``b`` over the volume of ``a``."""
    inter = 1.0
    for k in range(3):
        lo = max(a[k] - a[k + 3] / 2, b[k] - b[k + 3] / 2)
        hi = min(a[k] + a[k + 3] / 2, b[k] + b[k + 3] / 2)
        inter *= max(0.0, hi - lo)
    return inter / (a[3] * a[4] * a[5])


def build_parsing_arrays(video_dir, video_ids, input_shape, window: int = 40, backgrounds_per_video: int = 6,
                         augment_clips: bool = True, seed: int = 0, volumes: dict | None = None,
                         background_overlap: float = 0.1, num_categories: int = len(PARSING_PROGRAMS),
                         **flow_kw) -> ArrayDataset:
    """Fine-tuning arrays from composite videos.

    Each annotated action yields an aligned ``window x window`` clip centred
    on its ground-truth centre and spanning its frames; background clips are
    random windows overlapping every action by at most ``background_overlap``
    of their volume. Background samples take class ``num_categories`` (the
    last one), zero attributes and a zero loc target.
    """
    from .parsing import read_detections
    video_dir = Path(video_dir)
    xs, labels, h1, h2, loc = [], [], [], [], []
    for vi, vid in enumerate(video_ids):
        vol = None if volumes is None else volumes.get(vid)
        if vol is None:
            vol = compose(load_clip(video_dir / f"{vid}.aptn"), **flow_kw)
            if volumes is not None:
                volumes[vid] = vol
        gts = read_detections(video_dir / f"{vid}.gt")
        _, T, H, W = vol.shape
        samples = []
        for j, d in enumerate(gts):
            box = (d.center[0], d.center[1], d.center[2], window, window, d.extent[2])
            samples.append((box, d.category_id, d.h1 > 0.5, d.h2 > 0.5, (seed, vi, j)))
        g = rng(seed, 61, vi)
        made, tries = 0, 0
        while made < backgrounds_per_video and tries < 200:
            tries += 1
            l = int(g.choice(synth.LENGTH_CHOICES))
            l = min(l, T)
            box = (float(g.uniform(window / 2, W - window / 2)), float(g.uniform(window / 2, H - window / 2)),
                   float(g.uniform(l / 2, T - l / 2)), window, window, l)
            if all(_overlap_fraction(box, (*d.center, *d.extent)) <= background_overlap for d in gts):
                samples.append((box, -1, np.zeros(19), np.zeros(14), (seed, vi, 100 + made)))
                made += 1
        for box, cat, b1, b2, key in samples:
            sub = extract_subvolume(vol, box)
            if augment_clips:
                items = augment_volume(sub, int(np.random.SeedSequence(list(key)).generate_state(1)[0]))
            else:
                items = [(sub, (0.0, 0.0))]
            for v, lt in items:
                xs.append(fit_input(v, input_shape))
                labels.append(cat)
                h1.append(np.asarray(b1, dtype=float))
                h2.append(np.asarray(b2, dtype=float))
                loc.append(lt if cat >= 0 else (0.0, 0.0))
    labels = np.where(np.asarray(labels) < 0, num_categories, labels)
    return _stack(xs, labels, h1, h2, loc)
