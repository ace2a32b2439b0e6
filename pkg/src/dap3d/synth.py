"""Procedural aligned-action clips rendered from a 2D stick figure.

Each category runs one of ten motion programs. Attribute bits are computed
from the :class:`ActionSpec` by a fixed rule table (:func:`attributes`), so
labels never depend on the rendered pixels.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .layers import GeometryError
from .tensor import DTYPE, rng

H1_NAMES = (
    "arm_raised_above_shoulder", "arm_swing", "single_arm_motion", "both_arms_motion",
    "arm_extended_hold", "elbow_flexion", "leg_alternation", "single_leg_raise",
    "legs_spread", "knee_bend", "torso_lean", "torso_rotation",
    "horizontal_body_translation", "vertical_body_translation", "translation_leftward",
    "translation_rightward", "hands_converge", "feet_leave_ground", "arms_in_sync",
)
H2_NAMES = (
    "fast", "slow", "cyclic", "single_event", "ballistic_arc", "locomotion", "stationary",
    "upper_body_dominant", "lower_body_dominant", "whole_body", "rotational",
    "periodic_vertical", "communicative_gesture", "ground_contact_change",
)
assert len(H1_NAMES) == 19 and len(H2_NAMES) == 14

PROGRAMS = ("walk", "jump", "wave", "kick", "spin", "crouch_walk", "clap", "point", "squat", "jumping_jacks")
TRANSLATING = frozenset({"walk", "jump", "crouch_walk"})
CYCLIC = frozenset({"walk", "wave", "spin", "crouch_walk", "clap", "squat", "jumping_jacks"})

# program -> (H1 names, H2 names) that are always set
_RULES = {
    "walk": ({"arm_swing", "both_arms_motion", "leg_alternation", "horizontal_body_translation"},
             {"locomotion", "lower_body_dominant"}),
    "jump": ({"arm_raised_above_shoulder", "both_arms_motion", "knee_bend", "horizontal_body_translation",
              "vertical_body_translation", "feet_leave_ground", "arms_in_sync"},
             {"ballistic_arc", "locomotion", "whole_body", "ground_contact_change"}),
    "wave": ({"arm_raised_above_shoulder", "arm_swing", "single_arm_motion", "elbow_flexion"},
             {"stationary", "upper_body_dominant", "communicative_gesture"}),
    "kick": ({"single_leg_raise", "knee_bend", "torso_lean"},
             {"stationary", "lower_body_dominant"}),
    "spin": ({"torso_rotation", "arm_extended_hold", "both_arms_motion"},
             {"stationary", "whole_body", "rotational"}),
    "crouch_walk": ({"leg_alternation", "knee_bend", "torso_lean", "horizontal_body_translation"},
                    {"locomotion", "lower_body_dominant"}),
    "clap": ({"arm_swing", "both_arms_motion", "elbow_flexion", "hands_converge", "arms_in_sync"},
             {"stationary", "upper_body_dominant", "communicative_gesture"}),
    "point": ({"single_arm_motion", "arm_extended_hold"},
              {"stationary", "upper_body_dominant", "communicative_gesture"}),
    "squat": ({"knee_bend", "vertical_body_translation", "both_arms_motion", "arms_in_sync"},
              {"stationary", "lower_body_dominant", "periodic_vertical"}),
    "jumping_jacks": ({"arm_raised_above_shoulder", "arm_swing", "both_arms_motion", "legs_spread",
                       "vertical_body_translation", "feet_leave_ground"},
                      {"stationary", "whole_body", "periodic_vertical", "ground_contact_change"}),
}

FAST_SPEED = 0.4
SPEED_RANGES = {"slow": (0.2, 0.3), "fast": (0.5, 0.6)}
LENGTH_CHOICES = (16, 24, 32, 48)
BACKGROUNDS = ("flat", "noise", "distractors")
ALIGNED_CANVAS = (48, 48)

# (rgb, scale) per character variant; bright bodies on darker backgrounds
_PALETTE = ((0.95, 0.85, 0.70), (0.90, 0.90, 0.95), (0.95, 0.75, 0.55), (0.80, 0.95, 0.80),
            (0.98, 0.95, 0.60), (0.85, 0.85, 0.85), (0.95, 0.70, 0.80), (0.70, 0.90, 0.98),
            (1.00, 1.00, 1.00), (0.90, 0.80, 0.95))
_SCALES = (0.9, 1.0, 1.1)
NUM_VARIANTS = len(_PALETTE)


@dataclass(frozen=True)
class ActionSpec:
    category_id: int
    motion_program: str
    speed: float
    direction: float
    limb_phase: float = 0.0
    cyclic: bool = True
    character_variant: int = 0

    def __post_init__(self):
        if self.motion_program not in PROGRAMS:
            raise ValueError(f"unknown motion program {self.motion_program!r}")
        if not self.speed > 0:
            raise ValueError("speed must be positive")

    @property
    def facing(self) -> int:
        return 1 if math.cos(self.direction) >= 0 else -1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActionAnnotation:
    volume: tuple          # (center_x, center_y, center_t, width, height, length)
    category_id: int
    h1: np.ndarray         # 19 bits
    h2: np.ndarray         # 14 bits
    loc_target: tuple = (0.0, 0.0)

    def __post_init__(self):
        self.volume = tuple(float(v) for v in self.volume)
        self.h1 = np.asarray(self.h1, dtype=np.int8).reshape(-1)
        self.h2 = np.asarray(self.h2, dtype=np.int8).reshape(-1)
        if self.h1.size != 19 or self.h2.size != 14:
            raise ValueError("annotations carry exactly 19 H1 and 14 H2 bits")
        self.loc_target = tuple(float(v) for v in self.loc_target)


def attributes(spec: ActionSpec) -> tuple[np.ndarray, np.ndarray]:
    """The 19 H1 and 14 H2 bits implied by a spec."""
    h1_on, h2_on = (set(s) for s in _RULES[spec.motion_program])
    if spec.motion_program in TRANSLATING:
        h1_on.add("translation_rightward" if spec.facing > 0 else "translation_leftward")
    h2_on.add("fast" if spec.speed >= FAST_SPEED else "slow")
    h2_on.add("cyclic" if spec.cyclic else "single_event")
    h1 = np.array([n in h1_on for n in H1_NAMES], dtype=np.int8)
    h2 = np.array([n in h2_on for n in H2_NAMES], dtype=np.int8)
    return h1, h2


def category_program(category_id: int) -> str:
    return PROGRAMS[category_id % len(PROGRAMS)]


def category_length(category_id: int, seed: int) -> int:
    """Clip length for a category, drawn once per (category, dataset seed)."""
    return int(rng(seed, 11, category_id).choice(LENGTH_CHOICES))


def sample_spec(category_id: int, seed: int, index: int, length: int | None = None) -> ActionSpec:
    g = rng(seed, 12, category_id, index)
    program = category_program(category_id)
    tier = "fast" if g.random() < 0.5 else "slow"
    speed = float(g.uniform(*SPEED_RANGES[tier]))
    if length is not None and program in TRANSLATING:
        # keep the whole trajectory on an aligned canvas
        speed = min(speed, 26.0 / length)
    direction = 0.0 if g.random() < 0.5 else math.pi
    return ActionSpec(category_id=category_id, motion_program=program, speed=round(speed, 4),
                      direction=direction, limb_phase=round(float(g.uniform(0, 2 * math.pi)), 4),
                      cyclic=program in CYCLIC, character_variant=int(g.integers(NUM_VARIANTS)))


# -- kinematics --------------------------------------------------------------------

_D = math.pi / 180.0
TORSO, HEAD_R, UPPER_ARM, FOREARM, THIGH, SHIN = 9.0, 3.0, 5.0, 5.0, 6.0, 6.0


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _pose_params(spec: ActionSpec, T: int) -> dict:
    """Per-frame pose parameters (arrays of length T), angles in radians."""
    t = np.arange(T, dtype=np.float64)
    u = t / max(T - 1, 1)
    mid = (T - 1) / 2.0
    phi = 2 * math.pi * (spec.speed / 6.0) * t + spec.limb_phase
    s, c = np.sin(phi), np.cos(phi)
    z = np.zeros(T)
    p = dict(dx=z.copy(), dy=z.copy(), torso=z.copy(), xs=np.ones(T),
             a1=np.full(T, 5 * _D), e1=z.copy(), a2=np.full(T, -5 * _D), e2=z.copy(),
             l1=np.full(T, 4 * _D), k1=z.copy(), l2=np.full(T, -4 * _D), k2=z.copy())
    prog = spec.motion_program
    if prog == "walk":
        p["dx"] = spec.speed * (t - mid)
        p["dy"] = -0.6 * np.abs(s)
        p["l1"], p["l2"] = 25 * _D * s, -25 * _D * s
        p["k1"], p["k2"] = 25 * _D * np.maximum(0, -s), 25 * _D * np.maximum(0, s)
        p["a1"], p["a2"] = -22 * _D * s, 22 * _D * s
        p["e1"] = p["e2"] = np.full(T, 15 * _D)
    elif prog == "crouch_walk":
        p["dx"] = spec.speed * (t - mid)
        p["dy"] = np.full(T, 3.0)
        p["torso"] = np.full(T, 30 * _D)
        p["l1"], p["l2"] = (35 + 15 * s) * _D, (35 - 15 * s) * _D
        p["k1"], p["k2"] = (70 + 10 * s) * _D, (70 - 10 * s) * _D
        p["a1"], p["a2"] = (50 + 8 * s) * _D, (40 - 8 * s) * _D
        p["e1"] = p["e2"] = np.full(T, 35 * _D)
    elif prog == "jump":
        p["dx"] = 0.5 * spec.speed * (t - mid)
        p["dy"] = 3.0 - 6.0 * 4 * u * (1 - u)
        air = np.sin(math.pi * u)
        crouch = np.clip(1 - 6 * np.minimum(u, 1 - u), 0, 1)
        p["a1"], p["a2"] = 130 * _D * air, 120 * _D * air
        p["l1"] = p["l2"] = 30 * _D * air + 25 * _D * crouch
        p["k1"] = p["k2"] = 45 * _D * air + 50 * _D * crouch
    elif prog == "wave":
        p["a1"] = (150 + 25 * s) * _D
        p["e1"] = 25 * _D * c
    elif prog == "kick":
        w = float(np.clip(0.15 / spec.speed, 0.25, 0.8))
        b = np.sin(math.pi * np.clip((u - (0.5 - w / 2)) / w, 0, 1)) ** 2
        p["l1"] = 85 * _D * b
        p["k1"] = 40 * _D * b * (1 - b) * 4
        p["a1"], p["a2"] = np.full(T, 60 * _D), np.full(T, -45 * _D)
        p["torso"] = -15 * _D * b
    elif prog == "spin":
        p["xs"] = np.cos(phi)
        p["a1"], p["a2"] = np.full(T, 85 * _D), np.full(T, -85 * _D)
        p["l1"], p["l2"] = np.full(T, 8 * _D), np.full(T, -8 * _D)
    elif prog == "clap":
        p["a1"] = (75 + 25 * s) * _D
        p["a2"] = (70 + 25 * s) * _D
        p["e1"] = p["e2"] = (45 - 40 * s) * _D
    elif prog == "point":
        p["a1"] = 90 * _D * _smoothstep(u / 0.35)
    elif prog == "squat":
        d = (1 - c) / 2
        p["dy"] = 5.0 * d
        th = np.arccos(np.clip((THIGH + SHIN - 5.0 * d) / (THIGH + SHIN), -1, 1))
        p["l1"] = p["l2"] = th
        p["k1"] = p["k2"] = 2 * th
        p["a1"] = p["a2"] = 80 * _D * d
    elif prog == "jumping_jacks":
        th = (1 - c) / 2
        p["a1"], p["a2"] = 165 * _D * th, -165 * _D * th
        p["l1"], p["l2"] = 20 * _D * th, -20 * _D * th
        p["dy"] = -2.5 * np.abs(np.sin(math.pi * th))
    return p


def _segments(spec: ActionSpec, T: int, anchor, scale: float):
    """Line segments ``(start (T,2), end (T,2), radius)`` plus the head disc."""
    p = _pose_params(spec, T)
    f = spec.facing
    xs = p["xs"]
    hip = np.stack([anchor[0] + f * p["dx"] * 1.0, anchor[1] + p["dy"] * scale], axis=1)

    def off(length, ang):
        return np.stack([f * xs * np.sin(ang) * length * scale, np.cos(ang) * length * scale], axis=1)

    neck = hip + np.stack([f * xs * np.sin(p["torso"]), -np.cos(p["torso"])], axis=1) * TORSO * scale
    head = neck + np.stack([f * xs * np.sin(p["torso"]), -np.cos(p["torso"])], axis=1) * (HEAD_R + 1.0) * scale
    segs = [(hip, neck, 1.4 * scale)]
    for a, e in (("a1", "e1"), ("a2", "e2")):
        elbow = neck + off(UPPER_ARM, p[a])
        hand = elbow + off(FOREARM, p[a] + p[e])
        segs += [(neck, elbow, 0.9 * scale), (elbow, hand, 0.8 * scale)]
    for l, k in (("l1", "k1"), ("l2", "k2")):
        knee = hip + off(THIGH, p[l])
        foot = knee + off(SHIN, p[l] - p[k])
        segs += [(hip, knee, 1.0 * scale), (knee, foot, 0.9 * scale)]
    return segs, (head, HEAD_R * scale)


def render_alpha(spec: ActionSpec, T: int, canvas, anchor=None, scale: float | None = None) -> np.ndarray:
    """Anti-aliased coverage ``(T, H, W)`` of the figure on ``canvas = (H, W)``."""
    H, W = canvas
    if anchor is None:
        anchor = (W / 2.0, H / 2.0)
    if scale is None:
        scale = _SCALES[spec.character_variant % len(_SCALES)]
    segs, (head, hr) = _segments(spec, T, anchor, scale)
    ys = np.arange(H, dtype=np.float64)[None, :, None] + 0.5
    xs = np.arange(W, dtype=np.float64)[None, None, :] + 0.5
    alpha = np.zeros((T, H, W))
    for a, b, r in segs:
        ax, ay = a[:, 0, None, None], a[:, 1, None, None]
        bx, by = b[:, 0, None, None], b[:, 1, None, None]
        vx, vy = bx - ax, by - ay
        ll = np.maximum(vx * vx + vy * vy, 1e-12)
        tt = np.clip(((xs - ax) * vx + (ys - ay) * vy) / ll, 0.0, 1.0)
        d = np.hypot(xs - ax - tt * vx, ys - ay - tt * vy)
        np.maximum(alpha, np.clip(r + 0.5 - d, 0.0, 1.0), out=alpha)
    d = np.hypot(xs - head[:, 0, None, None], ys - head[:, 1, None, None])
    np.maximum(alpha, np.clip(hr + 0.5 - d, 0.0, 1.0), out=alpha)
    return alpha


def alpha_extent(alpha: np.ndarray, t0: int = 0):
    """Tight cuboid ``(cx, cy, ct, w, h, l)`` around ``alpha > 0``; None if empty."""
    mask = alpha > 0
    if not mask.any():
        return None
    ts = np.flatnonzero(mask.any(axis=(1, 2)))
    yy = np.flatnonzero(mask.any(axis=(0, 2)))
    xx = np.flatnonzero(mask.any(axis=(0, 1)))
    x0, x1 = xx[0], xx[-1] + 1
    y0, y1 = yy[0], yy[-1] + 1
    s0, s1 = ts[0] + t0, ts[-1] + 1 + t0
    return ((x0 + x1) / 2.0, (y0 + y1) / 2.0, (s0 + s1) / 2.0,
            float(x1 - x0), float(y1 - y0), float(s1 - s0))


def figure_fits(alpha: np.ndarray) -> bool:
    """False when coverage touches the canvas border (figure may be clipped)."""
    return not (alpha[:, 0, :].any() or alpha[:, -1, :].any() or alpha[:, :, 0].any() or alpha[:, :, -1].any())


# -- backgrounds -------------------------------------------------------------------

def background(kind: str, T: int, canvas, seed: int) -> np.ndarray:
    """Static ``(T, H, W, 3)`` background: flat, smoothed noise or distractor blocks."""
    H, W = canvas
    g = rng(seed, 21)
    base = g.uniform(0.15, 0.4, size=3)
    img = np.broadcast_to(base, (H, W, 3)).copy()
    if kind == "noise":
        coarse = g.uniform(-0.12, 0.12, size=(H // 4 + 2, W // 4 + 2, 1))
        from .appearance import resize_volume
        img += resize_volume(coarse, (H + 8, W + 8), axes=(0, 1))[4:H + 4, 4:W + 4]
    elif kind == "distractors":
        for _ in range(int(g.integers(2, 5))):
            h, w = g.integers(3, max(4, H // 4)), g.integers(3, max(4, W // 4))
            y, x = g.integers(0, H - h), g.integers(0, W - w)
            img[y:y + h, x:x + w] = g.uniform(0.05, 0.55, size=3)
    elif kind != "flat":
        raise ValueError(f"unknown background {kind!r}")
    img = np.clip(img, 0.0, 1.0)
    return np.broadcast_to(img, (T, H, W, 3)).copy()


def _paint(frames: np.ndarray, alpha: np.ndarray, variant: int) -> None:
    color = np.asarray(_PALETTE[variant % NUM_VARIANTS])
    a = alpha[..., None]
    frames *= 1.0 - a
    frames += a * color


# -- clips ---------------------------------------------------------------------------

def synth_action_clip(spec: ActionSpec, canvas=ALIGNED_CANVAS, length: int = 32, seed: int = 0,
                      background_kind: str | None = None):
    """Render one aligned action. Returns ``(frames (T,H,W,3), ActionAnnotation)``."""
    if length < 8:
        raise ValueError("clips need at least 8 frames")
    H, W = canvas
    alpha = render_alpha(spec, length, canvas)
    # re-anchor so the action volume (not the body root) sits at the canvas centre
    anchor = (W / 2.0, H / 2.0)
    for _ in range(2):
        cx, cy = alpha_extent(alpha)[:2]
        dx, dy = round(W / 2.0 - cx), round(H / 2.0 - cy)
        if dx == 0 and dy == 0:
            break
        anchor = (anchor[0] + dx, anchor[1] + dy)
        alpha = render_alpha(spec, length, canvas, anchor=anchor)
    if not figure_fits(alpha):
        raise GeometryError(f"figure for {spec.motion_program} leaves the {canvas} canvas")
    kind = background_kind or BACKGROUNDS[seed % len(BACKGROUNDS)]
    frames = background(kind, length, canvas, seed)
    _paint(frames, alpha, spec.character_variant)
    h1, h2 = attributes(spec)
    ann = ActionAnnotation(alpha_extent(alpha), spec.category_id, h1, h2, (0.0, 0.0))
    return frames.astype(DTYPE), ann


@dataclass
class Placement:
    x: float
    y: float
    t_start: int
    length: int


def compose_multiaction_video(actions, canvas, length: int, background_kind: str = "noise",
                              seed: int = 0):
    """Render several ``(ActionSpec, Placement)`` pairs into one video.

    Returns ``(frames, annotations)`` with tight ground-truth cuboids in
    video coordinates.
    """
    H, W = canvas
    frames = background(background_kind, length, canvas, seed)
    anns = []
    for spec, pl in actions:
        if pl.t_start < 0 or pl.t_start + pl.length > length or pl.length < 2:
            raise GeometryError(f"placement {pl} outside the video's {length} frames")
        alpha = render_alpha(spec, pl.length, canvas, anchor=(pl.x, pl.y))
        if not figure_fits(alpha):
            raise GeometryError(f"placement {pl} puts the figure outside the {canvas} canvas")
        _paint(frames[pl.t_start:pl.t_start + pl.length], alpha, spec.character_variant)
        h1, h2 = attributes(spec)
        anns.append(ActionAnnotation(alpha_extent(alpha, pl.t_start), spec.category_id, h1, h2))
    return frames.astype(DTYPE), anns
