"""Appearance-motion clips: grayscale intensity plus dense Horn-Schunck flow,
and the resampling used to fit clips to the network input size.

Raw clips are ``(T, H, W, C)`` arrays in [0, 1]; appearance-motion clips are
``(3, T, H, W)`` with channels (intensity, Vx, Vy), flow in pixels/frame.
"""
from __future__ import annotations

from pathlib import Path

import numba
import numpy as np

from .tensor import DTYPE, ShapeError, load_tensor, save_tensor

LUMA = np.array([0.299, 0.587, 0.114])

# alpha = 15 in 8-bit intensity units
DEFAULT_ALPHA = 15.0 / 255.0
DEFAULT_ITERATIONS = 200

_W_EDGE = 1.0 / 6.0
_W_DIAG = 1.0 / 12.0


class ClipFormatError(ValueError):
    pass


def to_grayscale(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim == 3:
        return frames.astype(DTYPE)
    if frames.ndim != 4 or frames.shape[-1] not in (1, 3):
        raise ClipFormatError(f"expected (T,H,W,1|3) frames, got {frames.shape}")
    if frames.shape[-1] == 1:
        return frames[..., 0].astype(DTYPE)
    return (frames.astype(np.float64) @ LUMA).astype(DTYPE)


# -- Horn-Schunck -----------------------------------------------------------------

def _neighbour_average(u: np.ndarray) -> np.ndarray:
    """Horn-Schunck 3x3 weighted average over the last two axes, replicate edges."""
    pad = [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(u, pad, mode="edge")
    edge = p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:]
    diag = p[..., :-2, :-2] + p[..., :-2, 2:] + p[..., 2:, :-2] + p[..., 2:, 2:]
    return _W_EDGE * edge + _W_DIAG * diag


def image_derivatives(frame_a: np.ndarray, frame_b: np.ndarray):
    """Central spatial differences of the frame mean (replicate edges) and the
    forward temporal difference."""
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    m = 0.5 * (a + b)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(m, pad, mode="edge")
    ix = 0.5 * (p[..., 1:-1, 2:] - p[..., 1:-1, :-2])
    iy = 0.5 * (p[..., 2:, 1:-1] - p[..., :-2, 1:-1])
    return ix, iy, b - a


@numba.njit(cache=True)
def _hs_iterate(ix, iy, it, denom, u, v, iterations):
    """In-place Jacobi sweeps over (B, H, W) arrays; same stencil as
    :func:`_neighbour_average`."""
    nb, h, w = u.shape
    un = np.empty_like(u)
    vn = np.empty_like(v)
    for _ in range(iterations):
        for k in range(nb):
            for y in range(h):
                y0 = max(y - 1, 0)
                y1 = min(y + 1, h - 1)
                for x in range(w):
                    x0 = max(x - 1, 0)
                    x1 = min(x + 1, w - 1)
                    ub = (u[k, y0, x] + u[k, y1, x] + u[k, y, x0] + u[k, y, x1]) * (1.0 / 6.0) + \
                         (u[k, y0, x0] + u[k, y0, x1] + u[k, y1, x0] + u[k, y1, x1]) * (1.0 / 12.0)
                    vb = (v[k, y0, x] + v[k, y1, x] + v[k, y, x0] + v[k, y, x1]) * (1.0 / 6.0) + \
                         (v[k, y0, x0] + v[k, y0, x1] + v[k, y1, x0] + v[k, y1, x1]) * (1.0 / 12.0)
                    r = (ix[k, y, x] * ub + iy[k, y, x] * vb + it[k, y, x]) / denom[k, y, x]
                    un[k, y, x] = ub - ix[k, y, x] * r
                    vn[k, y, x] = vb - iy[k, y, x] * r
        u[...] = un
        v[...] = vn


def horn_schunck_flow(frame_a: np.ndarray, frame_b: np.ndarray, alpha: float = DEFAULT_ALPHA,
                      iterations: int = DEFAULT_ITERATIONS, return_energy: bool = False):
    """Jacobi-iterated Horn-Schunck flow from ``frame_a`` to ``frame_b``.

    Frames may carry leading batch axes; all pairs are solved together.
    Returns ``(vx, vy)`` in pixels per frame, plus the energy after every
    iteration when ``return_energy`` is set.
    """
    frame_a = np.asarray(frame_a)
    frame_b = np.asarray(frame_b)
    if frame_a.shape != frame_b.shape:
        raise ShapeError(f"frame shapes differ: {frame_a.shape} vs {frame_b.shape}")
    if frame_a.ndim < 2:
        raise ShapeError("frames need at least two axes")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    shape = frame_a.shape
    ix, iy, it = (np.ascontiguousarray(d.reshape(-1, *shape[-2:]))
                  for d in image_derivatives(frame_a, frame_b))
    denom = alpha * alpha + ix * ix + iy * iy
    u = np.zeros_like(ix)
    v = np.zeros_like(ix)
    if return_energy:
        energies = []
        for _ in range(iterations):
            _hs_iterate(ix, iy, it, denom, u, v, 1)
            energies.append(hs_energy(ix, iy, it, u, v, alpha))
    else:
        _hs_iterate(ix, iy, it, denom, u, v, iterations)
    u = u.reshape(shape).astype(DTYPE)
    v = v.reshape(shape).astype(DTYPE)
    if return_energy:
        return u, v, energies
    return u, v


def hs_energy(ix, iy, it, u, v, alpha: float) -> float:
    """Data term plus ``alpha**2`` times the smoothness ``u.(u - avg u)``.

    The smoothness form uses the same replicate-edge averaging operator as
    the iteration, which makes it the exact quadratic the solver descends.
    """
    data = ((ix * u + iy * v + it) ** 2).sum()
    smooth = (u * (u - _neighbour_average(u))).sum() + (v * (v - _neighbour_average(v))).sum()
    return float(data + alpha * alpha * smooth)


def compose(frames: np.ndarray, alpha: float = DEFAULT_ALPHA,
            iterations: int = DEFAULT_ITERATIONS) -> np.ndarray:
    """Raw clip ``(T,H,W,C)`` -> appearance-motion ``(3,T,H,W)``.

    Flow for frame ``i`` is computed between frames ``i`` and ``i+1``; the
    last frame repeats the previous flow.
    """
    gray = to_grayscale(frames)
    if gray.shape[0] < 2:
        raise ShapeError("need at least two frames for motion channels")
    vx, vy = horn_schunck_flow(gray[:-1], gray[1:], alpha, iterations)
    vx = np.concatenate([vx, vx[-1:]], axis=0)
    vy = np.concatenate([vy, vy[-1:]], axis=0)
    return np.stack([gray, vx, vy]).astype(DTYPE)


def appearance_only(frames: np.ndarray) -> np.ndarray:
    """Grayscale with zeroed motion channels, same layout as :func:`compose`."""
    gray = to_grayscale(frames)
    z = np.zeros_like(gray)
    return np.stack([gray, z, z]).astype(DTYPE)


def rgb_volume(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=DTYPE)
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.shape[-1] == 1:
        frames = np.repeat(frames, 3, axis=-1)
    return np.ascontiguousarray(frames.transpose(3, 0, 1, 2))


def to_network_volume(frames: np.ndarray, mode: str = "am", **flow_kw) -> np.ndarray:
    if mode == "am":
        return compose(frames, **flow_kw)
    if mode == "gray":
        return appearance_only(frames)
    if mode == "rgb":
        return rgb_volume(frames)
    raise ValueError(f"unknown input mode {mode!r}")


# -- resampling -------------------------------------------------------------------

def _resize_axis(a: np.ndarray, axis: int, new_len: int) -> np.ndarray:
    """Linear resampling along one axis with pixel-centre alignment."""
    n = a.shape[axis]
    if new_len == n:
        return a
    pos = (np.arange(new_len) + 0.5) * (n / new_len) - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    w = (pos - i0).reshape([-1 if k == axis else 1 for k in range(a.ndim)])
    return np.take(a, i0, axis=axis) * (1.0 - w) + np.take(a, i1, axis=axis) * w


def resize_volume(a: np.ndarray, target, axes) -> np.ndarray:
    out = np.asarray(a, dtype=np.float64)
    for axis, n in zip(axes, target):
        if n < 1:
            raise ValueError(f"target extents must be >= 1, got {tuple(target)}")
        out = _resize_axis(out, axis, int(n))
    return out


def warp_clip(am: np.ndarray, target, rescale_flow: bool = True) -> np.ndarray:
    """Trilinear resize of a ``(3,T,H,W)`` clip to ``target = (T', H', W')``.

    Flow values (channels 1 and 2) are rescaled by the spatial factors so
    they stay in output-pixel units; pass ``rescale_flow=False`` for volumes
    that carry no flow.
    """
    am = np.asarray(am)
    if am.ndim != 4:
        raise ShapeError(f"expected (C,T,H,W), got {am.shape}")
    target = tuple(int(v) for v in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"invalid target {target}")
    _, _, h, w = am.shape
    out = resize_volume(am, target, axes=(1, 2, 3))
    if rescale_flow:
        out[1] *= target[2] / w
        out[2] *= target[1] / h
    return out.astype(DTYPE)


def temporal_rescale(frames: np.ndarray, p: float) -> np.ndarray:
    """Linear resampling of a raw clip along time to ``round(p*T)`` frames."""
    if not p > 0:
        raise ValueError("p must be positive")
    frames = np.asarray(frames)
    n = int(round(p * frames.shape[0]))
    if n < 2:
        raise ValueError(f"rescaled clip would have {n} frames")
    return resize_volume(frames, (n,), axes=(0,)).astype(DTYPE)


# -- clip files -------------------------------------------------------------------

def save_clip(path, frames: np.ndarray) -> None:
    save_tensor(path, np.asarray(frames, dtype=DTYPE))


def load_clip(path) -> np.ndarray:
    """Load a single 4-axis blob or a directory of per-frame blobs + ``clip.txt``.

    The directory manifest is one line ``T H W C pixel_format``; frames are
    named ``frame_00000.aptn`` etc.
    """
    path = Path(path)
    if path.is_dir():
        line = (path / "clip.txt").read_text().split()
        if len(line) != 5:
            raise ClipFormatError(f"{path / 'clip.txt'}: expected 'T H W C format'")
        t, h, w, c = (int(v) for v in line[:4])
        if line[4] != "f32":
            raise ClipFormatError(f"unsupported pixel format {line[4]!r}")
        frames = np.stack([load_tensor(path / f"frame_{i:05d}.aptn") for i in range(t)])
        frames = frames.reshape(t, h, w, c)
    else:
        frames = load_tensor(path)
        if frames.ndim == 3:
            frames = frames[..., None]
    if frames.ndim != 4 or frames.shape[-1] not in (1, 3):
        raise ClipFormatError(f"{path}: clip must be (T,H,W,1|3), got {frames.shape}")
    return frames


def save_clip_dir(path, frames: np.ndarray) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    t, h, w, c = frames.shape
    for i in range(t):
        save_tensor(path / f"frame_{i:05d}.aptn", frames[i])
    (path / "clip.txt").write_text(f"{t} {h} {w} {c} f32\n")
