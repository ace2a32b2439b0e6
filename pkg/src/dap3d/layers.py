"""Differentiable layers, losses and the momentum SGD optimizer.

Every backward function returns the gradient with respect to its input and
*accumulates* parameter gradients into the :class:`LayerParams` it was
given, so a batch can be pushed through in several pieces before a step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, rng

ACCUM = np.float64
LOG_EPS = 1e-7


class GeometryError(ValueError):
    """Layer geometry produces an empty output."""


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


@dataclass
class LayerParams:
    weights: np.ndarray
    bias: np.ndarray
    grad_weights: np.ndarray = field(default=None, repr=False)
    grad_bias: np.ndarray = field(default=None, repr=False)
    momentum_weights: np.ndarray = field(default=None, repr=False)
    momentum_bias: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=DTYPE)
        self.bias = np.ascontiguousarray(self.bias, dtype=DTYPE)
        # np.zeros is lazily backed by the OS, so large inference-only models stay cheap
        for name, ref in (("grad_weights", self.weights), ("grad_bias", self.bias),
                          ("momentum_weights", self.weights), ("momentum_bias", self.bias)):
            cur = getattr(self, name)
            if cur is None:
                setattr(self, name, np.zeros(ref.shape, dtype=DTYPE))
            elif cur.shape != ref.shape:
                raise ShapeError(f"{name} shape {cur.shape} != {ref.shape}")

    def zero_grad(self) -> None:
        self.grad_weights.fill(0.0)
        self.grad_bias.fill(0.0)

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy(), self.grad_weights.copy(),
                           self.grad_bias.copy(), self.momentum_weights.copy(), self.momentum_bias.copy())


def glorot_uniform(shape, fan_in: int, fan_out: int, seed: int, *stream: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng(seed, *stream).uniform(-limit, limit, size=shape).astype(DTYPE)


# -- 3D convolution ---------------------------------------------------------

@dataclass(frozen=True)
class Conv3DSpec:
    in_channels: int
    out_channels: int
    kernel: tuple = (3, 3, 3)
    stride: tuple = (1, 1, 1)
    padding: tuple = (1, 1, 1)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _triple(self.kernel))
        object.__setattr__(self, "stride", _triple(self.stride))
        object.__setattr__(self, "padding", _triple(self.padding))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"bad conv geometry {self}")

    def output_extents(self, extents) -> tuple[int, int, int]:
        out = tuple((e + 2 * p - k) // s + 1
                    for e, k, s, p in zip(extents, self.kernel, self.stride, self.padding))
        if min(out) < 1:
            raise GeometryError(f"conv {self.kernel}/{self.stride}/{self.padding} on {tuple(extents)} gives {out}")
        return out

    def init_params(self, seed: int, *stream: int) -> LayerParams:
        k = int(np.prod(self.kernel))
        shape = (self.out_channels, self.in_channels, *self.kernel)
        w = glorot_uniform(shape, self.in_channels * k, self.out_channels * k, seed, *stream)
        return LayerParams(w, np.zeros(self.out_channels, dtype=DTYPE))


def _conv_check(x: np.ndarray, spec: Conv3DSpec, params: LayerParams):
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (N,C,T,H,W), got {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv3d expects {spec.in_channels} channels, got {x.shape[1]}")
    expected = (spec.out_channels, spec.in_channels, *spec.kernel)
    if params.weights.shape != expected:
        raise ShapeError(f"conv weights {params.weights.shape} != {expected}")
    return spec.output_extents(x.shape[2:])


def _im2col(x: np.ndarray, spec: Conv3DSpec, out_ext) -> np.ndarray:
    """Column matrix of shape ``(C*kt*kh*kw, N*T'*H'*W')``."""
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride
    ot, oh, ow = out_ext
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))).transpose(1, 0, 2, 3, 4)
    n, c = x.shape[0], x.shape[1]
    kt, kh, kw = spec.kernel
    cols = np.empty((c, kt, kh, kw, n, ot, oh, ow), dtype=ACCUM)
    for a in range(kt):
        for b in range(kh):
            for d in range(kw):
                cols[:, a, b, d] = xp[:, :, a:a + st * ot:st, b:b + sh * oh:sh, d:d + sw * ow:sw]
    return cols.reshape(c * kt * kh * kw, -1)


def conv3d_forward(x: np.ndarray, spec: Conv3DSpec, params: LayerParams, cache: dict | None = None) -> np.ndarray:
    """Zero-padded cross-correlation over (T, H, W) plus per-channel bias.

    Passing a ``cache`` dict keeps the column matrix for the backward pass.
    """
    out_ext = _conv_check(x, spec, params)
    cols = _im2col(x, spec, out_ext)
    if cache is not None:
        cache["cols"] = cols
    wmat = params.weights.reshape(spec.out_channels, -1).astype(ACCUM)
    out = wmat @ cols + params.bias.astype(ACCUM)[:, None]
    out = out.reshape(spec.out_channels, x.shape[0], *out_ext).transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(out, dtype=DTYPE)


def conv3d_backward(x: np.ndarray, spec: Conv3DSpec, params: LayerParams, grad_output: np.ndarray,
                    cache: dict | None = None, need_input_grad: bool = True) -> np.ndarray | None:
    out_ext = _conv_check(x, spec, params)
    n = x.shape[0]
    if grad_output.shape != (n, spec.out_channels, *out_ext):
        raise ShapeError(f"grad_output {grad_output.shape} does not match forward output")
    cols = cache.get("cols") if cache else None
    if cols is None:
        cols = _im2col(x, spec, out_ext)
    g = grad_output.transpose(1, 0, 2, 3, 4).reshape(spec.out_channels, -1).astype(ACCUM)
    params.grad_weights += (g @ cols.T).reshape(params.weights.shape).astype(DTYPE)
    params.grad_bias += g.sum(axis=1).astype(DTYPE)
    if not need_input_grad:
        return None

    wmat = params.weights.reshape(spec.out_channels, -1).astype(ACCUM)
    gcols = (wmat.T @ g).reshape(spec.in_channels, *spec.kernel, n, *out_ext)
    pt, ph, pw = spec.padding
    st, sh, sw = spec.stride
    T, H, W = x.shape[2:]
    gxp = np.zeros((spec.in_channels, n, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=ACCUM)
    ot, oh, ow = out_ext
    for a in range(spec.kernel[0]):
        for b in range(spec.kernel[1]):
            for d in range(spec.kernel[2]):
                gxp[:, :, a:a + st * ot:st, b:b + sh * oh:sh, d:d + sw * ow:sw] += gcols[:, a, b, d]
    gx = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(gx, dtype=DTYPE)


# -- pooling ----------------------------------------------------------------

def pool_output_extents(extents, kernel, stride) -> tuple[int, int, int]:
    kernel, stride = _triple(kernel), _triple(stride)
    if any(k > e for k, e in zip(kernel, extents)):
        raise GeometryError(f"pool kernel {kernel} larger than input {tuple(extents)}")
    return tuple((e - k) // s + 1 for e, k, s in zip(extents, kernel, stride))


def maxpool3d_forward(x: np.ndarray, kernel=2, stride=2):
    """Window max over (T, H, W).

    Returns ``(output, argmax)`` where ``argmax`` holds flat indices into
    ``x``; ties go to the lowest flat index.
    """
    kernel, stride = _triple(kernel), _triple(stride)
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects (N,C,T,H,W), got {x.shape}")
    ot, oh, ow = pool_output_extents(x.shape[2:], kernel, stride)
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, :ot, :oh, :ow]
    win = win.reshape(*win.shape[:5], -1)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]

    kt, kh, kw = kernel
    lt, rem = np.divmod(local, kh * kw)
    lh, lw = np.divmod(rem, kw)
    N, C, T, H, W = x.shape
    tt = np.arange(ot)[:, None, None] * stride[0] + lt
    hh = np.arange(oh)[None, :, None] * stride[1] + lh
    ww = np.arange(ow)[None, None, :] * stride[2] + lw
    nc = (np.arange(N)[:, None] * C + np.arange(C)[None, :])[:, :, None, None, None]
    argmax = ((nc * T + tt) * H + hh) * W + ww
    return np.ascontiguousarray(out, dtype=DTYPE), argmax


def maxpool3d_backward(input_shape, argmax: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    size = int(np.prod(input_shape))
    g = np.bincount(argmax.ravel(), weights=grad_output.ravel().astype(ACCUM), minlength=size)
    return g.reshape(input_shape).astype(DTYPE)


# -- pointwise --------------------------------------------------------------

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(DTYPE, copy=False)


def relu_backward(x: np.ndarray, grad_output: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_output, 0).astype(DTYPE, copy=False)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=ACCUM)
    return np.exp(-np.logaddexp(0.0, -z))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=ACCUM)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- fully connected --------------------------------------------------------

def fc_init(in_dim: int, out_dim: int, seed: int, *stream: int) -> LayerParams:
    w = glorot_uniform((out_dim, in_dim), in_dim, out_dim, seed, *stream)
    return LayerParams(w, np.zeros(out_dim, dtype=DTYPE))


def fc_forward(x: np.ndarray, params: LayerParams) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != params.weights.shape[1]:
        raise ShapeError(f"fc input {x.shape} vs weights {params.weights.shape}")
    out = x.astype(ACCUM) @ params.weights.T.astype(ACCUM) + params.bias
    return out.astype(DTYPE)


def fc_backward(x: np.ndarray, params: LayerParams, grad_output: np.ndarray) -> np.ndarray:
    if grad_output.shape != (x.shape[0], params.weights.shape[0]):
        raise ShapeError(f"fc grad_output {grad_output.shape} does not match forward output")
    g = grad_output.astype(ACCUM)
    params.grad_weights += (g.T @ x.astype(ACCUM)).astype(DTYPE)
    params.grad_bias += g.sum(axis=0).astype(DTYPE)
    return (g @ params.weights.astype(ACCUM)).astype(DTYPE)


# -- losses -----------------------------------------------------------------

def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Batch-mean softmax loss; returns ``(loss, d loss / d logits)``."""
    logits = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, m = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"{n} rows of logits but labels shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= m:
        raise ValueError(f"labels must be in [0, {m})")
    z = np.asarray(logits, dtype=ACCUM)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), (grad / n).astype(DTYPE)


def multilabel_cross_entropy(probs: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Binary cross entropy averaged over attribute outputs (and batch rows).

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; the returned gradient
    is with respect to the unclamped probabilities and is zero where the
    clamp is active.
    """
    p = np.asarray(probs, dtype=ACCUM)
    t = np.asarray(targets, dtype=ACCUM)
    if p.shape != t.shape:
        raise ShapeError(f"probs {p.shape} vs targets {t.shape}")
    p2 = np.atleast_2d(p)
    t2 = np.atleast_2d(t)
    n_rows, n_attr = p2.shape
    pc = np.clip(p2, LOG_EPS, 1.0 - LOG_EPS)
    per_row = -(t2 * np.log(pc) + (1.0 - t2) * np.log(1.0 - pc)).mean(axis=1)
    grad = -(t2 / pc - (1.0 - t2) / (1.0 - pc)) / (n_attr * n_rows)
    grad = np.where((p2 >= LOG_EPS) & (p2 <= 1.0 - LOG_EPS), grad, 0.0)
    return float(per_row.mean()), grad.reshape(p.shape).astype(DTYPE)


def bbox_euclidean_loss(loc: np.ndarray, loc_t: np.ndarray) -> tuple[float, np.ndarray]:
    """Squared Euclidean distance between 2-vectors (batch mean over rows)."""
    a = np.asarray(loc, dtype=ACCUM)
    b = np.asarray(loc_t, dtype=ACCUM)
    if a.shape != b.shape or a.shape[-1] != 2 or a.ndim > 2:
        raise ShapeError(f"bbox loss needs matching (...,2) inputs, got {a.shape} and {b.shape}")
    d = np.atleast_2d(a - b)
    loss = (d ** 2).sum(axis=1).mean()
    grad = 2.0 * d / d.shape[0]
    return float(loss), grad.reshape(a.shape).astype(DTYPE)


# -- optimization -----------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.005
    momentum: float = 0.9
    batch_size: int = 40
    lr_decay_factor: float = 0.3
    lr_step_iterations: int = 50_000
    max_iterations: int = 500_000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must be in (0, 1]")
        if self.lr_step_iterations < 1 or self.max_iterations < 0:
            raise ValueError("bad iteration counts")


PRETRAIN = OptimizerConfig()
FINETUNE = OptimizerConfig(learning_rate=0.001, momentum=0.9, batch_size=40,
                           lr_decay_factor=0.1, lr_step_iterations=1000, max_iterations=3700)


def lr_schedule(config: OptimizerConfig, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return config.learning_rate * config.lr_decay_factor ** (iteration // config.lr_step_iterations)


def sgd_momentum_step(params: LayerParams, config: OptimizerConfig, current_lr: float) -> LayerParams:
    """``v <- mu*v - lr*g``; ``w <- w + v``; gradients are zeroed afterwards."""
    mu = DTYPE(config.momentum)
    lr = DTYPE(current_lr)
    for w, g, v in ((params.weights, params.grad_weights, params.momentum_weights),
                    (params.bias, params.grad_bias, params.momentum_bias)):
        v *= mu
        v -= lr * g
        w += v
    params.zero_grad()
    return params
