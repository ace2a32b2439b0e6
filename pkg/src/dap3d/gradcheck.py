"""Finite-difference checks of every layer backward and of the end-to-end
joint-loss gradient. Used by the test-suite and ``dap3d gradcheck``."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import model as _model
from . import tensor as _tensor
from .model import Targets, build, joint_loss, tiny_profile
from .tensor import finite_difference_grad, relative_error, rng

LAYER_TOL = 1e-3
END_TO_END_TOL = 1e-2


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


EPS = 1e-3


def _spaced(shape, g):
    """Distinct values in (-1, 1) on a shuffled grid, none at 0, so max and
    relu kinks stay out of reach of the finite-difference step."""
    n = int(np.prod(shape))
    gap = 2.0 / (n + 1)
    vals = -1.0 + gap * np.arange(1, n + 1)
    vals[np.abs(vals) < gap / 2] += gap / 4
    return g.permutation(vals).reshape(shape)


def _u(g, size):
    return g.uniform(-1.0, 1.0, size=size)


def check_conv(seed: int, backward=L.conv3d_backward) -> float:
    g = rng(seed, 101)
    k = tuple(int(v) for v in g.integers(1, 4, size=3))
    s = tuple(int(v) for v in g.integers(1, 3, size=3))
    p = tuple(int(g.integers(0, kk)) for kk in k)
    spec = L.Conv3DSpec(int(g.integers(1, 4)), int(g.integers(1, 4)), k, s, p)
    ext = tuple(int(kk + g.integers(0, 4)) for kk in k)
    x = _u(g, (int(g.integers(1, 3)), spec.in_channels, *ext)).astype(np.float32)
    params = spec.init_params(seed)
    params.weights[...] = _u(g, params.weights.shape)
    params.bias[:] = _u(g, params.bias.shape)
    out = L.conv3d_forward(x, spec, params)
    r = g.normal(size=out.shape)
    params.zero_grad()
    gx = backward(x, spec, params, r.astype(np.float32))
    gw, gb = params.grad_weights.copy(), params.grad_bias.copy()

    def f_x(v):
        return float((L.conv3d_forward(v.astype(np.float32), spec, params) * r).sum())

    def f_attr(attr):
        base = getattr(params, attr).copy()

        def f(v):
            setattr(params, attr, v.astype(np.float32))
            try:
                return float((L.conv3d_forward(x, spec, params) * r).sum())
            finally:
                setattr(params, attr, base)
        return f

    eps = EPS
    return max(relative_error(gx, finite_difference_grad(f_x, x, eps)),
               relative_error(gw, finite_difference_grad(f_attr("weights"), params.weights, eps)),
               relative_error(gb, finite_difference_grad(f_attr("bias"), params.bias, eps)))


def check_maxpool(seed: int) -> float:
    g = rng(seed, 102)
    kernel = tuple(int(v) for v in g.integers(1, 3, size=3))
    stride = tuple(int(v) for v in g.integers(1, 3, size=3))
    shape = (int(g.integers(1, 3)), int(g.integers(1, 3)), *(int(kk + g.integers(0, 4)) for kk in kernel))
    x = _spaced(shape, g).astype(np.float32)
    out, am = L.maxpool3d_forward(x, kernel, stride)
    r = g.normal(size=out.shape)
    gx = L.maxpool3d_backward(x.shape, am, r.astype(np.float32))
    fd = finite_difference_grad(lambda v: float((L.maxpool3d_forward(v.astype(np.float32), kernel, stride)[0] * r).sum()),
                                x, EPS)
    return relative_error(gx, fd)


def check_relu(seed: int) -> float:
    g = rng(seed, 103)
    x = _spaced((int(g.integers(1, 4)), 7), g).astype(np.float32)
    r = g.normal(size=x.shape)
    gx = L.relu_backward(x, r.astype(np.float32))
    fd = finite_difference_grad(lambda v: float((L.relu_forward(v.astype(np.float32)) * r).sum()), x, EPS)
    return relative_error(gx, fd)


def check_fc(seed: int) -> float:
    g = rng(seed, 104)
    n, d, k = (int(v) for v in g.integers(1, 6, size=3))
    params = L.fc_init(d, k, seed)
    params.weights[...] = _u(g, params.weights.shape)
    params.bias[:] = _u(g, k)
    x = _u(g, (n, d)).astype(np.float32)
    r = g.normal(size=(n, k))
    params.zero_grad()
    gx = L.fc_backward(x, params, r.astype(np.float32))
    gw = params.grad_weights.copy()
    fx = finite_difference_grad(lambda v: float((L.fc_forward(v.astype(np.float32), params) * r).sum()), x, EPS)
    w0 = params.weights.copy()

    def fw(v):
        params.weights = v.astype(np.float32)
        try:
            return float((L.fc_forward(x, params) * r).sum())
        finally:
            params.weights = w0
    return max(relative_error(gx, fx), relative_error(gw, finite_difference_grad(fw, w0, EPS)))


def check_losses(seed: int) -> float:
    g = rng(seed, 105)
    n, m = int(g.integers(1, 5)), int(g.integers(2, 6))
    logits = _u(g, (n, m))
    labels = g.integers(0, m, size=n)
    _, gl = L.softmax_cross_entropy(logits, labels)
    e1 = relative_error(gl, finite_difference_grad(lambda v: L.softmax_cross_entropy(v, labels)[0], logits, EPS))
    probs = g.uniform(0.05, 0.95, size=(n, 7))
    bits = g.integers(0, 2, size=(n, 7))
    _, gp = L.multilabel_cross_entropy(probs, bits)
    e2 = relative_error(gp, finite_difference_grad(lambda v: L.multilabel_cross_entropy(v, bits)[0], probs, EPS))
    loc, tgt = _u(g, (n, 2)), _u(g, (n, 2))
    _, gb = L.bbox_euclidean_loss(loc, tgt)
    e3 = relative_error(gb, finite_difference_grad(lambda v: L.bbox_euclidean_loss(v, tgt)[0], loc, EPS))
    return max(e1, e2, e3)


@contextmanager
def float64_compute():
    """Run layers and model in float64 (used for the numeric side of the
    end-to-end check, where float32 rounding would force a large step)."""
    mods = (_tensor, L, _model)
    old = [m.DTYPE for m in mods]
    for m in mods:
        m.DTYPE = np.float64
    try:
        yield
    finally:
        for m, d in zip(mods, old):
            m.DTYPE = d


def check_end_to_end(seed: int, batch: int = 3, fc_rank: int | None = None) -> float:
    """Joint-loss gradient of a tiny model w.r.t. every parameter."""
    cfg = tiny_profile(3)
    model = build(cfg, seed)
    g = rng(seed, 106)
    for p in model.params.values():
        p.bias[:] = g.normal(scale=0.1, size=p.bias.shape)
    if fc_rank is not None:
        from .model import svd_compress_fc
        model = svd_compress_fc(model, fc_rank)
    x = g.normal(size=(batch, *cfg.input_shape)).astype(np.float32)
    tg = Targets(g.integers(0, cfg.num_classes, size=batch), g.integers(0, 2, size=(batch, 19)),
                 g.integers(0, 2, size=(batch, 14)), g.normal(scale=0.3, size=(batch, 2)))
    model.zero_grad()
    model.loss_and_grads(x, tg)
    analytic = np.concatenate([np.concatenate([p.grad_weights.ravel(), p.grad_bias.ravel()])
                               for p in model.params.values()])
    numeric = []
    x64 = x.astype(np.float64)
    with float64_compute():
        # parameters past the conv trunk leave its output unchanged
        last = [n for n in model.feature_layers if not n.startswith("fc")][-1]
        feats = model.forward(x64, stop_at=last).reshape(batch, -1)
        for name, p in model.params.items():
            run = (lambda: model.forward(x64)) if name.startswith("conv") else (lambda: model.heads(feats))
            for attr in ("weights", "bias"):
                base = getattr(p, attr).copy()

                def f(v, p=p, attr=attr, base=base, run=run):
                    setattr(p, attr, v)
                    try:
                        return joint_loss(run(), tg, cfg.lambda1, cfg.lambda2, cfg.beta)[0]
                    finally:
                        setattr(p, attr, base)
                numeric.append(finite_difference_grad(f, base, 1e-5).ravel())
    model.zero_grad()
    return relative_error(analytic, np.concatenate(numeric))


LAYER_CHECKS = {"conv3d": check_conv, "maxpool3d": check_maxpool, "relu": check_relu,
                "fc": check_fc, "losses": check_losses}


def run_all(instances: int = 20, seed: int = 0, e2e_instances: int = 3, conv_backward=None) -> list[CheckResult]:
    out = []
    for name, fn in LAYER_CHECKS.items():
        if name == "conv3d" and conv_backward is not None:
            errs = [fn(seed + i, conv_backward) for i in range(instances)]
        else:
            errs = [fn(seed + i) for i in range(instances)]
        out.append(CheckResult(name, max(errs), LAYER_TOL, instances))
    errs = [check_end_to_end(seed + i) for i in range(e2e_instances)]
    out.append(CheckResult("end_to_end", max(errs), END_TO_END_TOL, e2e_instances))
    return out
