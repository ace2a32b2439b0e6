import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dap3d import gradcheck as G
from dap3d import layers as L
from dap3d.tensor import ShapeError, rng


def _params(w, b):
    return L.LayerParams(np.asarray(w, np.float32), np.asarray(b, np.float32))


def conv_oracle(x, w, b, stride, pad):
    """Seven nested loops of direct summation in float64."""
    n, c, T, H, W = x.shape
    o, _, kt, kh, kw = w.shape
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (pad[0],) * 2, (pad[1],) * 2, (pad[2],) * 2))
    ot = (T + 2 * pad[0] - kt) // stride[0] + 1
    oh = (H + 2 * pad[1] - kh) // stride[1] + 1
    ow = (W + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((n, o, ot, oh, ow))
    for i in range(n):
        for k in range(o):
            for t in range(ot):
                for y in range(oh):
                    for z in range(ow):
                        acc = float(b[k])
                        for ch in range(c):
                            for a in range(kt):
                                for bb in range(kh):
                                    for d in range(kw):
                                        acc += w[k, ch, a, bb, d] * xp[i, ch, t * stride[0] + a,
                                                                        y * stride[1] + bb, z * stride[2] + d]
                        out[i, k, t, y, z] = acc
    return out


# -- conv -------------------------------------------------------------------

def test_conv_scalar_product():
    spec = L.Conv3DSpec(1, 1, 1, 1, 0)
    out = L.conv3d_forward(np.full((1, 1, 1, 1, 1), 3.0, np.float32), spec, _params([[[[[2.0]]]]], [0.0]))
    assert out.item() == 6.0


def test_conv_delta_kernel_is_identity():
    spec = L.Conv3DSpec(1, 1)
    w = np.zeros((1, 1, 3, 3, 3))
    w[0, 0, 1, 1, 1] = 1
    x = rng(0).normal(size=(2, 1, 4, 5, 6)).astype(np.float32)
    np.testing.assert_array_equal(L.conv3d_forward(x, spec, _params(w, [0])), x)


def test_conv_matches_loop_oracle():
    g = rng(1)
    spec = L.Conv3DSpec(2, 3)
    x = g.normal(size=(1, 2, 4, 4, 4)).astype(np.float32)
    p = spec.init_params(5)
    p.bias[:] = g.normal(size=3)
    ref = conv_oracle(x, p.weights, p.bias, (1, 1, 1), (1, 1, 1))
    np.testing.assert_allclose(L.conv3d_forward(x, spec, p), ref, atol=1e-5, rtol=0)


def test_conv_strided_matches_oracle():
    g = rng(2)
    spec = L.Conv3DSpec(2, 2, (2, 3, 1), (2, 1, 2), (0, 1, 0))
    x = g.normal(size=(2, 2, 5, 4, 5)).astype(np.float32)
    p = spec.init_params(3)
    ref = conv_oracle(x, p.weights, p.bias, spec.stride, spec.padding)
    np.testing.assert_allclose(L.conv3d_forward(x, spec, p), ref, atol=1e-5, rtol=0)


def test_conv_errors():
    spec = L.Conv3DSpec(2, 1, 3, 1, 0)
    p = spec.init_params(0)
    with pytest.raises(ShapeError):
        L.conv3d_forward(np.zeros((1, 1, 3, 3, 3), np.float32), spec, p)
    with pytest.raises(L.GeometryError):
        L.conv3d_forward(np.zeros((1, 2, 2, 3, 3), np.float32), spec, p)
    with pytest.raises(ValueError):
        L.Conv3DSpec(1, 1, (0, 1, 1))


def test_conv_backward_examples():
    spec = L.Conv3DSpec(1, 1, 1, 1, 0)
    p = _params([[[[[2.0]]]]], [0.0])
    x = np.full((1, 1, 1, 1, 1), 3.0, np.float32)
    gx = L.conv3d_backward(x, spec, p, np.ones((1, 1, 1, 1, 1), np.float32))
    assert gx.item() == 2.0 and p.grad_weights.item() == 3.0 and p.grad_bias.item() == 1.0

    spec = L.Conv3DSpec(2, 3)
    p = spec.init_params(0)
    x = rng(0).normal(size=(1, 2, 3, 3, 3)).astype(np.float32)
    gx = L.conv3d_backward(x, spec, p, np.zeros((1, 3, 3, 3, 3), np.float32))
    assert not gx.any() and not p.grad_weights.any() and not p.grad_bias.any()
    with pytest.raises(ShapeError):
        L.conv3d_backward(x, spec, p, np.zeros((1, 3, 3, 3, 2), np.float32))


def test_conv_weight_init():
    spec = L.Conv3DSpec(3, 4)
    p = spec.init_params(11)
    limit = math.sqrt(6.0 / (3 * 27 + 4 * 27))
    assert np.abs(p.weights).max() <= limit and not p.bias.any()
    assert p.grad_weights.shape == p.momentum_weights.shape == p.weights.shape
    np.testing.assert_array_equal(p.weights, spec.init_params(11).weights)


@settings(max_examples=60)
@given(st.tuples(*[st.integers(1, 7)] * 3), st.tuples(*[st.integers(1, 3)] * 3),
       st.tuples(*[st.integers(1, 3)] * 3), st.tuples(*[st.integers(0, 2)] * 3))
def test_conv_output_shape_formula(ext, k, s, pad):
    expect = tuple((e + 2 * q - kk) // ss + 1 for e, kk, ss, q in zip(ext, k, s, pad))
    spec = L.Conv3DSpec(1, 2, k, s, pad)
    if min(expect) < 1:
        with pytest.raises(L.GeometryError):
            spec.output_extents(ext)
        return
    out = L.conv3d_forward(np.ones((1, 1, *ext), np.float32), spec, spec.init_params(0))
    assert out.shape == (1, 2, *expect)


# -- pooling ------------------------------------------------------------------

def pool_oracle(x, k, s):
    n, c, T, H, W = x.shape
    ot, oh, ow = ((e - kk) // ss + 1 for e, kk, ss in zip((T, H, W), k, s))
    out = np.zeros((n, c, ot, oh, ow), x.dtype)
    for idx in np.ndindex(n, c, ot, oh, ow):
        i, ch, t, y, z = idx
        out[idx] = x[i, ch, t * s[0]:t * s[0] + k[0], y * s[1]:y * s[1] + k[1], z * s[2]:z * s[2] + k[2]].max()
    return out


def test_pool_examples():
    out, _ = L.maxpool3d_forward(np.full((1, 2, 4, 4, 4), 1.5, np.float32))
    assert out.shape == (1, 2, 2, 2, 2) and (out == 1.5).all()
    x = rng(3).normal(size=(2, 3, 2, 2, 2)).astype(np.float32)
    out, _ = L.maxpool3d_forward(x, 2, 2)
    np.testing.assert_array_equal(out.reshape(2, 3), x.reshape(2, 3, -1).max(axis=2))
    for k, s in (((2, 2, 2), (2, 2, 2)), ((1, 2, 2), (1, 2, 2)), ((3, 2, 1), (1, 2, 1))):
        x = rng(4).normal(size=(2, 2, 5, 6, 5)).astype(np.float32)
        np.testing.assert_array_equal(L.maxpool3d_forward(x, k, s)[0], pool_oracle(x, k, s))
    with pytest.raises(L.GeometryError):
        L.maxpool3d_forward(np.zeros((1, 1, 1, 4, 4), np.float32), 2, 2)


def test_pool_ties_route_to_lowest_index():
    x = np.zeros((1, 1, 2, 2, 2), np.float32)
    _, am = L.maxpool3d_forward(x)
    assert am.item() == 0
    g = L.maxpool3d_backward(x.shape, am, np.ones((1, 1, 1, 1, 1), np.float32))
    assert g.ravel()[0] == 1 and g.sum() == 1


# -- relu / softmax / fc ------------------------------------------------------

def test_relu_examples():
    neg = -np.arange(1, 7, dtype=np.float32)
    assert not L.relu_forward(neg).any()
    pos = -neg
    np.testing.assert_array_equal(L.relu_forward(pos), pos)
    np.testing.assert_array_equal(L.relu_backward(pos, neg), neg)
    assert L.relu_backward(np.zeros(1, np.float32), np.ones(1, np.float32)).item() == 0.0


@given(st.lists(st.lists(st.floats(-50, 50), min_size=2, max_size=6), min_size=1, max_size=4).filter(
    lambda rows: len({len(r) for r in rows}) == 1))
def test_softmax_is_simplex(rows):
    p = L.softmax(np.array(rows))
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_fc_examples():
    x = rng(5).normal(size=(3, 4)).astype(np.float32)
    np.testing.assert_array_equal(L.fc_forward(x, _params(np.eye(4), np.zeros(4))), x)
    b = np.array([1.0, -2.0], np.float32)
    np.testing.assert_array_equal(L.fc_forward(x, _params(np.zeros((2, 4)), b)), np.tile(b, (3, 1)))
    with pytest.raises(ShapeError):
        L.fc_forward(x, _params(np.zeros((2, 5)), b))


# -- gradient checks ------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(G.LAYER_CHECKS))
def test_backward_matches_finite_differences(name):
    errs = [G.LAYER_CHECKS[name](seed) for seed in range(20)]
    assert max(errs) <= 1e-3, errs


# -- losses -------------------------------------------------------------------

def test_softmax_cross_entropy_examples():
    loss, _ = L.softmax_cross_entropy(np.zeros((2, 101)), [3, 100])
    assert loss == pytest.approx(4.6151, abs=1e-4)
    assert loss == pytest.approx(math.log(101), abs=1e-12)
    z = np.zeros((1, 4))
    z[0, 2] = 1e4
    assert L.softmax_cross_entropy(z, [2])[0] < 1e-12
    with pytest.raises(ValueError):
        L.softmax_cross_entropy(np.zeros((1, 3)), [3])


def test_multilabel_examples():
    loss, _ = L.multilabel_cross_entropy(np.full(19, 0.5), rng(0).integers(0, 2, 19))
    assert loss == pytest.approx(0.6931, abs=1e-4)
    t = rng(1).integers(0, 2, 14)
    eps = L.LOG_EPS
    assert L.multilabel_cross_entropy(t.astype(float), t)[0] <= 2 * eps * abs(math.log(eps))
    loss, _ = L.multilabel_cross_entropy(np.array([0.9, 0.2, 0.8]), [1, 0, 1])
    assert loss == pytest.approx(0.18388, abs=1e-5)
    with pytest.raises(ShapeError):
        L.multilabel_cross_entropy(np.full(3, 0.5), [1, 0])


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_multilabel_minimized_at_targets(seed):
    g = rng(seed)
    t = g.integers(0, 2, 7)
    best = np.clip(t.astype(float), L.LOG_EPS, 1 - L.LOG_EPS)
    base = L.multilabel_cross_entropy(best, t)[0]
    delta = g.uniform(1e-3, 0.5, size=7) * g.integers(0, 2, 7)
    if not delta.any():
        delta[int(g.integers(0, 7))] = 0.1
    p = np.clip(np.where(t == 1, best - delta, best + delta), L.LOG_EPS, 1 - L.LOG_EPS)
    assert L.multilabel_cross_entropy(p, t)[0] > base


def test_bbox_examples():
    assert L.bbox_euclidean_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))[0] == 0.0
    loss, grad = L.bbox_euclidean_loss(np.array([3.0, 4.0]), np.zeros(2))
    assert loss == 25.0
    np.testing.assert_array_equal(grad, [6.0, 8.0])
    with pytest.raises(ShapeError):
        L.bbox_euclidean_loss(np.zeros(3), np.zeros(3))


@given(st.tuples(*[st.floats(-100, 100)] * 4))
def test_bbox_symmetric(v):
    a, b = np.array(v[:2]), np.array(v[2:])
    assert L.bbox_euclidean_loss(a, b)[0] == L.bbox_euclidean_loss(b, a)[0]


# -- optimizer ----------------------------------------------------------------

def test_sgd_two_steps_unrolled():
    p = _params([0.0], [0.0])
    cfg = L.OptimizerConfig(learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        p.grad_weights[:] = 1.0
        L.sgd_momentum_step(p, cfg, 0.1)
    assert p.weights.item() == pytest.approx(-0.29, abs=1e-6)
    assert not p.grad_weights.any()


def test_sgd_plain_step_without_momentum():
    p = _params([1.0, 2.0], [0.5])
    p.grad_weights[:] = [2.0, -1.0]
    L.sgd_momentum_step(p, L.OptimizerConfig(momentum=0.0), 0.1)
    np.testing.assert_allclose(p.weights, [0.8, 2.1], atol=1e-7)


@given(st.floats(-1, 1, width=32), st.floats(0, 0.99))
def test_sgd_zero_gradient_moves_by_momentum_only(v, mu):
    p = _params([1.0], [0.0])
    p.momentum_weights[:] = v
    L.sgd_momentum_step(p, L.OptimizerConfig(momentum=mu), 0.1)
    expect = np.float32(1.0) + np.float32(mu) * np.float32(v)
    assert p.weights.item() == pytest.approx(float(expect), abs=1e-6)
    q = _params([1.0], [0.0])
    L.sgd_momentum_step(q, L.OptimizerConfig(momentum=mu), 0.1)
    assert q.weights.item() == 1.0


def test_schedules():
    assert L.PRETRAIN.learning_rate == 0.005 and L.PRETRAIN.momentum == 0.9 and L.PRETRAIN.batch_size == 40
    assert L.PRETRAIN.lr_decay_factor == 0.3 and L.PRETRAIN.lr_step_iterations == 50_000
    assert L.PRETRAIN.max_iterations == 500_000
    assert L.FINETUNE.learning_rate == 0.001 and L.FINETUNE.lr_decay_factor == 0.1
    assert L.FINETUNE.lr_step_iterations == 1000
    assert L.lr_schedule(L.PRETRAIN, 0) == 0.005
    assert L.lr_schedule(L.PRETRAIN, 49_999) == 0.005
    assert L.lr_schedule(L.PRETRAIN, 50_000) == pytest.approx(0.0015)
    assert L.lr_schedule(L.FINETUNE, 2500) == pytest.approx(1e-5)


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(momentum=1.0), dict(batch_size=0),
                                dict(lr_decay_factor=0), dict(lr_decay_factor=1.5)])
def test_optimizer_config_validation(kw):
    with pytest.raises(ValueError):
        L.OptimizerConfig(**kw)
