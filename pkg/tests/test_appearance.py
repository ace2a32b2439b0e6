import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dap3d import appearance as A
from dap3d.tensor import ShapeError, rng

INTERIOR = (slice(5, -5), slice(5, -5))


def texture(seed=0, size=40):
    """Smooth random texture in [0, 1]."""
    t = rng(seed).uniform(0, 1, (size, size))
    for _ in range(3):
        t = A._neighbour_average(t)
    return (t - t.min()) / (t.max() - t.min())


def test_grayscale():
    g = rng(0).uniform(0, 1, (2, 4, 4))
    np.testing.assert_allclose(A.to_grayscale(g), g, atol=1e-7)
    np.testing.assert_allclose(A.to_grayscale(np.ones((1, 3, 3, 3))), 1.0, atol=1e-6)
    red = np.zeros((1, 2, 2, 3))
    red[..., 0] = 1
    np.testing.assert_allclose(A.to_grayscale(red), 0.299, atol=1e-7)
    with pytest.raises(A.ClipFormatError):
        A.to_grayscale(np.zeros((1, 2, 2, 2)))


def test_static_and_textureless_flow():
    t = texture()
    u, v = A.horn_schunck_flow(t, t)
    assert max(np.abs(u).max(), np.abs(v).max()) < 1e-6
    u, v = A.horn_schunck_flow(np.full((8, 8), 0.3), np.full((8, 8), 0.7))
    assert max(np.abs(u).max(), np.abs(v).max()) < 1e-6


def test_translation_fixture():
    t = texture()
    u, v = A.horn_schunck_flow(t, np.roll(t, 1, axis=1))
    assert 0.5 <= np.median(u[INTERIOR]) <= 1.5
    assert abs(np.median(v[INTERIOR])) < 0.25 and np.median(np.abs(v[INTERIOR])) < 0.25
    # frozen from the converged default run (alpha 15/255, 200 sweeps)
    assert np.median(u[INTERIOR]) == pytest.approx(1.1807, abs=1e-3)


def test_vertical_translation():
    t = texture(1)
    u, v = A.horn_schunck_flow(t, np.roll(t, 1, axis=0))
    assert 0.5 <= np.median(v[INTERIOR]) <= 1.5 and abs(np.median(u[INTERIOR])) < 0.25


@pytest.mark.parametrize("seed", range(4))
def test_flow_antisymmetry(seed):
    t = texture(seed)
    b = np.roll(t, 1, axis=1)
    fwd = np.median(A.horn_schunck_flow(t, b)[0][INTERIOR])
    bwd = np.median(A.horn_schunck_flow(b, t)[0][INTERIOR])
    assert abs(fwd + bwd) < 0.25


@pytest.mark.parametrize("seed", range(4))
def test_energy_non_increasing(seed):
    t = texture(seed, 24)
    shift = 1 + seed % 2
    _, _, e = A.horn_schunck_flow(t, np.roll(t, shift, axis=seed % 2), iterations=60, return_energy=True)
    e = np.array(e)
    assert (np.diff(e) <= 1e-12 * e[0]).all()


def test_flow_argument_errors():
    with pytest.raises(ShapeError):
        A.horn_schunck_flow(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ValueError):
        A.horn_schunck_flow(np.zeros((4, 4)), np.zeros((4, 4)), alpha=0)
    with pytest.raises(ValueError):
        A.horn_schunck_flow(np.zeros((4, 4)), np.zeros((4, 4)), iterations=0)


def moving_square(T=6, speed=1, size=32):
    frames = np.full((T, size, size, 1), 0.2)
    for t in range(T):
        x0 = 6 + speed * t
        frames[t, 10:20, x0:x0 + 10] = 0.9
    return frames


def test_compose_contract():
    clip = moving_square()
    am = A.compose(clip)
    assert am.shape == (3, 6, 32, 32)
    np.testing.assert_allclose(am[0], clip[..., 0], atol=1e-6)
    np.testing.assert_array_equal(am[1, -1], am[1, -2])
    static = np.repeat(clip[:1], 4, axis=0)
    am = A.compose(static)
    assert np.abs(am[1:]).max() < 1e-6
    with pytest.raises(ShapeError):
        A.compose(clip[:1])


def test_compose_sprite_velocity():
    # smooth blob; a hard one-pixel step reads ~2 px/frame under central differences
    yy, xx = np.mgrid[0:32, 0:32]
    clip = np.stack([0.2 + 0.7 * np.exp(-((xx - 10 - t) ** 2 + (yy - 16) ** 2) / 18.0) for t in range(6)])
    am = A.compose(clip[..., None])
    moving = np.abs(am[0, 1:] - am[0, :-1]) > 0.02
    vx = am[1, :-1][moving]
    assert 0.5 <= np.median(vx) <= 1.5
    assert abs(np.median(am[2, :-1][moving])) < 0.25


def test_warp_identity_constant_and_scaling():
    am = A.compose(moving_square())
    np.testing.assert_allclose(A.warp_clip(am, am.shape[1:]), am, atol=1e-6)
    c = np.full((3, 5, 7, 9), 0.4, np.float32)
    np.testing.assert_allclose(A.warp_clip(c, (3, 11, 4), rescale_flow=False), 0.4, atol=1e-6)
    flow = np.zeros((3, 4, 16, 16), np.float32)
    flow[1] = 2.0
    out = A.warp_clip(flow, (4, 8, 8))
    np.testing.assert_allclose(out[1], 1.0, atol=1e-6)
    with pytest.raises(ValueError):
        A.warp_clip(flow, (4, 0, 8))


@settings(max_examples=25, deadline=None)
@given(st.tuples(st.integers(1, 9), st.integers(1, 12), st.integers(1, 12)))
def test_warp_shape_contract(target):
    am = rng(0).normal(size=(3, 5, 8, 6)).astype(np.float32)
    assert A.warp_clip(am, target).shape == (3, *target)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_compose_then_warp_to_source_is_identity(seed):
    clip = rng(seed).uniform(0, 1, (3, 10, 12, 3))
    am = A.compose(clip, iterations=5)
    assert np.abs(A.warp_clip(am, am.shape[1:])[0] - am[0]).max() < 1e-5


def test_temporal_rescale():
    clip = rng(2).uniform(0, 1, (32, 4, 4, 1)).astype(np.float32)
    np.testing.assert_array_equal(A.temporal_rescale(clip, 1.0), clip)
    assert A.temporal_rescale(clip, 0.5).shape[0] == 16
    assert A.temporal_rescale(clip, 1.5).shape[0] == 48
    with pytest.raises(ValueError):
        A.temporal_rescale(clip[:3], 0.4)


def test_clip_files(tmp_path):
    clip = rng(3).uniform(0, 1, (4, 5, 6, 3)).astype(np.float32)
    A.save_clip(tmp_path / "c.aptn", clip)
    np.testing.assert_array_equal(A.load_clip(tmp_path / "c.aptn"), clip)
    A.save_clip_dir(tmp_path / "d", clip)
    assert (tmp_path / "d" / "clip.txt").read_text() == "4 5 6 3 f32\n"
    np.testing.assert_array_equal(A.load_clip(tmp_path / "d"), clip)
    A.save_clip(tmp_path / "bad.aptn", np.zeros((2, 3), np.float32))
    with pytest.raises(A.ClipFormatError):
        A.load_clip(tmp_path / "bad.aptn")
