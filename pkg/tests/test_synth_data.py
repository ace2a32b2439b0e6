import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dap3d import data as D
from dap3d import synth as S
from dap3d.appearance import load_clip
from dap3d.layers import GeometryError
from dap3d.tensor import rng


def test_name_tables():
    assert len(S.H1_NAMES) == 19 and len(S.H2_NAMES) == 14
    assert len(set(S.H1_NAMES)) == 19 and len(set(S.H2_NAMES)) == 14
    assert len(S.PROGRAMS) >= 10


@pytest.mark.parametrize("program", S.PROGRAMS)
def test_rule_table_is_deterministic(program):
    spec = S.ActionSpec(0, program, 0.25, 0.0, cyclic=program in S.CYCLIC)
    a, b = S.attributes(spec), S.attributes(spec)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[0].shape == (19,) and a[1].shape == (14,)


def test_translate_bits():
    h1, h2 = S.attributes(S.ActionSpec(0, "walk", 0.5, 0.0))
    on = {n for n, b in zip(S.H1_NAMES, h1) if b}
    assert "horizontal_body_translation" in on and "vertical_body_translation" not in on
    assert "translation_rightward" in on and "translation_leftward" not in on
    h1, h2 = S.attributes(S.ActionSpec(0, "walk", 0.25, math.pi))
    on2 = {n for n, b in zip(S.H2_NAMES, h2) if b}
    assert h1[S.H1_NAMES.index("translation_leftward")] == 1 and "slow" in on2 and "fast" not in on2


def test_clip_determinism_and_annotation():
    spec = S.sample_spec(3, seed=0, index=2, length=24)
    a, ann = S.synth_action_clip(spec, length=24, seed=9)
    b, _ = S.synth_action_clip(spec, length=24, seed=9)
    assert a.tobytes() == b.tobytes()
    assert a.shape == (24, 48, 48, 3) and 0.0 <= a.min() and a.max() <= 1.0
    cx, cy, ct, w, h, l = ann.volume
    assert 0 <= cx - w / 2 and cx + w / 2 <= 48 and 0 <= cy - h / 2 and cy + h / 2 <= 48
    assert ct == 12 and l == 24
    assert ann.category_id == 3


def test_clip_errors():
    spec = S.ActionSpec(0, "walk", 0.6, 0.0)
    with pytest.raises(ValueError):
        S.synth_action_clip(spec, length=6)
    with pytest.raises(GeometryError):
        S.synth_action_clip(spec, canvas=(20, 20), length=16)
    with pytest.raises(ValueError):
        S.ActionSpec(0, "moonwalk", 0.5, 0.0)


@pytest.mark.parametrize("speed,direction", [(0.25, 0.0), (0.5, 0.0), (0.3, math.pi)])
def test_translate_centroid_speed(speed, direction):
    spec = S.ActionSpec(0, "walk", speed, direction, limb_phase=0.7)
    alpha = S.render_alpha(spec, 32, (48, 96))
    xx = np.arange(96)[None, None, :] + 0.5
    cx = (alpha * xx).sum(axis=(1, 2)) / alpha.sum(axis=(1, 2))
    step = np.diff(cx)
    expect = speed * math.cos(direction)
    assert abs(np.mean(step) - expect) <= 0.5
    # every frame sits on the uniform-speed track within half a pixel
    assert np.abs(cx - cx[0] - expect * np.arange(32)).max() <= 0.5


def test_composite_video_ground_truth():
    spec = S.ActionSpec(1, "wave", 0.3, 0.0, 0.4)
    frames, anns = S.compose_multiaction_video([(spec, S.Placement(40, 32, 4, 20))], (64, 80), 32, seed=3)
    alpha = S.render_alpha(spec, 20, (64, 80), anchor=(40, 32))
    ref = S.alpha_extent(alpha, 4)
    assert np.abs(np.array(anns[0].volume) - ref).max() <= 1.0
    empty, none = S.compose_multiaction_video([], (64, 80), 16, seed=3)
    assert none == [] and empty.shape == (16, 64, 80, 3)
    with pytest.raises(GeometryError):
        S.compose_multiaction_video([(spec, S.Placement(3, 32, 0, 10))], (64, 80), 16)
    with pytest.raises(GeometryError):
        S.compose_multiaction_video([(spec, S.Placement(40, 32, 10, 10))], (64, 80), 16)


@pytest.mark.parametrize("vi", range(6))
def test_composite_cuboids_cover_foreground(vi):
    layout = D.sample_video_layout(0, vi)
    frames, anns = S.compose_multiaction_video(layout, D.VIDEO_CANVAS, D.VIDEO_LENGTH, seed=vi)
    assert [a.category_id for a in anns] == [s.category_id for s, _ in layout]
    for (spec, pl), ann in zip(layout, anns):
        alpha = np.zeros((D.VIDEO_LENGTH, *D.VIDEO_CANVAS))
        alpha[pl.t_start:pl.t_start + pl.length] = S.render_alpha(spec, pl.length, D.VIDEO_CANVAS, (pl.x, pl.y))
        cx, cy, ct, w, h, l = ann.volume
        inside = alpha[int(ct - l / 2):int(ct + l / 2), int(cy - h / 2):int(cy + h / 2),
                       int(cx - w / 2):int(cx + w / 2)]
        assert (inside > 0).sum() >= 0.95 * (alpha > 0).sum()


# -- crops and augmentation -----------------------------------------------------

def _clip(T=6, H=30, W=40, seed=0):
    return rng(seed).uniform(0, 1, (T, H, W, 3)).astype(np.float32)


def test_crop5_offsets_and_exact_pixels():
    clip = _clip()
    t = 4
    crops = D.crop5(clip, t)
    assert [c.offset for c in crops] == [(-t, -t), (t, -t), (-t, t), (t, t), (0, 0)]
    for c in crops:
        x0, y0 = c.origin
        assert c.frames.shape == (6, 30 - 2 * t, 40 - 2 * t, 3)
        np.testing.assert_array_equal(c.frames, clip[:, y0:y0 + 22, x0:x0 + 32])
        # crop centre minus clip centre equals the offset
        assert (x0 + 16 - 20, y0 + 11 - 15) == c.offset
        assert c.loc_target == pytest.approx((-c.offset[0] / 32, -c.offset[1] / 22))


def test_crop5_degenerate_and_errors():
    clip = _clip()
    for c in D.crop5(clip, 0):
        np.testing.assert_array_equal(c.frames, clip)
        assert c.offset == (0, 0)
    with pytest.raises(ValueError):
        D.crop5(clip, 15)
    with pytest.raises(ValueError):
        D.crop5(clip, -1)


def test_crop_geometry_at_full_size():
    w, h, t = 256, 342, 30
    for x0, y0, _ in D.crop_windows(w, h, t):
        assert 0 <= x0 and x0 + (w - 2 * t) <= w and 0 <= y0 and y0 + (h - 2 * t) <= h
    assert D.t_range(256) == (10.0, 50.0)
    assert D.t_range(48) == pytest.approx((1.875, 9.375))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_augment_contract(seed):
    clip = _clip(T=16, H=48, W=48, seed=1)
    ann = S.ActionAnnotation((24, 24, 8, 20, 30, 16), 2, np.zeros(19), np.zeros(14))
    out = D.augment(clip, ann, seed)
    again = D.augment(clip, ann, seed)
    assert len(out) == 5
    t, ps = D.sample_augmentation(seed, 48, 48)
    assert all(0.5 < p < 1.5 for p in ps)
    lo, hi = D.t_range(48)
    assert math.floor(lo) <= t <= math.ceil(hi)
    for (c, a), (c2, _), p in zip(out, again, ps):
        assert c.tobytes() == c2.tobytes()
        assert c.shape == (round(p * 16), 48 - 2 * t, 48 - 2 * t, 3)
        assert a.volume[5] == pytest.approx(16 * c.shape[0] / 16)


def test_augment_volume_loc_points_at_action():
    am = np.zeros((3, 8, 48, 48), np.float32)
    am[0, :, 24, 24] = 1.0
    for v, (lx, ly) in D.augment_volume(am, 5):
        _, _, h, w = v.shape
        ys, xs = np.nonzero(v[0, 0] > 0.5)
        # pixel 24 spans [24, 25); its centre sits half a pixel past the canvas centre
        assert lx * w == pytest.approx(xs[0] + 0.5 - w / 2 - 0.5)
        assert ly * h == pytest.approx(ys[0] + 0.5 - h / 2 - 0.5)


def test_augment_volume_scales_flow_with_time():
    am = np.ones((3, 20, 48, 48), np.float32)
    for v, _ in D.augment_volume(am, 2):
        n = v.shape[1]
        np.testing.assert_allclose(v[1], 20 / n, rtol=1e-6)
        np.testing.assert_allclose(v[0], 1.0)


# -- datasets and manifests -----------------------------------------------------

@pytest.fixture(scope="module")
def small_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("nasa")
    m = D.generate_dataset(root, num_categories=10, clips_per_category=10, seed=4)
    return root, m


def test_dataset_attribute_consistency(small_set):
    root, m = small_set
    specs = D.read_specs(root)
    assert len(m) == 100 and len(specs) == 100
    for rel, ann in m.entries:
        h1, h2 = S.attributes(specs[rel])
        assert h1.tobytes() == ann.h1.tobytes() and h2.tobytes() == ann.h2.tobytes()
        assert (root / rel).exists()
    lengths = {}
    for rel, ann in m.entries:
        lengths.setdefault(ann.category_id, set()).add(load_clip(root / rel).shape[0])
    assert all(len(v) == 1 and v <= set(S.LENGTH_CHOICES) for v in lengths.values())


def test_manifest_split(small_set):
    root, m = small_set
    train, test = D.build_manifest(root, seed=4)
    assert (len(train), len(test)) == (90, 10)
    a = {p for p, _ in train.entries}
    b = {p for p, _ in test.entries}
    assert not a & b and a | b == {p for p, _ in m.entries}
    assert D.read_manifest(root / "train.tsv").split == "train"
    again = D.build_manifest(root, seed=4)
    assert [p for p, _ in again[0].entries] == [p for p, _ in train.entries]
    tr, te = D.build_manifest(root, split_ratio=(1, 1), seed=4)
    assert (len(tr), len(te)) == (50, 50)


def test_manifest_format(small_set):
    root, _ = small_set
    lines = (root / "all.tsv").read_text().splitlines()
    assert lines[0] == "# dap3d-manifest version=1 seed=4 split=all"
    f = lines[1].split("\t")
    assert len(f) == 12 and len(f[2]) == 19 and len(f[3]) == 14 and set(f[2] + f[3]) <= {"0", "1"}
    back = D.read_manifest(root / "all.tsv")
    assert D.manifest_text(back) == (root / "all.tsv").read_text()


def test_manifest_errors(tmp_path):
    with pytest.raises(D.DataError):
        D.build_manifest(tmp_path)
    (tmp_path / "all.tsv").write_text("# dap3d-manifest version=1 seed=0 split=all\n")
    with pytest.raises(D.DataError):
        D.build_manifest(tmp_path)
    (tmp_path / "bad.tsv").write_text("# dap3d-manifest version=1 seed=0 split=all\na\t1\t0\n")
    with pytest.raises(D.DataError, match=":2:"):
        D.read_manifest(tmp_path / "bad.tsv")
    (tmp_path / "nohead.tsv").write_text("x\n")
    with pytest.raises(D.DataError):
        D.read_manifest(tmp_path / "nohead.tsv")


def test_regeneration_is_byte_identical(small_set, tmp_path):
    root, m = small_set
    head = D.read_manifest(root / "all.tsv")
    D.generate_dataset(tmp_path, 10, 10, seed=head.seed)
    assert (tmp_path / "all.tsv").read_bytes() == (root / "all.tsv").read_bytes()
    for rel, _ in m.entries:
        assert (tmp_path / rel).read_bytes() == (root / rel).read_bytes()


def test_all_toy_categories_render():
    for c in range(10):
        length = S.category_length(c, 0)
        for k in range(0, 40, 7):
            S.synth_action_clip(S.sample_spec(c, 0, k, length), length=length, seed=k)


def test_build_arrays_shapes(small_set):
    root, _ = small_set
    train, test = D.build_manifest(root, seed=4)
    sub = D.DatasetManifest(test.entries[:3], "test", 4, root=root)
    ds = D.build_arrays(sub, (3, 8, 32, 32), "am", augment_clips=True, seed=0, iterations=20)
    assert ds.x.shape == (15, 3, 8, 32, 32) and ds.h1.shape == (15, 19) and ds.loc.shape == (15, 2)
    plain = D.build_arrays(sub, (3, 8, 32, 32), "gray", augment_clips=False)
    assert plain.x.shape == (3, 3, 8, 32, 32) and not plain.x[:, 1:].any() and not plain.loc.any()


def test_generate_videos_and_parsing_arrays(tmp_path):
    ids = D.generate_videos(tmp_path, 2, seed=1)
    assert ids == ["v0000", "v0001"]
    from dap3d.parsing import read_detections
    gts = read_detections(tmp_path / "v0000.gt")
    assert 2 <= len(gts) <= 3 and all(g.score == 1.0 for g in gts)
    ds = D.build_parsing_arrays(tmp_path, ids, (3, 8, 32, 32), backgrounds_per_video=2, seed=0, iterations=10)
    n_act = sum(len(read_detections(tmp_path / f"{v}.gt")) for v in ids)
    assert len(ds) == 5 * (n_act + 4)
    bg = ds.labels == 5
    assert bg.sum() == 20 and not ds.h1[bg].any() and not ds.loc[bg].any()
    assert set(ds.labels[~bg]) <= set(range(5))


def test_extract_subvolume_pads():
    vol = np.ones((3, 10, 20, 20), np.float32)
    sub = D.extract_subvolume(vol, (2, 10, 5, 8, 8, 4))
    assert sub.shape == (3, 4, 8, 8)
    assert not sub[:, :, :, :2].any() and sub[:, :, :, 2:].all()


def test_aligned_clips_are_centred():
    for c in range(10):
        length = S.category_length(c, 1)
        for k in range(3):
            _, ann = S.synth_action_clip(S.sample_spec(c, 1, k, length), length=length, seed=k)
            assert abs(ann.volume[0] - 24) <= 0.5 and abs(ann.volume[1] - 24) <= 0.5
