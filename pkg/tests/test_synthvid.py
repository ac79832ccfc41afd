import numpy as np
import pytest

from sttrack.boxes import Box
from sttrack.engine.rng import stream
from sttrack.synthvid import (
    CropSizes,
    CropTransform,
    InsufficientFrames,
    SceneParams,
    SyntheticSequence,
    TrainingTriplet,
    TripletSource,
    augment,
    collate,
    crop_region,
    crop_search_region,
    flip_horizontal,
    generate_sequence,
    sample_triplet,
    scale_brightness,
)


def _all_frames(seq):
    return np.stack(list(seq.frames))


def test_generation_is_bit_reproducible():
    a, b = generate_sequence(0), generate_sequence(0)
    assert _all_frames(a).tobytes() == _all_frames(b).tobytes()
    assert a.gt.tobytes() == b.gt.tobytes()
    assert np.array_equal(a.visible, b.visible)
    assert _all_frames(generate_sequence(1)).tobytes() != _all_frames(a).tobytes()


def test_sequence_shapes_and_types():
    p = SceneParams(frames=12, height=96, width=112)
    s = generate_sequence(3, p)
    assert len(s.frames) == len(s.gt) == len(s.visible) == 12
    f = s.frames[5]
    assert f.shape == (96, 112, 3) and f.dtype == np.uint8
    assert np.array_equal(s.frames[-1], s.frames[11])
    with pytest.raises(IndexError):
        s.frames[12]


def test_no_occlusion_means_all_visible():
    for seed in range(5):
        assert generate_sequence(seed, SceneParams(occlusion_prob=0.0)).visible.all()


def test_forced_occlusion_hides_every_frame_after_the_first():
    p = SceneParams(frames=40, occlusion_prob=1.0, occlusion_len=40)
    s = generate_sequence(7, p)
    assert s.visible[0]
    assert not s.visible[1:].any()


def test_visible_boxes_have_area_and_touch_the_frame():
    p = SceneParams(occlusion_prob=0.03, out_of_view_prob=0.03)
    for seed in range(10):
        s = generate_sequence(seed, p)
        for (x, y, w, h), v in zip(s.gt, s.visible):
            if v:
                assert w > 0 and h > 0
                assert x < p.width and y < p.height and x + w > 0 and y + h > 0


def test_out_of_view_episode_leaves_the_frame():
    p = SceneParams(frames=60, out_of_view_prob=1.0, out_of_view_len=20)
    s = generate_sequence(2, p)
    x, y, w, h = s.gt.T
    outside = (x >= p.width) | (y >= p.height) | (x + w <= 0) | (y + h <= 0)
    assert outside.any()
    assert not s.visible[outside].any()


def test_occluder_covers_the_target():
    p = SceneParams(frames=10, occlusion_prob=1.0, occlusion_len=3, distractors=0)
    s = generate_sequence(5, p)
    i = int(np.flatnonzero(~s.visible)[0])
    x, y, w, h = s.gt[i]
    # pixels at the target center in an occluded frame differ from a render without the occluder
    scene = s.frames._scene
    saved = scene.occluder_id[i]
    scene.occluder_id[i] = -1
    bare = s.frames[i]
    scene.occluder_id[i] = saved
    cy, cx = int(y + h / 2), int(x + w / 2)
    assert not np.array_equal(bare[cy - 2 : cy + 2, cx - 2 : cx + 2], s.frames[i][cy - 2 : cy + 2, cx - 2 : cx + 2])


@pytest.mark.parametrize(
    "bad",
    [
        dict(frames=1),
        dict(height=8),
        dict(distractors=-1),
        dict(occlusion_prob=1.5),
        dict(out_of_view_prob=-0.1),
        dict(occlusion_len=0),
        dict(min_size=0),
        dict(min_size=40, max_size=30),
        dict(max_size=100),
        dict(speed=-1),
    ],
)
def test_degenerate_params_rejected(bad):
    with pytest.raises(ValueError):
        generate_sequence(0, SceneParams(**bad))


def test_consecutive_visible_boxes_stay_inside_the_search_crop():
    p = SceneParams(occlusion_prob=0.02, out_of_view_prob=0.02)
    for seed in range(20):
        s = generate_sequence(seed, p)
        for t in range(1, len(s)):
            if not (s.visible[t] and s.visible[t - 1]):
                continue
            _, tr = crop_search_region(np.zeros((8, 8, 3), np.uint8), s.box(t - 1), 5.0, 80)
            x0, y0, x1, y1 = tr.image_to_crop(s.box(t)).corners
            assert x0 >= 0 and y0 >= 0 and x1 <= 80 and y1 <= 80


# --- crops -----------------------------------------------------------------------
def test_template_region_side_at_factor_two():
    frame = np.zeros((600, 600, 3), np.uint8)
    patch, t = crop_search_region(frame, Box(268, 268, 64, 64), 2.0, 128)
    assert t.side == pytest.approx(128.0)
    assert patch.shape == (3, 128, 128)
    assert (t.offset_x, t.offset_y) == (236.0, 236.0)


def test_search_region_side_at_factor_five():
    frame = np.zeros((600, 600, 3), np.uint8)
    _, t = crop_search_region(frame, Box(268, 268, 64, 64), 5.0, 320)
    assert t.side == pytest.approx(320.0)
    assert t.zoom == pytest.approx(1.0)


def test_unit_zoom_crop_copies_pixels():
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, size=(50, 60, 3), dtype=np.uint8)
    patch = crop_region(frame, CropTransform(10.0, 5.0, 1.0, 20))
    np.testing.assert_array_equal(patch, (frame[5:25, 10:30].astype(np.float32) * np.float32(1 / 255)).transpose(2, 0, 1))


def test_interior_crop_has_no_padding():
    frame = np.full((200, 200, 3), 17, np.uint8)
    frame[100, 100] = 200
    patch, _ = crop_search_region(frame, Box(68, 68, 64, 64), 2.0, 64)
    assert patch.min() == pytest.approx(17 / 255)


def test_corner_padding_uses_exact_mean_color():
    rng = np.random.default_rng(1)
    frame = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    box = Box(0, 0, 10, 10)
    patch, t = crop_search_region(frame, box, 5.0, 50)
    mean = (frame.astype(np.float32) * np.float32(1 / 255)).reshape(-1, 3).mean(axis=0, dtype=np.float64).astype(np.float32)
    # crop pixel centers left of / above the frame are padding
    cols = (np.arange(50) + 0.5) / t.zoom + t.offset_x < 0
    assert cols.any()
    for c in range(3):
        assert np.all(patch[c][:, cols] == mean[c])
        assert np.all(patch[c][cols, :] == mean[c])
    back = t.crop_to_image(t.image_to_crop(box))
    np.testing.assert_allclose(back.as_array(), box.as_array(), atol=0.5)


def test_round_trip_on_random_boxes():
    rng = np.random.default_rng(2)
    frame = np.zeros((16, 16, 3), np.uint8)
    for _ in range(1000):
        b = Box(*rng.uniform(-50, 300, 2), *rng.uniform(1, 120, 2))
        _, t = crop_search_region(frame, Box(*rng.uniform(0, 200, 2), *rng.uniform(2, 80, 2)), rng.uniform(1, 6), 80)
        back = t.crop_to_image(t.image_to_crop(b))
        assert np.max(np.abs(back.as_array() - b.as_array())) <= 0.5


def test_crop_maps_box_to_the_crop_center():
    frame = np.zeros((300, 300, 3), np.uint8)
    box = Box(100, 120, 40, 10)
    _, t = crop_search_region(frame, box, 5.0, 80)
    c = t.image_to_crop(box)
    assert c.center == pytest.approx((40.0, 40.0))
    assert np.sqrt(c.w * c.h) == pytest.approx(16.0)


def test_zero_area_box_rejected():
    frame = np.zeros((50, 50, 3), np.uint8)
    for b in (Box(10, 10, 0, 5), Box(10, 10, 5, 0), Box(10, 10, -3, 5), Box(np.nan, 1, 2, 2)):
        with pytest.raises(ValueError):
            crop_search_region(frame, b, 2.0, 32)


def test_float_frames_match_uint8_frames():
    f = generate_sequence(4).frames[0]
    a, _ = crop_search_region(f, Box(30, 30, 20, 20), 5.0, 80)
    b, _ = crop_search_region(f.astype(np.float32) * np.float32(1 / 255), Box(30, 30, 20, 20), 5.0, 80)
    assert a.tobytes() == b.tobytes()


# --- triplets --------------------------------------------------------------------
def test_stage1_triplets_are_ordered_visible_and_present():
    rng = stream(0, 99)
    s = generate_sequence(11, SceneParams(occlusion_prob=0.05))
    for _ in range(200):
        t = sample_triplet(s, rng, 1)
        i, j, k = t.frames
        assert i <= j < k
        assert s.visible[[i, j, k]].all()
        assert t.target_present


def test_stage1_gt_box_in_search_crop_coordinates():
    rng = stream(0, 98)
    s = generate_sequence(12)
    t = sample_triplet(s, rng, 1)
    b = t.gt_box
    assert t.search.shape == (3, 80, 80) and t.template_init.shape == (3, 32, 32)
    # jitter is at most 10% of the side, so the target center stays within the middle 20%
    assert abs(b.center[0] - 40) <= 8 + 1e-9 and abs(b.center[1] - 40) <= 8 + 1e-9
    # scale jitter is at most 5%
    assert 16 / 1.05 - 1e-9 <= np.sqrt(b.w * b.h) <= 16 / 0.95 + 1e-9


def test_stage2_labels_follow_visibility():
    rng = stream(0, 97)
    s = generate_sequence(13, SceneParams(frames=80, occlusion_prob=0.05))
    assert (~s.visible).sum() > 0
    drawn = [sample_triplet(s, rng, 2) for _ in range(400)]
    assert all(s.visible[t.frames[2]] == t.target_present for t in drawn)
    assert all(s.visible[t.frames[0]] and s.visible[t.frames[1]] for t in drawn)
    assert all(t.frames[0] <= t.frames[1] < t.frames[2] for t in drawn)


def test_stage2_positive_fraction_from_the_sampler():
    src = TripletSource(seed=3, stage=2, params=SceneParams(frames=40, occlusion_prob=0.05), augment=False)
    small = SceneParams(frames=60, height=32, width=32, min_size=6, max_size=10, occlusion_prob=0.05)
    seq = generate_sequence(21, small)
    rng = stream(1, 2)
    sizes = CropSizes(template=4, search=8)
    present = [sample_triplet(seq, rng, 2, sizes).target_present for _ in range(10_000)]
    assert abs(np.mean(present) - 0.5) <= 0.02
    assert src.batch(4).present.shape == (4,)


def test_insufficient_frames_rejected():
    rng = stream(0, 1)
    s = generate_sequence(1, SceneParams(frames=40, occlusion_prob=1.0, occlusion_len=40))
    with pytest.raises(InsufficientFrames):
        sample_triplet(s, rng, 1)
    with pytest.raises(InsufficientFrames):
        sample_triplet(generate_sequence(1, SceneParams(frames=2)), rng, 1)
    all_visible = generate_sequence(2, SceneParams(frames=20))
    with pytest.raises(InsufficientFrames):
        for _ in range(50):  # any negative draw must fail
            sample_triplet(all_visible, rng, 2)
    with pytest.raises(ValueError):
        sample_triplet(all_visible, rng, 3)


# --- augmentation ----------------------------------------------------------------
def _triplet(seed=0):
    rng = np.random.default_rng(seed)
    return TrainingTriplet(
        rng.random((3, 8, 8), dtype=np.float32),
        rng.random((3, 8, 8), dtype=np.float32),
        rng.random((3, 20, 20), dtype=np.float32),
        Box(3.0, 4.0, 5.0, 6.0),
        True,
    )


def test_flip_twice_is_identity():
    t = _triplet()
    img, box = flip_horizontal(*flip_horizontal(t.search, t.gt_box))
    assert np.array_equal(img, t.search)
    assert box == t.gt_box


def test_flip_reflects_corners():
    img = np.zeros((3, 10, 20), np.float32)
    _, b = flip_horizontal(img, Box.from_corners(2, 1, 7, 4))
    assert b.corners == (13, 1, 18, 4)


def test_brightness_one_is_unchanged_and_clamped_otherwise():
    t = _triplet()
    assert scale_brightness(t.search, 1.0) is t.search
    brighter = scale_brightness(t.search, 1.2)
    assert brighter.max() <= 1.0 and brighter.dtype == np.float32
    np.testing.assert_allclose(brighter, np.minimum(t.search * 1.2, 1.0), rtol=1e-6)


def test_augment_flips_only_the_search_crop():
    t = _triplet()
    flips = 0
    for seed in range(200):
        out = augment(t, np.random.default_rng(seed), brightness=(1.0, 1.0))
        assert np.array_equal(out.template_init, t.template_init)
        assert np.array_equal(out.template_dyn, t.template_dyn)
        if out.gt_box != t.gt_box:
            flips += 1
            assert np.array_equal(out.search, t.search[..., ::-1])
    assert 60 < flips < 140


def test_augment_brightness_range():
    t = _triplet()
    t.search[:] = 0.5
    seen = [augment(t, np.random.default_rng(s), flip_prob=0.0).search.mean() / 0.5 for s in range(300)]
    assert 0.8 - 1e-6 <= min(seen) and max(seen) <= 1.2 + 1e-6
    assert max(seen) - min(seen) > 0.3


def test_sources_are_deterministic_and_batches_collate():
    a = TripletSource(seed=5, stage=1).batch(3)
    b = TripletSource(seed=5, stage=1).batch(3)
    assert a.search.tobytes() == b.search.tobytes() and a.gt.tobytes() == b.gt.tobytes()
    assert a.search.shape == (3, 3, 80, 80) and a.template_dyn.shape == (3, 3, 32, 32)
    assert np.all(a.present == 1.0)
    assert np.all((a.gt >= 0) & (a.gt <= 1))
    c = collate([_triplet(), _triplet(1)])
    np.testing.assert_allclose(c.gt[0], np.array([3, 4, 8, 10]) / 20)


def test_source_limit_stops():
    src = TripletSource(seed=0, stage=1, limit=2, augment=False)
    src.next_triplet()
    src.next_triplet()
    with pytest.raises(StopIteration):
        src.next_triplet()


def test_sequence_length_mismatch_rejected():
    with pytest.raises(ValueError):
        SyntheticSequence([np.zeros((4, 4, 3), np.uint8)], np.zeros((2, 4)), [True, True])
