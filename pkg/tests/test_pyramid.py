import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelfloc.data_model import ClassCatalog, InvalidInputError, ScoreMask
from shelfloc.fcn import TINY_STAGES, ConfigurationError, FcnConfig, build_fcn, forward_mask, train_fcn
from shelfloc.imaging import resize
from shelfloc.ingestion import InstanceImage, split_train_val
from shelfloc.pyramid import (
    PyramidConfig,
    build_pyramid,
    fuse_pyramid,
    level_sizes,
    pyramid_forward,
    resize_mask,
    single_scale_forward,
)
from shelfloc.toy import place_products
from shelfloc.training import TrainingHyperparams


def test_level_count_example():
    sizes = level_sizes((1200, 1600), PyramidConfig(1.5, (64, 128)))
    assert len(sizes) == 7
    assert sizes[0] == (1200, 1600)
    assert sizes[6] == (int(1200 / 1.5**6), int(1600 / 1.5**6))


def test_pyramid_boundaries():
    img = np.zeros((64, 128, 3), np.uint8)
    levels = build_pyramid(img, PyramidConfig(min_hw=(64, 128)))
    assert len(levels) == 1 and levels[0].shape == img.shape
    with pytest.raises(InvalidInputError):
        build_pyramid(np.zeros((63, 128, 3), np.uint8), PyramidConfig(min_hw=(64, 128)))
    with pytest.raises(ConfigurationError):
        PyramidConfig(downscale=1.0)
    with pytest.raises(ConfigurationError):
        PyramidConfig(max_levels=0)


def _closed_form_levels(H, W, h0, w0, f, cap):
    k = 0
    while np.floor(H / f ** (k + 1)) >= h0 and np.floor(W / f ** (k + 1)) >= w0:
        k += 1
    return min(k + 1, cap)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(20, 3000), st.integers(20, 3000), st.integers(8, 200), st.integers(8, 200),
    st.floats(1.05, 3.0), st.integers(1, 12),
)
def test_level_count_formula(H, W, h0, w0, f, cap):
    if H < h0 or W < w0:
        return
    sizes = level_sizes((H, W), PyramidConfig(f, (h0, w0), cap))
    assert len(sizes) == _closed_form_levels(H, W, h0, w0, f, cap)
    assert all(h >= h0 and w >= w0 for h, w in sizes)


def test_build_pyramid_shapes():
    img = np.random.default_rng(0).integers(0, 256, (300, 400, 3), dtype=np.uint8)
    levels = build_pyramid(img, PyramidConfig(1.5, (32, 24)))
    assert [lv.shape[:2] for lv in levels] == level_sizes((300, 400), PyramidConfig(1.5, (32, 24)))
    assert levels[0] is img


def _const(value, channels=2, hw=(3, 5)):
    v = np.zeros((channels, *hw), np.float32)
    v[0] = value
    v[1] = 1 - value
    return ScoreMask(v)


def test_fusion_examples():
    m = _const(0.2)
    np.testing.assert_array_equal(fuse_pyramid([m], (3, 5)).values, m.values)
    np.testing.assert_array_equal(fuse_pyramid([m, m], (30, 50)).values, fuse_pyramid([m], (30, 50)).values)
    fused = fuse_pyramid([_const(0.2), _const(0.6, hw=(2, 2))], (40, 60))
    np.testing.assert_allclose(fused.values[0], 0.4, atol=1e-6)
    with pytest.raises(InvalidInputError):
        fuse_pyramid([], (4, 4))
    with pytest.raises(InvalidInputError):
        fuse_pyramid([_const(0.2), ScoreMask(np.full((3, 2, 2), 1 / 3))], (4, 4))


def _random_softmax(rng, channels, hw):
    logits = rng.normal(size=(channels, *hw)) * 2
    e = np.exp(logits)
    return ScoreMask((e / e.sum(0)).astype(np.float32))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(2, 5))
def test_fusion_bounds_and_channel_sums(seed, n_levels, channels):
    rng = np.random.default_rng(seed)
    target = (int(rng.integers(8, 60)), int(rng.integers(8, 60)))
    masks = [_random_softmax(rng, channels, (int(rng.integers(1, 12)), int(rng.integers(1, 12)))) for _ in range(n_levels)]
    fused = fuse_pyramid(masks, target).values
    resized = np.stack([resize_mask(m, target) for m in masks])
    assert (fused >= resized.min(0) - 1e-6).all()
    assert (fused <= resized.max(0) + 1e-6).all()
    np.testing.assert_allclose(fused.sum(0), 1.0, atol=1e-4)


@pytest.fixture(scope="module")
def mini_model():
    return build_fcn(FcnConfig(num_classes=2, backbone=TINY_STAGES, final_kernel=(2, 2), seed=1))


def test_pyramid_composition(mini_model):
    img = np.random.default_rng(1).integers(0, 256, (90, 130, 3), dtype=np.uint8)
    cfg = PyramidConfig.for_model(mini_model)
    manual = fuse_pyramid([forward_mask(mini_model, lv) for lv in build_pyramid(img, cfg)], img.shape[:2])
    assert pyramid_forward(mini_model, img, cfg) == manual
    one = PyramidConfig.for_model(mini_model, max_levels=1)
    expected = resize_mask(forward_mask(mini_model, img), img.shape[:2])
    np.testing.assert_array_equal(pyramid_forward(mini_model, img, one).values, expected)
    assert single_scale_forward(mini_model, img, cfg) == pyramid_forward(mini_model, img, one)
    np.testing.assert_allclose(pyramid_forward(mini_model, img, cfg).channel_sums(), 1.0, atol=1e-4)


def _texture(kind, h, w, rng, cell=3):
    yy, xx = np.mgrid[0:h, 0:w]
    ph = rng.integers(2 * cell)
    if kind == "checker":
        on = ((yy + ph) // cell + (xx + ph) // cell) % 2 == 0
    elif kind == "stripe":
        on = ((yy + ph) // cell) % 2 == 0
    else:
        on = np.zeros((h, w), bool)
    lo, hi = rng.uniform(20, 80), rng.uniform(170, 235)
    img = np.where(on, hi, lo if kind != "flat" else hi)[..., None] + rng.normal(0, 6, (h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def test_pyramid_recovers_instance_beyond_level0_scale():
    # classes differ only in texture, so an instance enlarged 2.25x reads as
    # something else at full resolution and is recovered by the coarser levels
    rng = np.random.default_rng(0)
    cat = ClassCatalog(("checker", "stripe"))
    insts = [
        InstanceImage(_texture(kind, 32, 24, rng), cid, f"{kind}{i}")
        for cid, kind in ((1, "checker"), (2, "stripe"), (0, "flat"))
        for i in range(80)
    ]
    train, val = split_train_val(insts, 0.2, 0)
    model = build_fcn(FcnConfig(2, True, (4, 3), TINY_STAGES, seed=0), cat)
    hp = TrainingHyperparams(learning_rate=0.01, patience=8, max_epochs=40, augment_scale=0.5)
    model, _ = train_fcn(model, train, val, hp)

    canvas = np.full((256, 352, 3), 128, np.uint8)
    small = _texture("checker", 32, 24, rng)
    large = resize(_texture("checker", 32, 24, rng), (72, 54), "nearest")
    boxes = place_products(canvas, [(1, small, (40, 100)), (1, large, (200, 80))])
    cfg = PyramidConfig.for_model(model, max_levels=3)
    fused = pyramid_forward(model, canvas, cfg).values[1]
    level0 = single_scale_forward(model, canvas, cfg).values[1]
    centers = [(int(b.center[1]), int(b.center[0])) for _, b in boxes]
    assert all(fused[c] > 0.5 for c in centers)
    assert any(level0[c] < 0.5 for c in centers)
