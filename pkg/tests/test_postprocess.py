import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bfs_components, box_iou
from shelfloc.data_model import BoundingBox, ClassCatalog, Detection, InvalidInputError, ScoreMask, iou
from shelfloc.postprocess import (
    DetectParams,
    binarize,
    connected_components,
    detections_from_mask,
    nms,
    read_detections,
    window_sizes,
    write_detections,
)


def test_binarize_examples():
    assert not binarize(np.full((3, 3), 0.4), 0.5).any()
    assert binarize(np.array([[0.5]]), 0.5)[0, 0]
    g = np.zeros((4, 4))
    g[1:3, 2:4] = 0.8
    expected = np.zeros((4, 4), bool)
    expected[1:3, 2:4] = True
    np.testing.assert_array_equal(binarize(g, 0.5), expected)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.2, 1.3])
def test_binarize_threshold_range(t):
    with pytest.raises(InvalidInputError):
        binarize(np.zeros((2, 2)), t)


def test_components_examples():
    assert connected_components(np.zeros((5, 5), bool)) == []
    g = np.zeros((15, 15), bool)
    g[0:3, 0:3] = True
    g[10:13, 10:13] = True
    comps = connected_components(g, 8)
    assert [c.box.as_tuple() for c in comps] == [(0, 0, 3, 3), (10, 10, 13, 13)]
    assert [c.area for c in comps] == [9, 9]
    diag = np.array([[1, 0], [0, 1]], bool)
    assert len(connected_components(diag, 8)) == 1
    assert len(connected_components(diag, 4)) == 2


def test_components_bad_connectivity():
    with pytest.raises(InvalidInputError):
        connected_components(np.zeros((2, 2), bool), 6)


@pytest.mark.parametrize("connectivity", [4, 8])
def test_components_match_bfs_on_random_grids(connectivity):
    rng = np.random.default_rng(connectivity)
    for _ in range(100):
        h, w = rng.integers(1, 65, size=2)
        grid = rng.random((h, w)) < rng.uniform(0.1, 0.7)
        ours = {frozenset(map(tuple, c.pixels.tolist())) for c in connected_components(grid, connectivity)}
        assert ours == set(bfs_components(grid, connectivity))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_components_idempotent_under_rebinarization(h, w, seed):
    grid = np.random.default_rng(seed).random((h, w)) < 0.4
    comps = connected_components(grid)
    rebuilt = np.zeros_like(grid)
    for c in comps:
        rebuilt[c.pixels[:, 0], c.pixels[:, 1]] = True
        sub = np.zeros_like(grid)
        sub[c.pixels[:, 0], c.pixels[:, 1]] = True
        again = connected_components(binarize(sub.astype(float), 0.5))
        assert len(again) == 1 and again[0].area == c.area
    np.testing.assert_array_equal(rebuilt, grid)


def _mask(h, w, channels=2):
    v = np.zeros((channels, h, w), np.float32)
    v[0] = 1.0
    return v


def test_uniform_background_gives_nothing():
    cat = ClassCatalog(("a",))
    assert detections_from_mask(ScoreMask(_mask(20, 30)), DetectParams(), "img", cat) == []


def test_single_blob_mapped_to_image():
    cat = ClassCatalog(("a",))
    v = _mask(50, 80)
    v[:, 10:30, 40:70] = [[[0.1]], [[0.9]]]
    dets = detections_from_mask(ScoreMask(v), DetectParams(), "img", cat, image_hw=(200, 400))
    assert len(dets) == 1
    d = dets[0]
    assert d.class_id == 1 and d.score == pytest.approx(0.9)
    # blob (40, 10, 70, 30) in cells; cells are 5x4 pixels
    assert d.box.as_tuple() == pytest.approx((200, 40, 350, 120))


def test_small_blob_filtered():
    cat = ClassCatalog(("a",))
    v = _mask(100, 100)
    v[:, 5, 5] = [0.2, 0.8]
    assert detections_from_mask(ScoreMask(v), DetectParams(min_area=2), "i", cat) == []
    assert len(detections_from_mask(ScoreMask(v), DetectParams(min_area=1), "i", cat)) == 1


def test_detection_invariants_random_masks():
    cat = ClassCatalog(("a", "b", "c"))
    rng = np.random.default_rng(1)
    params = DetectParams(threshold=0.4, class_thresholds={2: 0.6})
    for _ in range(30):
        logits = rng.normal(size=(4, 12, 18)) * 3
        p = np.exp(logits) / np.exp(logits).sum(0)
        dets = detections_from_mask(ScoreMask(p), params, "x", cat, image_hw=(90, 130))
        for d in dets:
            assert 0 <= d.box.x_min < d.box.x_max <= 130
            assert 0 <= d.box.y_min < d.box.y_max <= 90
            assert d.score >= params.threshold_for(d.class_id)
            assert d.class_id != 0


def _det(box, score, cid=1, img="i"):
    return Detection(img, cid, BoundingBox(*box), score)


def test_nms_examples():
    kept = nms([_det((0, 0, 10, 10), 0.8), _det((0, 0, 10, 10), 0.9)], 0.5)
    assert [d.score for d in kept] == [0.9]
    assert len(nms([_det((0, 0, 10, 10), 0.9), _det((20, 20, 30, 30), 0.8)], 0.5)) == 2


def test_nms_chain():
    # Jaccard distance is a metric, so iou(a,b)=iou(b,c)=0.6 forces iou(a,c) >= 0.2;
    # 1/3 is the feasible stand-in for a weakly overlapping chain end
    a = (0, 0, 10, 10)
    b = (2.5, 0, 12.5, 10)
    c = (5, 0, 15, 10)
    assert box_iou(a, b) == pytest.approx(0.6)
    assert box_iou(b, c) == pytest.approx(0.6)
    assert box_iou(a, c) == pytest.approx(1 / 3)
    kept = nms([_det(a, 0.9), _det(b, 0.8), _det(c, 0.7)], 0.5)
    assert [d.score for d in kept] == [0.9, 0.7]


def test_nms_is_per_class_and_tie_break_stable():
    dets = [_det((5, 0, 15, 10), 0.5), _det((0, 0, 10, 10), 0.5), _det((0, 0, 10, 10), 0.9, cid=2)]
    kept = nms(dets, 0.3)
    assert [(d.class_id, d.box.x_min) for d in kept] == [(2, 0), (1, 0)]


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30), st.floats(0, 1), st.integers(1, 2)),
        max_size=25,
    ),
    st.floats(0.05, 0.95),
)
def test_nms_kept_set_is_antichain(raw, thr):
    dets = [_det((x, y, x + w, y + h), s, cid) for x, y, w, h, s, cid in raw]
    kept = nms(dets, thr)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) <= thr
    # every suppressed detection overlaps some kept same-class detection
    for d in dets:
        if d not in kept:
            assert any(k.class_id == d.class_id and iou(k.box, d.box) > thr for k in kept)


def test_window_sizes_count_and_area():
    sizes = window_sizes((32, 24), (0.8, 1.0, 1.25), (0.5, 0.75, 1.0, 1.33, 2.0))
    assert len(sizes) == 15
    assert (32, 24) in sizes


def test_detection_file_roundtrip(tmp_path):
    cat = ClassCatalog(("a", "b"))
    dets = [_det((1, 2, 3.5, 4), 0.25, 2, "s/x.png"), _det((0, 0, 10, 10), 1.0, 1, "y")]
    path = write_detections(dets, cat, tmp_path / "d.jsonl")
    assert path.read_text().count("\n") == 2
    assert read_detections(path, cat) == dets
