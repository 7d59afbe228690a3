import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shelfloc.data_model import BoundingBox, ClassCatalog, InvalidInputError, iou
from shelfloc.imaging import save_png
from shelfloc.ingestion import (
    InstanceImage,
    ManifestError,
    SamplingExhaustedError,
    StratificationError,
    extract_background_patches,
    load_manifest,
    patch_box,
    split_train_val,
    write_manifest,
)


def _img(h=16, w=12, value=0):
    return np.full((h, w, 3), value, dtype=np.uint8)


@pytest.fixture
def manifest_dir(tmp_path):
    cat = ClassCatalog(("cola", "chips"))
    for i in range(3):
        save_png(_img(value=i * 40), tmp_path / f"inst/{i}.png")
    save_png(_img(100, 200), tmp_path / "shelf/a.png")
    write_manifest(
        tmp_path,
        cat,
        instances=[("inst/0.png", "cola"), ("inst/1.png", "chips"), ("inst/2.png", "background")],
        annotations=[
            ("shelf/a.png", "cola", BoundingBox(10, 10, 40, 60)),
            ("shelf/a.png", "chips", BoundingBox(180, 50, 250, 120)),
        ],
    )
    return tmp_path


def test_load_manifest_counts_and_clipping(manifest_dir):
    m = load_manifest(manifest_dir)
    assert m.counts == (3, 1, 2)
    assert m.catalog.labels == ("background", "cola", "chips")
    assert [r.class_id for r in m.instances] == [1, 2, 0]
    shelf = m.shelves[0]
    assert (shelf.width, shelf.height, shelf.split) == (200, 100, "test")
    assert shelf.annotations[1].box.as_tuple() == (180, 50, 200, 100)
    assert len(m.load_instances()) == 3


def test_load_manifest_idempotent(manifest_dir):
    assert load_manifest(manifest_dir) == load_manifest(manifest_dir / "classes.txt")


def test_missing_image_named_in_error(manifest_dir):
    with open(manifest_dir / "instances.csv", "a") as fh:
        fh.write("inst/missing.png,cola\n")
    with pytest.raises(ManifestError, match="inst/missing.png"):
        load_manifest(manifest_dir)


def test_unknown_annotation_class(manifest_dir):
    with open(manifest_dir / "annotations.csv", "a") as fh:
        fh.write("shelf/a.png,soap,0,0,5,5\n")
    with pytest.raises(ManifestError, match="line 4.*soap"):
        load_manifest(manifest_dir)


def test_malformed_row(manifest_dir):
    with open(manifest_dir / "annotations.csv", "a") as fh:
        fh.write("shelf/a.png,cola,0,zero,5,5\n")
    with pytest.raises(ManifestError, match="malformed"):
        load_manifest(manifest_dir)


def test_shelf_split_tags(manifest_dir):
    save_png(_img(50, 50), manifest_dir / "shelf/bg.png")
    (manifest_dir / "shelves.csv").write_text("path,split\nshelf/bg.png,background\n")
    m = load_manifest(manifest_dir)
    assert [s.path for s in m.shelves_with_split("background")] == ["shelf/bg.png"]
    assert len(m.annotations("test")) == 2


def test_background_patches_fully_covered_shelf_exhausts():
    shelf = _img(40, 40)
    with pytest.raises(SamplingExhaustedError) as info:
        extract_background_patches([shelf], [[BoundingBox(0, 0, 40, 40)]], 3, (10, 10), 0.0, 0, max_attempts=500)
    assert info.value.attempts == 500


def test_background_patches_without_annotations():
    patches = extract_background_patches([_img(60, 80)], [[]], 25, (16, 12), 0.0, seed=3)
    assert len(patches) == 25
    assert all(p.class_id == 0 and p.image.shape == (16, 12, 3) for p in patches)


def test_background_patches_respect_overlap_limit():
    shelf = np.random.default_rng(0).integers(0, 255, size=(120, 160, 3), dtype=np.uint8)
    ann = [BoundingBox(60, 40, 100, 80)]
    patches = extract_background_patches([shelf], [ann], 100, (24, 24), 0.1, seed=1, size_jitter=0.3)
    assert len(patches) == 100
    for p in patches:
        k, box = patch_box(p)
        assert iou(box, ann[0]) <= 0.1
        np.testing.assert_array_equal(
            p.image, shelf[int(box.y_min):int(box.y_max), int(box.x_min):int(box.x_max)]
        )


def test_background_patches_deterministic():
    shelf = np.random.default_rng(0).integers(0, 255, size=(50, 50, 3), dtype=np.uint8)
    a = extract_background_patches([shelf], [[]], 5, (10, 10), 0.0, seed=9)
    b = extract_background_patches([shelf], [[]], 5, (10, 10), 0.0, seed=9)
    assert [p.source_id for p in a] == [p.source_id for p in b]


def test_background_patch_argument_checks():
    with pytest.raises(InvalidInputError):
        extract_background_patches([], [], 1, (10, 10), 0.0, 0)
    with pytest.raises(InvalidInputError):
        extract_background_patches([_img()], [[]], 1, (10, 10), 1.0, 0)


def _instances(per_class, classes):
    return [InstanceImage(_img(), c, f"{c}-{i}") for c in range(classes) for i in range(per_class)]


def test_split_stratified_counts():
    insts = _instances(10, 10)
    train, val = split_train_val(insts, 0.2, seed=0)
    assert (len(train), len(val)) == (80, 20)
    for c in range(10):
        assert sum(v.class_id == c for v in val) == 2


def test_split_deterministic():
    insts = _instances(10, 3)
    a = split_train_val(insts, 0.3, seed=4)
    b = split_train_val(insts, 0.3, seed=4)
    assert [x.source_id for x in a[1]] == [x.source_id for x in b[1]]


@pytest.mark.parametrize("frac", [0.0, 1.0, -0.1])
def test_split_rejects_fraction(frac):
    with pytest.raises(InvalidInputError):
        split_train_val(_instances(4, 2), frac, 0)


def test_split_single_instance_class():
    insts = _instances(3, 2) + [InstanceImage(_img(), 5, "lonely")]
    with pytest.raises(StratificationError):
        split_train_val(insts, 0.2, 0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.integers(2, 12), min_size=1, max_size=6),
    st.floats(0.05, 0.95),
    st.integers(0, 2**31 - 1),
)
def test_split_is_partition(sizes, frac, seed):
    insts = [InstanceImage(_img(), c, f"{c}-{i}") for c, n in enumerate(sizes) for i in range(n)]
    train, val = split_train_val(insts, frac, seed)
    ids_t = {x.source_id for x in train}
    ids_v = {x.source_id for x in val}
    assert not ids_t & ids_v
    assert ids_t | ids_v == {x.source_id for x in insts}
    for c, n in enumerate(sizes):
        got = sum(x.class_id == c for x in val)
        assert abs(got - n * frac) <= 1
