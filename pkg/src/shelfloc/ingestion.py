"""Normalized dataset manifests, background patch mining and stratified splits.

A manifest directory holds:

``classes.txt``
    One class name per line. A line reading ``background`` turns on the
    background channel; every other line is a positive class, in order.
``instances.csv``
    ``path,class`` rows, one single-object crop per row.
``annotations.csv``
    ``image_path,class,x_min,y_min,x_max,y_max`` rows for shelf images.
``shelves.csv`` (optional)
    ``path,split`` rows. Shelves tagged ``background`` are reserved for
    negative patch mining and excluded from testing; shelves that only
    appear in ``annotations.csv`` default to ``test``.

All paths are relative to the manifest directory.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data_model import (
    BACKGROUND,
    Annotation,
    BoundingBox,
    ClassCatalog,
    InvalidInputError,
    clip_box,
    iou,
)
from .imaging import image_size, load_rgb

MIN_INSTANCE_SIDE = 8
SPLITS = ("test", "background", "train", "val")


class ManifestError(ValueError):
    """A manifest row could not be loaded; the message names the record."""


class SamplingExhaustedError(RuntimeError):
    def __init__(self, attempts: int, found: int, requested: int):
        super().__init__(
            f"background sampling exhausted after {attempts} attempts "
            f"({found} of {requested} patches found)"
        )
        self.attempts = attempts


class StratificationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class InstanceImage:
    image: np.ndarray = field(repr=False)
    class_id: int
    source_id: str

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise InvalidInputError(f"{self.source_id}: expected an HxWx3 uint8 image, got {img.shape} {img.dtype}")
        if img.shape[0] < MIN_INSTANCE_SIDE or img.shape[1] < MIN_INSTANCE_SIDE:
            raise InvalidInputError(f"{self.source_id}: instance smaller than {MIN_INSTANCE_SIDE}px: {img.shape[:2]}")

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class InstanceRecord:
    path: str
    class_id: int


@dataclass(frozen=True)
class ShelfRecord:
    path: str
    split: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    catalog: ClassCatalog
    instances: tuple[InstanceRecord, ...]
    shelves: tuple[ShelfRecord, ...]

    @property
    def counts(self) -> tuple[int, int, int]:
        return (len(self.instances), len(self.shelves), sum(len(s.annotations) for s in self.shelves))

    def shelves_with_split(self, split: str) -> list[ShelfRecord]:
        return [s for s in self.shelves if s.split == split]

    def annotations(self, split: str | None = "test") -> list[Annotation]:
        return [a for s in self.shelves if split is None or s.split == split for a in s.annotations]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def load_instances(self) -> list[InstanceImage]:
        return [
            InstanceImage(load_rgb(self.resolve(r.path)), r.class_id, r.path) for r in self.instances
        ]


def _read_csv(path: Path, required: Sequence[str]) -> list[tuple[int, dict]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path.name}: missing columns {missing}")
        # line 1 is the header
        return [(i + 2, row) for i, row in enumerate(reader)]


def _check_file(root: Path, rel: str, where: str) -> Path:
    p = root / rel
    if not rel or not p.is_file():
        raise ManifestError(f"{where}: image file not found: {rel!r}")
    return p


def read_catalog(path) -> ClassCatalog:
    lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
    names = [ln for ln in lines if ln and not ln.startswith("#")]
    include_bg = BACKGROUND in names
    try:
        return ClassCatalog(tuple(n for n in names if n != BACKGROUND), include_bg)
    except InvalidInputError as exc:
        raise ManifestError(f"{Path(path).name}: {exc}") from None


def write_catalog(catalog: ClassCatalog, path) -> None:
    Path(path).write_text("\n".join(catalog.labels) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Load and validate a manifest directory (or the ``classes.txt`` inside it)."""
    path = Path(path)
    root = path if path.is_dir() else path.parent
    classes_file = root / "classes.txt"
    if not classes_file.is_file():
        raise ManifestError(f"manifest header not found: {classes_file}")
    catalog = read_catalog(classes_file)

    instances = []
    inst_file = root / "instances.csv"
    if inst_file.is_file():
        for line, row in _read_csv(inst_file, ("path", "class")):
            where = f"instances.csv line {line}"
            name = (row["class"] or "").strip()
            if name not in catalog.labels:
                raise ManifestError(f"{where}: unknown class {name!r}")
            _check_file(root, row["path"], where)
            instances.append(InstanceRecord(row["path"], catalog.class_id(name)))

    splits: dict[str, str] = {}
    shelf_file = root / "shelves.csv"
    if shelf_file.is_file():
        for line, row in _read_csv(shelf_file, ("path", "split")):
            where = f"shelves.csv line {line}"
            split = (row["split"] or "").strip()
            if split not in SPLITS:
                raise ManifestError(f"{where}: unknown split {split!r}")
            _check_file(root, row["path"], where)
            splits[row["path"]] = split

    per_image: dict[str, list[Annotation]] = defaultdict(list)
    sizes: dict[str, tuple[int, int]] = {}
    ann_file = root / "annotations.csv"
    if ann_file.is_file():
        cols = ("image_path", "class", "x_min", "y_min", "x_max", "y_max")
        for line, row in _read_csv(ann_file, cols):
            where = f"annotations.csv line {line}"
            rel = row["image_path"]
            name = (row["class"] or "").strip()
            if name not in catalog.names:
                raise ManifestError(f"{where}: unknown class {name!r}")
            if rel not in sizes:
                sizes[rel] = image_size(_check_file(root, rel, where))
            try:
                box = BoundingBox(*(float(row[c]) for c in cols[2:]))
                box = clip_box(box, *sizes[rel])
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{where}: malformed box ({exc})") from None
            per_image[rel].append(Annotation(rel, catalog.class_id(name), box))

    shelves = []
    for rel in sorted(set(splits) | set(per_image)):
        if rel not in sizes:
            sizes[rel] = image_size(root / rel)
        w, h = sizes[rel]
        shelves.append(ShelfRecord(rel, splits.get(rel, "test"), w, h, tuple(per_image.get(rel, ()))))
    return DatasetManifest(root, catalog, tuple(instances), tuple(shelves))


def write_manifest(
    root,
    catalog: ClassCatalog,
    instances: Sequence[tuple[str, str]] = (),
    annotations: Sequence[tuple[str, str, BoundingBox]] = (),
    shelves: Sequence[tuple[str, str]] = (),
) -> Path:
    """Write the CSV files of a manifest; image files must be placed by the caller."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_catalog(catalog, root / "classes.txt")
    with open(root / "instances.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "class"])
        w.writerows(instances)
    with open(root / "annotations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_path", "class", "x_min", "y_min", "x_max", "y_max"])
        for rel, name, b in annotations:
            w.writerow([rel, name, *(f"{c:g}" for c in b.as_tuple())])
    if shelves:
        with open(root / "shelves.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "split"])
            w.writerows(shelves)
    return root


def extract_background_patches(
    shelves: Sequence[np.ndarray],
    annotations: Sequence[Sequence[BoundingBox]],
    count: int,
    patch_hw: tuple[int, int],
    max_overlap_iou: float,
    seed: int,
    *,
    size_jitter: float = 0.0,
    background_id: int = 0,
    max_attempts: int | None = None,
) -> list[InstanceImage]:
    """Rejection-sample negative crops whose IoU with every annotation is at most ``max_overlap_iou``.

    Each patch size is ``patch_hw`` scaled by a factor drawn uniformly from
    ``[1 - size_jitter, 1 + size_jitter]``.
    """
    if not shelves:
        raise InvalidInputError("no shelf images to sample from")
    if len(annotations) != len(shelves):
        raise InvalidInputError("annotations must be given per shelf")
    if not 0 <= max_overlap_iou < 1:
        raise InvalidInputError(f"max_overlap_iou must be in [0, 1), got {max_overlap_iou}")
    if not 0 <= size_jitter < 1:
        raise InvalidInputError(f"size_jitter must be in [0, 1), got {size_jitter}")
    if count < 0:
        raise InvalidInputError("count must be non-negative")
    max_attempts = max_attempts if max_attempts is not None else 200 * max(count, 1)
    rng = np.random.default_rng(seed)
    out: list[InstanceImage] = []
    attempts = 0
    while len(out) < count:
        if attempts >= max_attempts:
            raise SamplingExhaustedError(attempts, len(out), count)
        attempts += 1
        k = int(rng.integers(len(shelves)))
        img = shelves[k]
        H, W = img.shape[:2]
        s = rng.uniform(1 - size_jitter, 1 + size_jitter)
        ph = max(MIN_INSTANCE_SIDE, round(patch_hw[0] * s))
        pw = max(MIN_INSTANCE_SIDE, round(patch_hw[1] * s))
        if ph > H or pw > W:
            continue
        y0 = int(rng.integers(H - ph + 1))
        x0 = int(rng.integers(W - pw + 1))
        box = BoundingBox(x0, y0, x0 + pw, y0 + ph)
        if any(iou(box, a) > max_overlap_iou for a in annotations[k]):
            continue
        crop = np.ascontiguousarray(img[y0:y0 + ph, x0:x0 + pw])
        out.append(InstanceImage(crop, background_id, f"shelf{k}:{x0},{y0},{pw},{ph}"))
    return out


def patch_box(patch: InstanceImage) -> tuple[int, BoundingBox]:
    """Recover (shelf index, box) from a background patch's source id."""
    shelf, coords = patch.source_id.removeprefix("shelf").split(":")
    x0, y0, w, h = (int(c) for c in coords.split(","))
    return int(shelf), BoundingBox(x0, y0, x0 + w, y0 + h)


def split_train_val(
    instances: Sequence, val_fraction: float, seed: int
) -> tuple[list, list]:
    """Stratified, seeded train/validation partition preserving input order within each side."""
    if not 0 < val_fraction < 1:
        raise InvalidInputError(f"val_fraction must be in (0, 1), got {val_fraction}")
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, inst in enumerate(instances):
        by_class[inst.class_id].append(i)
    rng = np.random.default_rng(seed)
    val_idx: set[int] = set()
    for cid in sorted(by_class):
        idx = by_class[cid]
        if len(idx) < 2:
            raise StratificationError(f"class {cid} has {len(idx)} instance(s); need at least 2 to stratify")
        n_val = min(max(1, round(len(idx) * val_fraction)), len(idx) - 1)
        chosen = rng.permutation(len(idx))[:n_val]
        val_idx.update(idx[j] for j in chosen)
    train = [x for i, x in enumerate(instances) if i not in val_idx]
    val = [x for i, x in enumerate(instances) if i in val_idx]
    return train, val

