"""Synthetic planogram shelves with exact per-pixel ground truth.

Products are pasted as opaque rectangles, left to right along evenly spaced
row baselines, never overlapping one another or a neighbouring row.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data_model import BoundingBox, ClassCatalog, InvalidInputError
from .imaging import load_rgb, resize, save_png
from .ingestion import InstanceImage


class GenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    catalog: ClassCatalog
    product_pool: Mapping[int, Sequence[InstanceImage]] = field(repr=False)
    background_pool: Sequence[np.ndarray] = field(default=(), repr=False)
    background_mode: str = "pool"
    canvas_small_hw: tuple[int, int] = (1200, 2000)
    canvas_large_hw: tuple[int, int] = (2000, 3000)
    large_canvas_min_rows: int = 4
    rows_range: tuple[int, int] = (2, 5)
    columns_range: tuple[int, int] = (3, 12)
    scale_range: tuple[float, float] = (0.5, 1.1)
    jitter: float = 0.3
    start_offset: float = 0.05
    board_fraction: float = 0.05
    row_baselines: tuple[float, ...] | None = None
    samples: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.background_mode not in ("pool", "stripes", "black"):
            raise InvalidInputError(f"unknown background_mode {self.background_mode!r}")
        if self.background_mode == "pool" and not self.background_pool:
            # built-in shelf stripes stand in for an empty pool
            self.background_mode = "stripes"
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise InvalidInputError(f"scale range must be positive and ordered, got {self.scale_range}")
        for name in ("rows_range", "columns_range"):
            a, b = getattr(self, name)
            if not 1 <= a <= b:
                raise InvalidInputError(f"{name} must satisfy 1 <= min <= max, got {(a, b)}")
        if not self.product_pool or not all(self.product_pool.get(c) for c in self.catalog.positive_ids):
            raise InvalidInputError("product pool needs at least one instance per positive class")
        if any(c not in self.catalog.positive_ids for c in self.product_pool):
            raise InvalidInputError("product pool keys must be positive class ids")
        if self.jitter < 0 or self.start_offset < 0 or not 0 <= self.board_fraction < 1:
            raise InvalidInputError("jitter, start_offset and board_fraction must be non-negative")
        if self.samples < 1:
            raise InvalidInputError("samples must be >= 1")

    def canvas_hw(self, rows: int) -> tuple[int, int]:
        return tuple(self.canvas_large_hw if rows >= self.large_canvas_min_rows else self.canvas_small_hw)

    def snapshot(self) -> dict:
        """JSON-serializable provenance record (pools summarized by size)."""
        return {
            "catalog": self.catalog.to_dict(),
            "product_pool_sizes": {self.catalog.name(c): len(v) for c, v in sorted(self.product_pool.items())},
            "background_pool_size": len(self.background_pool),
            "background_mode": self.background_mode,
            "canvas_small_hw": list(self.canvas_small_hw),
            "canvas_large_hw": list(self.canvas_large_hw),
            "large_canvas_min_rows": self.large_canvas_min_rows,
            "rows_range": list(self.rows_range),
            "columns_range": list(self.columns_range),
            "scale_range": list(self.scale_range),
            "jitter": self.jitter,
            "start_offset": self.start_offset,
            "board_fraction": self.board_fraction,
            "row_baselines": list(self.row_baselines) if self.row_baselines else None,
            "samples": self.samples,
            "seed": self.seed,
        }


@dataclass(eq=False)
class SyntheticSample:
    image: np.ndarray = field(repr=False)
    gt_mask: np.ndarray = field(repr=False)
    boxes: list[tuple[int, BoundingBox]]
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, SyntheticSample):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and np.array_equal(self.gt_mask, other.gt_mask)
            and self.boxes == other.boxes
        )


@dataclass
class SynthManifest:
    sample_ids: list[str]
    seeds: list[int]
    class_counts: dict[int, int]


def _row_bands(rows: int, H: int, config: SynthConfig) -> list[tuple[int, int]]:
    """(top, baseline) pixel rows for each shelf row; baseline is exclusive."""
    if config.row_baselines:
        if len(config.row_baselines) < rows:
            raise GenerationError(f"{rows} rows drawn but only {len(config.row_baselines)} baselines configured")
        bottoms = [round(f * H) for f in config.row_baselines[:rows]]
    else:
        bottoms = [round((r + 1) * H / rows) for r in range(rows)]
    bands, top = [], 0
    for b in bottoms:
        board = round(config.board_fraction * (b - top))
        bands.append((top, b - board))
        top = b
    return bands


def shelf_stripes(hw: tuple[int, int], bands: Sequence[tuple[int, int]], rng: np.random.Generator) -> np.ndarray:
    """Flat-shaded empty shelf: a wall colour with darker boards under each row."""
    H, W = hw
    wall = rng.integers(120, 230, size=3).astype(np.float64)
    board = wall * rng.uniform(0.35, 0.6)
    ramp = np.linspace(0.85, 1.0, H)[:, None, None]
    img = np.repeat(wall[None, None, :] * ramp, W, axis=1)
    tops = [t for t, _ in bands[1:]] + [H]
    for (_, base), next_top in zip(bands, tops):
        img[base:max(next_top, base + 1)] = board
    return np.clip(img, 0, 255).astype(np.uint8)


def _background(config: SynthConfig, hw, bands, rng) -> np.ndarray:
    if config.background_mode == "black":
        return np.zeros(hw + (3,), dtype=np.uint8)
    if config.background_mode == "stripes":
        return shelf_stripes(hw, bands, rng)
    bg = config.background_pool[int(rng.integers(len(config.background_pool)))]
    return resize(np.asarray(bg, dtype=np.uint8), hw, "area")


def generate_shelf(config: SynthConfig, seed: int) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    catalog = config.catalog
    rows = int(rng.integers(config.rows_range[0], config.rows_range[1] + 1))
    H, W = config.canvas_hw(rows)
    bands = _row_bands(rows, H, config)
    image = _background(config, (H, W), bands, rng).copy()
    gt = np.zeros((H, W), dtype=np.uint8 if catalog.num_channels < 256 else np.uint16)
    class_ids = sorted(config.product_pool)
    boxes: list[tuple[int, BoundingBox]] = []
    for top, base in bands:
        cols = int(rng.integers(config.columns_range[0], config.columns_range[1] + 1))
        x = rng.uniform(0, config.start_offset * W)
        for _ in range(cols):
            cid = class_ids[int(rng.integers(len(class_ids)))]
            pool = config.product_pool[cid]
            product = pool[int(rng.integers(len(pool)))].image
            s = rng.uniform(*config.scale_range)
            gap = rng.uniform(0, config.jitter)
            ph, pw = round(product.shape[0] * s), round(product.shape[1] * s)
            x0 = math.ceil(x + gap * pw)
            if ph < 1 or pw < 1 or ph > base - top or x0 + pw > W:
                continue
            y0 = base - ph
            image[y0:base, x0:x0 + pw] = resize(product, (ph, pw), "area")
            gt[y0:base, x0:x0 + pw] = catalog.mask_label(cid)
            boxes.append((cid, BoundingBox(x0, y0, x0 + pw, base)))
            x = x0 + pw
    if not boxes:
        raise GenerationError(
            f"no product fits a {H}x{W} canvas with {rows} rows at scales {config.scale_range}"
        )
    return SyntheticSample(image, gt, boxes, seed)


def generate_dataset(config: SynthConfig) -> tuple[list[SyntheticSample], SynthManifest]:
    samples = [generate_shelf(config, config.seed + i) for i in range(config.samples)]
    counts = Counter(cid for s in samples for cid, _ in s.boxes)
    manifest = SynthManifest(
        sample_ids=[f"{i:05d}" for i in range(config.samples)],
        seeds=[s.seed for s in samples],
        class_counts={c: counts.get(c, 0) for c in config.catalog.positive_ids},
    )
    return samples, manifest


def write_dataset(samples: Sequence[SyntheticSample], out_dir, config: SynthConfig) -> Path:
    """images/NNNNN.png, masks/NNNNN.png, boxes.csv and config.json under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    names = config.catalog.labels
    with open(out / "boxes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class", "x_min", "y_min", "x_max", "y_max"])
        for i, s in enumerate(samples):
            sid = f"{i:05d}"
            save_png(s.image, out / "images" / f"{sid}.png")
            save_png(s.gt_mask, out / "masks" / f"{sid}.png")
            for cid, b in s.boxes:
                w.writerow([sid, names[cid], *(f"{c:g}" for c in b.as_tuple())])
    (out / "config.json").write_text(json.dumps(config.snapshot(), indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(out_dir) -> tuple[ClassCatalog, list[SyntheticSample]]:
    from PIL import Image

    out = Path(out_dir)
    snap = json.loads((out / "config.json").read_text())
    catalog = ClassCatalog.from_dict(snap["catalog"])
    boxes: dict[str, list] = {}
    with open(out / "boxes.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            b = BoundingBox(*(float(row[k]) for k in ("x_min", "y_min", "x_max", "y_max")))
            boxes.setdefault(row["sample_id"], []).append((catalog.class_id(row["class"]), b))
    samples = []
    for p in sorted((out / "images").glob("*.png")):
        with Image.open(out / "masks" / p.name) as m:
            gt = np.asarray(m).copy()
        samples.append(SyntheticSample(load_rgb(p), gt, boxes.get(p.stem, [])))
    return catalog, samples


def rasterize_boxes(sample: SyntheticSample, catalog: ClassCatalog) -> np.ndarray:
    """Index mask reconstructed from the box list alone."""
    out = np.zeros_like(sample.gt_mask)
    for cid, b in sample.boxes:
        out[int(b.y_min):int(b.y_max), int(b.x_min):int(b.x_max)] = catalog.mask_label(cid)
    return out
