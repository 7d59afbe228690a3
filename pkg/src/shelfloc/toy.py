"""Procedural desk-scale fixture: six textured product classes on synthetic shelves.

Everything here is generated from a seed so the whole pipeline can be
exercised end to end without external data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data_model import BoundingBox, ClassCatalog
from .imaging import save_png
from .ingestion import InstanceImage, write_manifest
from .synth import SynthConfig, generate_shelf

TOY_CLASSES = ("red_hstripe", "green_checker", "blue_dots", "yellow_vstripe", "magenta_diag", "cyan_frame")
_BASE_COLORS = {
    "red_hstripe": (205, 40, 40),
    "green_checker": (40, 170, 60),
    "blue_dots": (40, 70, 200),
    "yellow_vstripe": (225, 205, 40),
    "magenta_diag": (190, 50, 180),
    "cyan_frame": (40, 190, 200),
}
NATIVE_HW = (40, 30)


@dataclass(frozen=True)
class ToySpec:
    seed: int = 0
    instances_per_class: int = 200
    test_shelves: int = 50
    background_shelves: int = 12
    canvas_hw: tuple[int, int] = (288, 448)
    rows_range: tuple[int, int] = (1, 3)
    columns_range: tuple[int, int] = (3, 9)
    test_scale_range: tuple[float, float] = (0.6, 2.6)


def toy_catalog() -> ClassCatalog:
    return ClassCatalog(TOY_CLASSES, include_background=True)


def _texture(name: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean accent pattern for a class, with a random phase and period."""
    yy, xx = np.mgrid[0:h, 0:w]
    p = int(rng.integers(5, 8))
    ph = int(rng.integers(p))
    if name == "red_hstripe":
        return (yy + ph) % p < p // 2
    if name == "yellow_vstripe":
        return (xx + ph) % p < p // 2
    if name == "green_checker":
        return ((yy + ph) // p + (xx + ph) // p) % 2 == 0
    if name == "magenta_diag":
        return (xx + yy + ph) % p < p // 2
    if name == "blue_dots":
        cy, cx = (yy + ph) % p - p / 2, (xx + ph) % p - p / 2
        return cy * cy + cx * cx < (p / 3) ** 2
    if name == "cyan_frame":
        b = max(2, min(h, w) // 6)
        return (yy < b) | (yy >= h - b) | (xx < b) | (xx >= w - b)
    raise KeyError(name)


def render_product(name: str, rng: np.random.Generator, hw: tuple[int, int] = NATIVE_HW) -> np.ndarray:
    jitter = rng.uniform(0.9, 1.1, size=2)
    h, w = max(8, round(hw[0] * jitter[0])), max(8, round(hw[1] * jitter[1]))
    base = np.array(_BASE_COLORS[name], dtype=np.float64) * rng.uniform(0.85, 1.15)
    accent = base * 0.45 + 255 * 0.45
    img = np.where(_texture(name, h, w, rng)[..., None], accent, base)
    img = img + rng.normal(0, 8, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8)


def render_distractor(rng: np.random.Generator, hw: tuple[int, int] = NATIVE_HW) -> np.ndarray:
    """Low-saturation package that belongs to no positive class."""
    jitter = rng.uniform(0.7, 1.4, size=2)
    h, w = max(8, round(hw[0] * jitter[0])), max(8, round(hw[1] * jitter[1]))
    gray = rng.uniform(40, 220)
    tint = rng.uniform(-15, 15, size=3)
    base = np.clip(gray + tint, 0, 255)
    yy, xx = np.mgrid[0:h, 0:w]
    p = int(rng.integers(4, 10))
    pattern = [(yy // p) % 2 == 0, (xx // p) % 2 == 0, np.zeros((h, w), bool)][int(rng.integers(3))]
    img = np.where(pattern[..., None], base * 0.7, base) + rng.normal(0, 8, size=(h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def toy_instances(catalog: ClassCatalog, per_class: int, seed: int) -> list[InstanceImage]:
    rng = np.random.default_rng(seed)
    out = []
    for name in catalog.names:
        cid = catalog.class_id(name)
        for i in range(per_class):
            out.append(InstanceImage(render_product(name, rng), cid, f"{name}/{i:04d}"))
    return out


def product_pool(instances) -> dict[int, list[InstanceImage]]:
    pool: dict[int, list[InstanceImage]] = {}
    for inst in instances:
        pool.setdefault(inst.class_id, []).append(inst)
    return pool


def toy_synth_config(catalog: ClassCatalog, pool, spec: ToySpec = ToySpec(), **overrides) -> SynthConfig:
    cfg = SynthConfig(
        catalog=catalog,
        product_pool=pool,
        background_mode="stripes",
        canvas_small_hw=spec.canvas_hw,
        canvas_large_hw=spec.canvas_hw,
        rows_range=spec.rows_range,
        columns_range=spec.columns_range,
        scale_range=spec.test_scale_range,
        samples=50,
        seed=spec.seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def distractor_shelf(spec: ToySpec, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    fake = ClassCatalog(("distractor",), include_background=True)
    pool = {1: [InstanceImage(render_distractor(rng), 1, f"d{i}") for i in range(30)]}
    cfg = toy_synth_config(fake, pool, spec, scale_range=(0.5, 2.5))
    return generate_shelf(cfg, seed).image


def make_toy_dataset(root, spec: ToySpec = ToySpec()) -> Path:
    """Write a manifest with training instances, background shelves and annotated test shelves."""
    root = Path(root)
    catalog = toy_catalog()
    train = toy_instances(catalog, spec.instances_per_class, spec.seed)
    instance_rows = []
    for inst in train:
        rel = f"instances/{inst.source_id}.png"
        save_png(inst.image, root / rel)
        instance_rows.append((rel, catalog.name(inst.class_id)))

    shelves, annotations = [], []
    for i in range(spec.background_shelves):
        rel = f"shelves/bg_{i:03d}.png"
        save_png(distractor_shelf(spec, spec.seed + 50_000 + i), root / rel)
        shelves.append((rel, "background"))

    # test products are rendered separately from the training instances
    held_out = toy_instances(catalog, 20, spec.seed + 90_000)
    test_cfg = toy_synth_config(catalog, product_pool(held_out), spec, samples=spec.test_shelves)
    for i in range(spec.test_shelves):
        rel = f"shelves/test_{i:03d}.png"
        sample = generate_shelf(test_cfg, spec.seed + 100_000 + i)
        save_png(sample.image, root / rel)
        shelves.append((rel, "test"))
        annotations += [(rel, catalog.name(cid), b) for cid, b in sample.boxes]
    write_manifest(root, catalog, instance_rows, annotations, shelves)
    return root


def place_products(canvas: np.ndarray, products) -> list[tuple[int, BoundingBox]]:
    """Paste ``(class_id, image, (x0, y0))`` triples in place; returns their boxes."""
    boxes = []
    for cid, img, (x0, y0) in products:
        h, w = img.shape[:2]
        canvas[y0:y0 + h, x0:x0 + w] = img
        boxes.append((cid, BoundingBox(x0, y0, x0 + w, y0 + h)))
    return boxes
