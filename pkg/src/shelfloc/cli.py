"""``shelfloc`` command line: train, synthesize, detect, evaluate and visualize.

Every subcommand writes into a fresh run directory holding the resolved
``config.toml``, a ``run.json`` sidecar (the only file with timestamps) and
the subcommand's artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import config as C
from .data_model import ClassCatalog
from .evaluation import mean_ap, write_report
from .fcn import build_fcn, load_fcn, save_fcn, train_fcn
from .imaging import load_rgb
from .ingestion import DatasetManifest, extract_background_patches, load_manifest, split_train_val
from .postprocess import detections_from_mask, read_detections, sliding_window_baseline, write_detections
from .pyramid import pyramid_forward, single_scale_forward
from .refine import build_convae, default_working_resolution, load_convae, refine_at_working_resolution, save_convae, train_refine
from .synth import generate_dataset, read_dataset, write_dataset
from .toy import ToySpec, make_toy_dataset, product_pool
from .visualize import render_overlay

logger = logging.getLogger("shelfloc")


class CliError(RuntimeError):
    pass


# run directory handling ---------------------------------------------------


def _empty_dir(path: Path) -> Path:
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise CliError(f"refusing to write into non-empty run directory {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _start_run(args, cfg: dict | None) -> Path:
    out = _empty_dir(Path(args.out))
    if cfg is not None:
        (out / "config.toml").write_text(C.dump_config(cfg))
    args._started = datetime.now(timezone.utc).isoformat()
    return out


def _finish_run(args, out: Path, **info) -> None:
    meta = {
        "command": args.command,
        "argv": getattr(args, "_argv", []),
        "started": args._started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        **info,
    }
    (out / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _manifest(cfg: dict) -> DatasetManifest:
    src = cfg["data"]["manifest"]
    if not src:
        raise CliError("data.manifest is not set (use --set data.manifest=PATH)")
    return load_manifest(src)


def _load_fcn(path, catalog: ClassCatalog):
    model = load_fcn(_require_file(path, "FCN checkpoint"))
    if model.catalog is not None and model.catalog != catalog:
        raise CliError(f"{path}: checkpoint classes {model.catalog.labels} differ from the manifest's {catalog.labels}")
    return model


# subcommands ---------------------------------------------------------------


def cmd_make_toy(args) -> dict:
    out = _empty_dir(Path(args.out))
    spec = ToySpec(
        seed=args.seed,
        instances_per_class=args.instances_per_class,
        test_shelves=args.test_shelves,
        background_shelves=args.background_shelves,
    )
    make_toy_dataset(out, spec)
    return {"out": str(out)}


def cmd_train_fcn(args, cfg) -> dict:
    m = _manifest(cfg)
    out = _start_run(args, cfg)
    catalog = m.catalog
    fcfg = C.fcn_config(cfg, catalog)
    hp = C.fcn_hparams(cfg)
    s = cfg["fcn"]
    instances = m.load_instances()
    n_patches = int(s["background_patches"])
    if n_patches and catalog.background_id is not None:
        shelves = m.shelves_with_split("background") + m.shelves_with_split("train")
        if not shelves:
            raise CliError("fcn.background_patches > 0 but the manifest has no background or train shelves")
        images = [load_rgb(m.resolve(sh.path)) for sh in shelves]
        boxes = [[a.box for a in sh.annotations] for sh in shelves]
        instances += extract_background_patches(
            images, boxes, n_patches, fcfg.training_input_hw, float(s["background_patch_max_iou"]),
            fcfg.seed, size_jitter=float(s["background_patch_jitter"]), background_id=catalog.background_id,
        )
    train, val = split_train_val(instances, float(s["val_fraction"]), fcfg.seed)
    model, history = train_fcn(build_fcn(fcfg, catalog), train, val, hp)
    save_fcn(model, out / "fcn.npz", history)
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    best = history.val_accuracy[history.best_epoch]
    print(f"trained {history.epochs} epochs ({history.stop_reason}); best val accuracy {best:.4f} at epoch {history.best_epoch}")
    _finish_run(args, out, train=len(train), val=len(val), best_epoch=history.best_epoch)
    return {"checkpoint": str(out / "fcn.npz")}


def cmd_synth(args, cfg) -> dict:
    m = _manifest(cfg)
    out = _start_run(args, cfg)
    positives = [i for i in m.load_instances() if m.catalog.is_positive(i.class_id)]
    backgrounds = []
    if cfg["synth"]["background_mode"] == "pool":
        backgrounds = [load_rgb(m.resolve(s.path)) for s in m.shelves_with_split("background")]
    scfg = C.synth_config(cfg, m.catalog, product_pool(positives), backgrounds)
    samples, manifest = generate_dataset(scfg)
    write_dataset(samples, out, scfg)
    counts = {m.catalog.name(c): n for c, n in manifest.class_counts.items()}
    print(f"generated {len(samples)} shelves; class counts {counts}")
    _finish_run(args, out, class_counts=counts)
    return {"dataset": str(out)}


def cmd_train_refine(args, cfg) -> dict:
    if not Path(args.synth, "config.json").is_file():
        raise CliError(f"synthetic dataset not found: {args.synth}")
    catalog, samples = read_dataset(args.synth)
    fcn = _load_fcn(args.fcn, catalog)
    out = _start_run(args, cfg)
    acfg = C.convae_config(cfg, fcn.config.out_channels)
    wr = cfg["refine"]["working_resolution"] or default_working_resolution(
        cfg["synth"]["canvas_small_hw"], acfg.downscale
    )
    pyr = C.pyramid_config(cfg, fcn.config.training_input_hw)
    convae, history = train_refine(build_convae(acfg), fcn, samples, C.refine_hparams(cfg), wr, pyr)
    save_convae(convae, out / "convae.npz", history)
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2) + "\n")
    print(
        f"trained {history.epochs} epochs ({history.stop_reason}); best val loss "
        f"{history.val_loss[history.best_epoch]:.4f} at epoch {history.best_epoch}"
    )
    _finish_run(args, out, working_resolution=list(convae.working_resolution), best_epoch=history.best_epoch)
    return {"checkpoint": str(out / "convae.npz")}


def _score_masks(cfg, m: DatasetManifest, fcn, convae=None, pyramid: bool = True):
    """Yield ``(shelf, mask, image_hw)`` for every shelf of the evaluation split."""
    pyr = C.pyramid_config(cfg, fcn.config.training_input_hw)
    for shelf in m.shelves_with_split(cfg["data"]["test_split"]):
        image = load_rgb(m.resolve(shelf.path))
        mask = pyramid_forward(fcn, image, pyr) if pyramid else single_scale_forward(fcn, image, pyr)
        if convae is not None:
            mask = refine_at_working_resolution(convae, mask)
        yield shelf, mask, image.shape[:2]


def _models(args, m):
    fcn = _load_fcn(args.fcn, m.catalog)
    convae = load_convae(_require_file(args.refine, "ConvAE checkpoint")) if args.refine else None
    if convae is not None and convae.config.in_channels != fcn.config.out_channels:
        raise CliError("ConvAE and FCN checkpoints disagree on the channel count")
    return fcn, convae


def cmd_detect(args, cfg) -> dict:
    m = _manifest(cfg)
    fcn, convae = _models(args, m)
    out = _start_run(args, cfg)
    params = C.detect_params(cfg, m.catalog)
    dets = []
    for shelf, mask, hw in _score_masks(cfg, m, fcn, convae, pyramid=not args.no_pyramid):
        dets += detections_from_mask(mask, params, shelf.path, m.catalog, image_hw=hw)
    write_detections(dets, m.catalog, out / "detections.jsonl")
    print(f"{len(dets)} detections written to {out / 'detections.jsonl'}")
    _finish_run(args, out, detections=len(dets), refined=bool(convae), pyramid=not args.no_pyramid)
    return {"detections": str(out / "detections.jsonl")}


def cmd_baseline(args, cfg) -> dict:
    m = _manifest(cfg)
    fcn = _load_fcn(args.fcn, m.catalog)
    out = _start_run(args, cfg)
    b = cfg["baseline"]
    dets = []
    for shelf in m.shelves_with_split(cfg["data"]["test_split"]):
        dets += sliding_window_baseline(
            fcn, load_rgb(m.resolve(shelf.path)), tuple(b["scales"]), tuple(b["aspect_ratios"]),
            float(b["stride"]), float(b["score_threshold"]), float(b["nms_iou"]), image_id=shelf.path,
        )
    write_detections(dets, m.catalog, out / "detections.jsonl")
    print(f"{len(dets)} detections written to {out / 'detections.jsonl'}")
    _finish_run(args, out, detections=len(dets))
    return {"detections": str(out / "detections.jsonl")}


def cmd_eval(args, cfg) -> dict:
    m = _manifest(cfg)
    dets = read_detections(_require_file(args.detections, "detections file"), m.catalog)
    out = _start_run(args, cfg)
    report = mean_ap(dets, m.annotations(cfg["data"]["test_split"]), m.catalog, C.eval_config(cfg))
    write_report(report, out)
    print((out / "report.txt").read_text(), end="")
    _finish_run(args, out, mAP=report.mAP)
    return {"mAP": report.mAP, "report": str(out / "report.json")}


def _safe_name(rel: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", rel)


def cmd_visualize(args, cfg) -> dict:
    m = _manifest(cfg)
    dets = read_detections(_require_file(args.detections, "detections file"), m.catalog)
    out = _start_run(args, cfg)
    by_image: dict[str, list] = {}
    for d in dets:
        if d.score >= args.min_score:
            by_image.setdefault(d.image_id, []).append(d)
    shelves = m.shelves_with_split(cfg["data"]["test_split"])
    if args.limit:
        shelves = shelves[: args.limit]
    (out / "overlays").mkdir()
    for shelf in shelves:
        name = Path(_safe_name(shelf.path)).with_suffix(".png").name
        render_overlay(
            load_rgb(m.resolve(shelf.path)), shelf.annotations, by_image.get(shelf.path, []),
            out / "overlays" / name, m.catalog,
        )
    print(f"{len(shelves)} overlays written to {out / 'overlays'}")
    _finish_run(args, out, images=len(shelves))
    return {"overlays": str(out / "overlays")}


def cmd_sweep(args, cfg) -> dict:
    m = _manifest(cfg)
    fcn, convae = _models(args, m)
    out = _start_run(args, cfg)
    masks = list(_score_masks(cfg, m, fcn, convae, pyramid=not args.no_pyramid))
    annotations = m.annotations(cfg["data"]["test_split"])
    ecfg = C.eval_config(cfg)
    rows = []
    for t in cfg["sweep"]["thresholds"]:
        params = C.detect_params(cfg, m.catalog, threshold=float(t))
        dets = [d for shelf, mask, hw in masks for d in detections_from_mask(mask, params, shelf.path, m.catalog, image_hw=hw)]
        report = mean_ap(dets, annotations, m.catalog, ecfg)
        rows.append((float(t), report.mAP, len(dets)))
    lines = ["threshold,mAP,detections"] + [f"{t:g},{v:.6f},{n}" for t, v, n in rows]
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print(f"{'threshold':>10}{'mAP':>10}{'dets':>8}")
    for t, v, n in rows:
        print(f"{t:>10g}{v:>10.4f}{n:>8d}")
    best = max(rows, key=lambda r: (r[1], -abs(r[0] - 0.5)))
    _finish_run(args, out, best_threshold=best[0], best_mAP=best[1])
    return {"sweep": rows}


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shelfloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress (per-epoch losses)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, needs_config=True):
        p.add_argument("--out", required=True, help="run directory (must be empty or absent)")
        if needs_config:
            p.add_argument(
                "--config",
                help=f"TOML file or bundled profile name ({', '.join(C.profile_names())}); defaults to ${C.CONFIG_ENV}",
            )
            p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                           help="override one config value (repeatable)")
            p.add_argument("--seed", type=int, help="global seed, propagated to sections without their own")
        return p

    p = common(sub.add_parser("make-toy", help="write the procedural toy dataset"), needs_config=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances-per-class", type=int, default=ToySpec.instances_per_class)
    p.add_argument("--test-shelves", type=int, default=ToySpec.test_shelves)
    p.add_argument("--background-shelves", type=int, default=ToySpec.background_shelves)
    p.set_defaults(func=cmd_make_toy, plain=True)

    common(sub.add_parser("train-fcn", help="train the instance classifier")).set_defaults(func=cmd_train_fcn)
    common(sub.add_parser("synth", help="generate synthetic planogram shelves")).set_defaults(func=cmd_synth)

    p = common(sub.add_parser("train-refine", help="train the ConvAE on classifier masks of synthetic shelves"))
    p.add_argument("--fcn", required=True, help="FCN checkpoint")
    p.add_argument("--synth", required=True, help="synthetic dataset directory")
    p.set_defaults(func=cmd_train_refine)

    for name, func, help_ in (
        ("detect", cmd_detect, "detect products on the evaluation shelves"),
        ("sweep-threshold", cmd_sweep, "mAP as a function of the binarization threshold"),
    ):
        p = common(sub.add_parser(name, help=help_))
        p.add_argument("--fcn", required=True, help="FCN checkpoint")
        p.add_argument("--refine", metavar="CKPT", help="ConvAE checkpoint; refine masks before box extraction")
        p.add_argument("--no-pyramid", action="store_true", help="single-scale inference")
        p.set_defaults(func=func)

    p = common(sub.add_parser("baseline", help="sliding-window + NMS baseline detector"))
    p.add_argument("--fcn", required=True, help="FCN checkpoint")
    p.set_defaults(func=cmd_baseline)

    p = common(sub.add_parser("eval", help="VOC07 mAP of a detections file"))
    p.add_argument("--detections", required=True)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("visualize", help="ground truth (blue) and predictions (red) overlays"))
    p.add_argument("--detections", required=True)
    p.add_argument("--limit", type=int, default=0, help="only the first N shelves")
    p.add_argument("--min-score", type=float, default=0.0)
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args._argv = argv
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    torch.use_deterministic_algorithms(True, warn_only=True)
    try:
        if getattr(args, "plain", False):
            args.func(args)
        else:
            overrides = list(args.overrides) + ([f"seed={args.seed}"] if args.seed is not None else [])
            cfg = C.load_config(args.config, overrides)
            torch.manual_seed(cfg["seed"])
            args.func(args, cfg)
    except (ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"shelfloc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
