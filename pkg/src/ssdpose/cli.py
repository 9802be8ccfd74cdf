"""Command-line interface: ``ssdpose {generate,train,eval,predict,config}``.

Settings resolve as command-line flags > ``--config`` file > built-in
defaults. Exit codes: 0 success, 2 configuration or usage error, 3 data or
file error, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from . import BACKEND, __version__
from . import checkpoint as ckpt_io
from .config import ConfigError, RunConfig, parse_overrides
from .datagen import CLASS_NAMES, IMAGE_DIR, MANIFEST, generate_dataset, load_dataset
from .evaluation import CONSISTENT, DIRECT, EvaluationError, comparison_table, evaluate, evaluate_merged
from .inference import format_detections, parse_detections, run_detector
from .model import NonFiniteError
from .targets import bin_center

log = logging.getLogger("ssdpose")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- config -------------------------------------------------------------

def resolve_config(args, base: dict | None = None, **flags) -> RunConfig:
    """defaults < ``base`` (e.g. a checkpoint's stored config) < --config file < flags."""
    cfg = RunConfig()
    if base:
        cfg = cfg.updated({k: v for k, v in base.items() if k in RunConfig.keys()})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = cfg.updated(_file_keys(path))
    overrides = parse_overrides(getattr(args, "set", None))
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return cfg.updated(overrides) if overrides else cfg


def _file_keys(path) -> dict:
    """Only the keys the file sets, so a file does not reset values that
    came from a checkpoint."""
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of key: value")
    return data


def _load_dataset(path):
    root = Path(path)
    if not (root / MANIFEST).exists():
        raise DataError(f"no {MANIFEST} in {root} (run `ssdpose generate` first)")
    try:
        return load_dataset(root)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load dataset {root}: {exc}") from exc


def _load_checkpoint(path):
    try:
        return ckpt_io.load(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except ckpt_io.CheckpointError as exc:
        raise DataError(str(exc)) from exc


# --- generate -------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args, count=args.count, data_seed=args.seed)
    if cfg.count < 1:
        raise UsageError(f"count must be at least 1, got {cfg.count}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    if out.exists() and args.force:
        for p in (out / IMAGE_DIR).glob("*.png"):
            p.unlink()
    generate_dataset(cfg.scene_spec(), cfg.count, out)
    print(f"wrote {cfg.count} images to {out}")
    return EXIT_OK


# --- train ------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import train

    resume = _load_checkpoint(args.resume) if args.resume else None
    cfg = resolve_config(args, base=resume.config if resume else None, steps=args.steps, seed=args.seed)
    data = _load_dataset(args.data)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    out.parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if resume is not None else "w"
    with open(log_path, mode) as fh:
        if resume is None:
            fh.write(f"# ssdpose {__version__} backend={BACKEND} n_bins={cfg.n_bins} pose_sharing={cfg.pose_sharing}\n")

        def progress(step, o):
            if args.progress and step % args.progress == 0:
                log.info("step %d l_total %.4f", step, o.l_total)

        try:
            res = train(cfg, data, out_checkpoint=out, log_file=fh, resume=resume, on_step=progress)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
    print(f"trained to step {res.step}; checkpoint {out}; log {log_path}")
    return EXIT_OK


# --- eval -------------------------------------------------------------------

def _parse_bins(text) -> list:
    try:
        bins = [int(b) for b in str(text).split(",") if b.strip()]
    except ValueError as exc:
        raise UsageError(f"--bins must be a comma-separated list of integers, got {text!r}") from exc
    if not bins or any(b < 1 for b in bins):
        raise UsageError(f"--bins needs positive integers, got {text!r}")
    return bins


def _evaluate_one(dets, gt, det_bins, bins, args, n_classes):
    if args.merge_from_fine:
        bad = [b for b in bins if b > det_bins]
        if bad:
            raise UsageError(f"--merge-from-fine: requested {bad[0]} bins but the model predicts only "
                             f"{det_bins} bins (need requested <= {det_bins})")
        return evaluate_merged(dets, gt, det_bins, bins, n_classes, CLASS_NAMES)
    return evaluate(dets, gt, bins, det_bins, n_classes, args.gt_binning, CLASS_NAMES)


def cmd_eval(args) -> int:
    data = _load_dataset(args.data)
    gt = data.ground_truth()
    bins = _parse_bins(args.bins)
    reports = {}
    if args.detections:
        path = Path(args.detections)
        if not path.exists():
            raise DataError(f"detections file not found: {path}")
        try:
            dets, n_det = parse_detections(path.read_text())
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from exc
        n_det = args.det_bins or n_det
        if n_det is None:
            raise UsageError(f"{path} has no n_bins header; pass --det-bins")
        cfg = resolve_config(args)
        reports[path.stem] = _evaluate_one(dets, gt, n_det, bins, args, cfg.n_classes)
    for i, cp in enumerate(args.checkpoint or []):
        ck = _load_checkpoint(cp)
        cfg = resolve_config(args, base=ck.config)
        net = ck.detector()
        if data.images.shape[1:] != (net.spec.input_size, net.spec.input_size):
            raise DataError(f"dataset images are {data.images.shape[1:]} but {cp} expects "
                            f"{net.spec.input_size}x{net.spec.input_size}")
        dets = run_detector(net, data.as_float(), data.names, cfg.score_thresh, cfg.nms_iou, cfg.top_k)
        name = args.name[i] if args.name and i < len(args.name) else Path(cp).stem
        reports[name] = _evaluate_one(dets, gt, ck.n_bins, bins, args, ck.head.n_classes)
    if not reports:
        raise UsageError("eval needs --checkpoint or --detections")

    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for name, rep in reports.items():
        print(f"== {name} (model bins {rep.det_bins}, gt binning {rep.gt_binning})")
        print(rep.format_table())
        if out:
            stem = "report" if len(reports) == 1 else f"report_{name}"
            (out / f"{stem}.json").write_text(rep.to_json() + "\n")
            (out / f"{stem}.txt").write_text(rep.format_table() + "\n")
            if args.pr_csv:
                rep.write_pr_csv(out / f"{stem}_pr.csv")
    if len(reports) > 1:
        table = comparison_table(reports, bins)
        print(table)
        if out:
            (out / "comparison.txt").write_text(table + "\n")
    return EXIT_OK


# --- predict ----------------------------------------------------------------

def pose_arrow(center, bin_index: int, n_bins: int, length: float):
    """End point of an arrow from ``center`` at the bin-center azimuth
    (counter-clockwise on screen, y down)."""
    a = math.radians(bin_center(bin_index, n_bins))
    return center[0] + length * math.cos(a), center[1] - length * math.sin(a)


def _collect_inputs(paths):
    """``[(image_id, path)]``: dataset dirs use manifest names, other dirs
    their PNG files, plain files their path as given."""
    from .datagen import read_manifest

    items = []
    for p in map(Path, paths):
        if p.is_dir() and (p / MANIFEST).exists():
            items += [(name, p / name) for name, _ in read_manifest(p)]
        elif p.is_dir():
            items += [(str(f.relative_to(p)), f) for f in sorted(p.rglob("*.png"))]
        else:
            items.append((str(p), p))
    return items


def _draw_overlay(img: np.ndarray, dets, n_bins: int, path: Path, scale: int = 4) -> None:
    from PIL import Image, ImageDraw

    h, w = img.shape
    im = Image.fromarray(img).resize((w * scale, h * scale), Image.NEAREST).convert("RGB")
    draw = ImageDraw.Draw(im)
    colors = [(230, 60, 60), (60, 200, 60), (70, 120, 255)]
    for d in dets:
        x0, y0, x1, y1 = (v * w * scale for v in d.box.corners)
        col = colors[d.class_id % len(colors)]
        draw.rectangle([x0, y0, x1, y1], outline=col, width=2)
        name = CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else str(d.class_id)
        draw.text((x0 + 2, y0 + 1), f"{name} {d.score:.2f} b{d.pose_bin} {d.pose_conf:.2f}", fill=col)
        c = ((x0 + x1) / 2, (y0 + y1) / 2)
        end = pose_arrow(c, d.pose_bin, n_bins, 0.4 * min(x1 - x0, y1 - y0))
        draw.line([c, end], fill=col, width=2)
        draw.ellipse([end[0] - 3, end[1] - 3, end[0] + 3, end[1] + 3], fill=col)
    im.save(path)


def cmd_predict(args) -> int:
    from PIL import Image, UnidentifiedImageError

    ck = _load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=ck.config, score_thresh=args.score_thresh)
    net = ck.detector()
    size = net.spec.input_size
    ok_ids, arrays = [], []
    items = _collect_inputs(args.inputs)
    if not items:
        raise DataError("no input images found")
    for iid, path in items:
        try:
            arr = np.asarray(Image.open(path).convert("L"))
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("skipping %s: %s", path, exc)
            continue
        if arr.shape != (size, size):
            log.warning("skipping %s: image is %dx%d, model expects %dx%d", path, arr.shape[1], arr.shape[0], size, size)
            continue
        ok_ids.append(iid)
        arrays.append(arr)
    if not arrays:
        raise DataError("none of the input images could be read")
    images = np.stack(arrays)
    dets = run_detector(net, (images.astype(np.float32) / 255.0)[:, None], ok_ids, cfg.score_thresh,
                        cfg.nms_iou, cfg.top_k)
    Path(args.out).write_text(format_detections(dets, ck.n_bins))
    if args.overlay_dir:
        odir = Path(args.overlay_dir)
        odir.mkdir(parents=True, exist_ok=True)
        for img, iid in zip(arrays, ok_ids):
            _draw_overlay(img, dets[iid], ck.n_bins, odir / (iid.replace("/", "_").rsplit(".", 1)[0] + ".png"))
    n = sum(len(v) for v in dets.values())
    print(f"{n} detections on {len(ok_ids)} images -> {args.out}")
    if len(ok_ids) < len(items):
        print(f"skipped {len(items) - len(ok_ids)} unreadable image(s)", file=sys.stderr)
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(resolve_config(args).dump())
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssdpose", description="Single-shot detection with discrete pose bins.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML file of config keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int, help="scene seed (config key data_seed)")
    g.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metrics log (default: checkpoint path with .log)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--progress", type=int, default=0, metavar="N", help="log progress every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compute AP / AVP")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", action="append", help="repeat to compare several models")
    e.add_argument("--name", action="append", help="display name per --checkpoint")
    e.add_argument("--detections", help="detections file written by `predict`")
    e.add_argument("--det-bins", type=int, help="pose bins of the detections file if it lacks a header")
    e.add_argument("--bins", default="4,8,16,24")
    e.add_argument("--merge-from-fine", action="store_true",
                   help="merge the model's fine bins into each requested coarser binning")
    e.add_argument("--gt-binning", choices=[CONSISTENT, DIRECT], default=CONSISTENT)
    e.add_argument("--out", help="directory for report.json / report.txt")
    e.add_argument("--pr-csv", action="store_true", help="also write precision/recall curves")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="detect objects and poses in images")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("inputs", nargs="+", help="image files, image directories or dataset directories")
    r.add_argument("--out", required=True, help="detections file")
    r.add_argument("--score-thresh", type=float)
    r.add_argument("--overlay-dir")
    r.set_defaults(func=cmd_predict)

    c = sub.add_parser("config", help="print the resolved configuration")
    common(c)
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EvaluationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
