"""``muscle`` command-line interface.

Exit status: 0 on success, 2 for usage errors, 3 for missing or malformed
inputs, 4 when training diverges.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .beacon import BeaconConfig
from .config import ConfigError, load_configs, parse_tau, snapshot
from .data import class_coverage, generate_dataset, load_split, save_split, split_dataset
from .metrics import evaluate_boundary_f, evaluate_miou
from .pipeline import (DivergenceError, PseudoMask, TrainConfig, export_pseudo_masks, predict,
                       pseudo_mask_miou, segmentation_report, train_decoder, train_encoder)
from .serialize import FormatError, checkpoint_meta, load_checkpoint, load_tensor, save_checkpoint, save_tensor
from .tensor import Tensor

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

MANIFEST = "manifest.json"
MASK_INDEX = "masks.json"

logger = logging.getLogger("muscle")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- run bookkeeping -------------------------------------------------------------

def code_hash() -> str:
    """Content hash over the package sources, stable across checkouts."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for path in sorted(root.glob("*.py")) + sorted(root.glob("*.pyx")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


class RunManifest:
    """One ``manifest.json`` per output directory: config, seed, code hash, times, outputs."""

    def __init__(self, out_dir: Path, command: str, config: Dict, seed: int):
        self.path = Path(out_dir) / MANIFEST
        self.doc = {
            "command": command,
            "version": __version__,
            "code_hash": code_hash(),
            "seed": seed,
            "config": config,
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "finished": None,
            "outputs": {},
        }

    def output(self, name: str, path) -> None:
        self.doc["outputs"][name] = str(path)

    def write(self, finished: bool = False) -> None:
        if finished:
            self.doc["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True), encoding="utf-8")


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- input helpers -------------------------------------------------------------------

def _split_dir(data: str, split: str) -> Path:
    root = Path(data)
    d = root / split if (root / split / "labels.json").is_file() else root
    if not (d / "labels.json").is_file():
        raise DataError(f"no dataset at {root}: expected {root / split / 'labels.json'}; "
                        f"create one with `muscle gen-data --out {root}`")
    return d


def _load_scenes(data: str, split: str, with_masks: bool):
    try:
        return load_split(_split_dir(data, split), with_masks=with_masks)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read dataset split {split!r} under {data}: {exc}") from None


def _load_weights(path: str) -> Dict[str, Tensor]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"encoder weights {p} not found; produce them with `muscle train-encoder --out <dir>`")
    try:
        return {k: Tensor(v, requires_grad=True) for k, v in load_checkpoint(p).items()}
    except (OSError, FormatError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {p}: {exc}") from None


def _parse_scales(text: str) -> tuple:
    try:
        scales = tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"--scales must be comma-separated numbers, got {text!r}") from None
    if not scales or any(s <= 0 for s in scales):
        raise UsageError("--scales needs at least one positive scale")
    return scales


def _configs(args, **overrides):
    try:
        return load_configs(getattr(args, "config", None), overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def _stack(scenes):
    return np.stack([s.image for s in scenes]), np.stack([s.labels for s in scenes])


def _prepare_out(out: str) -> Path:
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


# -- commands ------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    scenes = generate_dataset(args.n, args.seed)
    train, val = split_dataset(scenes)
    save_split(train, out / "train")
    save_split(val, out / "val")
    coverage = class_coverage(scenes)
    write_json(out / "coverage.json", {"n": args.n, "seed": args.seed, "coverage": coverage})
    print(json.dumps(coverage, sort_keys=True))
    return EXIT_OK


def cmd_train_encoder(args) -> int:
    cfg, bcfg = _configs(args, seed=args.seed, encoder_steps=args.steps)
    train = _load_scenes(args.data, "train", with_masks=False)
    out = _prepare_out(args.out)
    manifest = RunManifest(out, "train-encoder", snapshot(cfg, bcfg), cfg.seed)
    manifest.doc["data"] = str(Path(args.data).resolve())
    images, labels = _stack(train)
    run = train_encoder(images, labels, cfg, log_path=out / "encoder_curves.csv")
    save_checkpoint(out / "encoder.bin", run.params, meta={"config": cfg.to_dict()})
    manifest.output("weights", out / "encoder.bin")
    manifest.output("curves", out / "encoder_curves.csv")
    manifest.write(finished=True)
    print(out / "encoder.bin")
    return EXIT_OK


def _train_config_from_weights(path: str, args) -> TrainConfig:
    meta = checkpoint_meta(path).get("config")
    if getattr(args, "config", None) or not meta:
        return _configs(args)[0]
    return TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items()})


def save_masks(out: Path, masks: Sequence[PseudoMask], meta: Dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for m in masks:
        save_tensor(out / f"{m.source_id}.bin", m.soft)
    write_json(out / MASK_INDEX, dict(meta, ids=[m.source_id for m in masks]))


def load_masks(path: str) -> List[PseudoMask]:
    root = Path(path)
    if not (root / MASK_INDEX).is_file():
        raise DataError(f"no pseudo masks at {root}: expected {root / MASK_INDEX}; "
                        "produce them with `muscle export-masks --out <dir>`")
    index = json.loads((root / MASK_INDEX).read_text(encoding="utf-8"))
    try:
        return [PseudoMask(load_tensor(root / f"{sid}.bin"), sid) for sid in index["ids"]]
    except (OSError, FormatError) as exc:
        raise DataError(f"cannot read pseudo mask under {root}: {exc}") from None


def cmd_export_masks(args) -> int:
    weights = _load_weights(args.weights)
    cfg = _train_config_from_weights(args.weights, args)
    scales = _parse_scales(args.scales) if args.scales else cfg.scales
    data = args.data
    run_manifest = Path(args.weights).parent / MANIFEST
    if not data and run_manifest.is_file():
        data = json.loads(run_manifest.read_text(encoding="utf-8")).get("data")
    if not data:
        raise UsageError("--data is required when the weights have no run manifest")
    scenes = _load_scenes(data, args.split, with_masks=False)
    images, labels = _stack(scenes)
    masks = export_pseudo_masks(weights, images, labels, cfg, scales, [s.scene_id for s in scenes])
    out = Path(args.out) if args.out else Path(args.weights).parent / "masks"
    save_masks(out, masks, {"scales": list(scales), "weights": str(Path(args.weights).resolve()),
                            "data": str(Path(data).resolve()), "split": args.split})
    print(out)
    return EXIT_OK


def write_predictions(out: Path, preds, ids) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for p, sid in zip(preds, ids):
        Image.fromarray(np.asarray(p, dtype=np.uint8), mode="L").save(out / f"{sid}.png")


def read_predictions(pred_dir: Path, ids) -> List[np.ndarray]:
    preds = []
    for sid in ids:
        f = pred_dir / f"{sid}.png"
        if not f.is_file():
            raise DataError(f"missing prediction {f}; produce predictions with `muscle train-decoder`")
        preds.append(np.asarray(Image.open(f), dtype=np.int64))
    return preds


def metrics_report(preds, gts, num_classes: int, tolerance: int) -> Dict:
    return segmentation_report(preds, gts, num_classes, tolerance)


def cmd_train_decoder(args) -> int:
    if args.beacon == "off" and args.lam is not None:
        logger.warning("warning: --lambda is ignored because --beacon is off")
    masks = load_masks(args.masks)
    index = json.loads((Path(args.masks) / MASK_INDEX).read_text(encoding="utf-8"))
    weights_path = args.weights or index.get("weights")
    data = args.data or index.get("data")
    if not weights_path or not data:
        raise UsageError("--weights and --data are required when the mask index does not record them")
    encoder = _load_weights(weights_path)
    overrides = {"seed": args.seed, "decoder_steps": args.iters,
                 "beacon_enabled": args.beacon == "on", "beacon_lam": args.lam, "beacon_steps": args.steps,
                 "beacon_k": args.k, "beacon_tau": args.tau}
    if args.config:
        cfg, bcfg = _configs(args, **overrides)
    else:
        base = _train_config_from_weights(weights_path, args)
        cfg, bcfg = _configs(args, **{k: v for k, v in overrides.items() if k.startswith("beacon_")})
        cfg = replace(base, seed=args.seed if args.seed is not None else base.seed,
                      decoder_steps=args.iters if args.iters is not None else base.decoder_steps)
    if args.beacon == "off":
        bcfg = replace(bcfg, enabled=False)

    train = _load_scenes(data, "train", with_masks=False)
    by_id = {m.source_id: m.soft for m in masks}
    missing = [s.scene_id for s in train if s.scene_id not in by_id]
    if missing:
        raise DataError(f"{len(missing)} training scenes have no pseudo mask (first: {missing[0]}); "
                        "re-run `muscle export-masks` on the same dataset")
    images, _ = _stack(train)
    pseudo = np.stack([by_id[s.scene_id] for s in train])

    out = _prepare_out(args.out)
    manifest = RunManifest(out, "train-decoder", snapshot(cfg, bcfg), cfg.seed)
    run = train_decoder(images, pseudo, encoder, cfg, bcfg, log_path=out / "decoder_curves.csv")
    params = {**{f"enc.{k}": v for k, v in run.encoder.items()}, **{f"dec.{k}": v for k, v in run.decoder.items()}}
    save_checkpoint(out / "decoder.bin", params, meta={"config": cfg.to_dict()})

    val = _load_scenes(data, "val", with_masks=True)
    preds = predict(np.stack([s.image for s in val]), run.encoder, run.decoder, cfg)
    write_predictions(out / "pred", preds, [s.scene_id for s in val])
    report = metrics_report(preds, [s.gt_mask for s in val], cfg.num_classes, args.tolerance)
    report["curves"] = str(out / "decoder_curves.csv")
    write_json(out / "metrics.json", report)
    for name, path in (("weights", "decoder.bin"), ("curves", "decoder_curves.csv"),
                       ("predictions", "pred"), ("metrics", "metrics.json")):
        manifest.output(name, out / path)
    manifest.write(finished=True)
    print(json.dumps({k: report[k] for k in ("miou", "boundary_f")}, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    gt_dir = _split_dir(args.gt, "val")
    val = _load_scenes(str(gt_dir), "val", with_masks=True)
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise DataError(f"prediction directory {pred_dir} not found; produce it with `muscle train-decoder`")
    preds = read_predictions(pred_dir, [s.scene_id for s in val])
    num_classes = len(val[0].labels)
    report = metrics_report(preds, [s.gt_mask for s in val], num_classes, args.tolerance)
    curves = pred_dir.parent / "decoder_curves.csv"
    if curves.is_file():
        report["curves"] = str(curves)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


# -- ablations -----------------------------------------------------------------------

MCL_ROWS = (
    ("HCL", dict(use_imc=False, use_pixc=False, use_prc=False)),
    ("HCL+IMC", dict(use_imc=True, use_pixc=False, use_prc=False)),
    ("HCL+IMC+PIXC", dict(use_imc=True, use_pixc=True, use_prc=False)),
    ("HCL+IMC+PIXC+PRC", dict(use_imc=True, use_pixc=True, use_prc=True)),
)

BEACON_ROWS = (
    ("lambda=0", dict(enabled=False)),
    ("lambda=0.01", dict(lam=0.01)),
    ("lambda=0.1", dict(lam=0.1)),
    ("steps=3", dict(steps=3)),
    ("steps=11", dict(steps=11)),
    ("k=64", dict(k=64)),
    ("k=256", dict(k=256)),
    ("tau=0.5", dict(tau=0.5)),
    ("tau=mean (best)", dict()),
)


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(v):
        return f"{100 * v:.1f}" if isinstance(v, float) else str(v)
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(cell(v) for v in r) + " |" for r in rows]
    return "\n".join(lines)


def ablate_mcl(args, cfg: TrainConfig, out: Path) -> Dict:
    train = _load_scenes(args.data, "train", with_masks=True)
    images, labels = _stack(train)
    gts = [s.gt_mask for s in train]
    rows, records = [], []
    for name, flags in MCL_ROWS:
        c = replace(cfg, **flags)
        run = train_encoder(images, labels, c, log_path=out / f"{name}_curves.csv")
        ss = pseudo_mask_miou(export_pseudo_masks(run.params, images, labels, c, (1.0,)), gts, c.num_classes)
        ms = pseudo_mask_miou(export_pseudo_masks(run.params, images, labels, c, c.scales), gts, c.num_classes)
        marks = ["x" if flags.get(f"use_{t}", True) else "" for t in ("imc", "pixc", "prc")]
        rows.append(["x"] + marks + [ss, ms])
        records.append({"config": name, **flags, "miou_single_scale": ss, "miou_multi_scale": ms})
        logger.info("%s: single-scale %.4f multi-scale %.4f", name, ss, ms)
    table = format_table(["HCL", "IMC", "PIXC", "PRC", "mIoU (SS)", "mIoU (MS)"], rows)
    return {"suite": "mcl", "rows": records, "table": table}


def ablate_beacon(args, cfg: TrainConfig, bcfg: BeaconConfig, out: Path) -> Dict:
    weights_path = args.weights
    if not weights_path:
        raise UsageError("--suite beacon needs --weights from `muscle train-encoder`")
    encoder = _load_weights(weights_path)
    train = _load_scenes(args.data, "train", with_masks=False)
    val = _load_scenes(args.data, "val", with_masks=True)
    images, labels = _stack(train)
    pseudo = np.stack([m.soft for m in export_pseudo_masks(encoder, images, labels, cfg, cfg.scales)])
    val_images = np.stack([s.image for s in val])
    gts = [s.gt_mask for s in val]
    rows, records = [], []
    for name, change in BEACON_ROWS:
        b = replace(bcfg, **change)
        run = train_decoder(images, pseudo, encoder, cfg, b)
        preds = predict(val_images, run.encoder, run.decoder, cfg)
        miou = evaluate_miou(preds, gts, cfg.num_classes + 1).miou
        bf = evaluate_boundary_f(preds, gts, args.tolerance)
        lam = b.lam if b.active else 0.0
        tau = "mu_m" if b.tau == "mean" else f"fixed:{b.tau:g}"
        steps, k = (b.steps, b.k) if b.active else ("n/a", "n/a")
        rows.append([name, str(lam), steps, k, tau if b.active else "n/a", miou, bf])
        records.append({"config": name, "lambda": lam, "steps": b.steps, "k": b.k, "tau": tau,
                        "active": b.active, "miou": miou, "boundary_f": bf})
        logger.info("%s: mIoU %.4f boundary F %.4f", name, miou, bf)
    table = format_table(["config", "lambda", "steps", "k", "tau", "mIoU", "boundary F"], rows)
    return {"suite": "beacon", "rows": records, "table": table}


def cmd_ablate(args) -> int:
    cfg, bcfg = _configs(args, seed=args.seed, encoder_steps=args.encoder_steps, decoder_steps=args.iters)
    out = _prepare_out(args.out)
    manifest = RunManifest(out, f"ablate --suite {args.suite}", snapshot(cfg, bcfg), cfg.seed)
    if args.suite == "mcl":
        result = ablate_mcl(args, cfg, out)
    else:
        result = ablate_beacon(args, cfg, bcfg, out)
    write_json(out / f"ablation_{args.suite}.json", result)
    (out / f"ablation_{args.suite}.md").write_text(result["table"] + "\n", encoding="utf-8")
    manifest.output("report", out / f"ablation_{args.suite}.json")
    manifest.output("table", out / f"ablation_{args.suite}.md")
    manifest.write(finished=True)
    print(result["table"])
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="muscle", description="Weakly supervised segmentation on synthetic shape scenes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset (train/val 80/20)")
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("train-encoder", help="stage 1: train the contrastive classification encoder")
    e.add_argument("--data", required=True, help="dataset root from gen-data")
    e.add_argument("--config", help="flat key = value config file")
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--steps", type=int, help="override encoder_steps")
    e.set_defaults(func=cmd_train_encoder)

    x = sub.add_parser("export-masks", help="write soft pseudo masks from encoder weights")
    x.add_argument("--weights", required=True, help="encoder.bin from train-encoder")
    x.add_argument("--scales", help="comma-separated inference scales, e.g. 0.5,1,1.5,2")
    x.add_argument("--data", help="dataset root (defaults to the one recorded with the weights)")
    x.add_argument("--split", default="train")
    x.add_argument("--config")
    x.add_argument("--out", help="output directory (default: <weights dir>/masks)")
    x.set_defaults(func=cmd_export_masks)

    d = sub.add_parser("train-decoder", help="stage 2: train the segmentation decoder on pseudo masks")
    d.add_argument("--masks", required=True, help="directory from export-masks")
    d.add_argument("--beacon", choices=("on", "off"), default="on")
    d.add_argument("--lambda", dest="lam", type=float, help="BEACON loss weight")
    d.add_argument("--steps", type=int, help="BEACON displacement in pixels")
    d.add_argument("--k", type=int, help="BEACON samples per point set")
    d.add_argument("--tau", type=parse_tau, help="'mean' or 'fixed:<v>'")
    d.add_argument("--iters", type=int, help="override decoder_steps (training iterations)")
    d.add_argument("--weights", help="encoder weights (default: recorded in the mask index)")
    d.add_argument("--data", help="dataset root (default: recorded in the mask index)")
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--tolerance", type=int, default=2, help="boundary F tolerance in pixels")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_train_decoder)

    v = sub.add_parser("eval", help="score predictions against ground truth")
    v.add_argument("--pred", required=True, help="directory of predicted label PNGs")
    v.add_argument("--gt", required=True, help="dataset root or split directory")
    v.add_argument("--tolerance", type=int, default=2)
    v.add_argument("--out", help="write the JSON report here as well")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid and print a comparison table")
    a.add_argument("--suite", choices=("mcl", "beacon"), required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--weights", help="encoder weights (beacon suite)")
    a.add_argument("--config")
    a.add_argument("--seed", type=int)
    a.add_argument("--encoder-steps", type=int)
    a.add_argument("--iters", type=int, help="decoder training iterations")
    a.add_argument("--tolerance", type=int, default=2)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Sequence[str] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"muscle: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"muscle: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"muscle: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"muscle: training diverged at step {exc.step}: {exc.components}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
