"""Command line entry point: ``remake <subcommand> ...``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cloud_lift import clamp_depth, extract_object, write_ply, write_points_csv
from .errors import ConfigError, DataError, RemakeError
from .net import ModelConfig, Variant
from .pipeline import (TrainConfig, ablate, build_dataset, build_shift_benchmark, evaluate, infer,
                       train, with_preset)
from .region_atlas import TAU_DEFAULT, classify_regions, emit_region_report, region_stats
from .scene_forge import dequantize_depth, load_split, read_sample

log = logging.getLogger("remake")


def parse_config_text(text: str) -> dict:
    """JSON object, or ``key = value`` lines (values JSON-decoded when possible).

    Dotted keys nest, e.g. ``model.dims = [32, 64]``.
    """
    text = text.strip()
    if text.startswith("{"):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad JSON config: {exc}") from exc
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value.strip("'\"")
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = parsed
    return out


def load_config_file(path) -> dict:
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _train_config(args) -> TrainConfig:
    raw = load_config_file(args.config) if args.config else {}
    try:
        model = ModelConfig(**raw.pop("model", {}))
        cfg = TrainConfig(model=model, **raw)
    except TypeError as exc:
        raise ConfigError(f"unknown config key: {exc}") from exc
    cfg = with_preset(cfg, args.preset)
    overrides = {}
    for key in ("dataset", "seed", "loss", "variant", "epochs", "out_dir"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return replace(cfg, **overrides) if overrides else cfg


def cmd_build_dataset(args):
    template = load_config_file(args.spec) if args.spec else None
    if args.shift_benchmark:
        out = build_shift_benchmark(args.out, seed=args.seed,
                                    resolution=(args.resolution, args.resolution))
    else:
        out = build_dataset(args.out, args.count, seed=args.seed, spec_template=template,
                            resolution=(args.resolution, args.resolution))
    print(out)


def cmd_train(args):
    cfg = _train_config(args)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or config key 'dataset')")
    manifest = train(cfg)
    print(json.dumps({"checkpoint": str(Path(cfg.out_dir) / manifest.checkpoint),
                      "best_epoch": manifest.best_epoch,
                      "final_loss": manifest.epoch_losses[-1]}, indent=2))


def cmd_evaluate(args):
    result = evaluate(args.checkpoint, args.dataset, split=args.split, eval_region=args.eval_region,
                      out_dir=args.out, source=args.source, variant=args.variant)
    print(json.dumps(result.aggregate.to_dict(), indent=2, sort_keys=True))


def cmd_ablate(args):
    cfg = _train_config(args)
    if not cfg.dataset:
        raise ConfigError("no dataset given (--dataset or config key 'dataset')")
    table = ablate(cfg, eval_region=args.eval_region)
    for name, rep in table.items():
        print(f"{name:>15s}  rmse {rep.rmse:.4f}  mae {rep.mae:.4f}  rel {rep.rel:.4f}")


def cmd_infer(args):
    _, outputs = infer(args.checkpoint, args.sample, args.out, variant=args.variant or "full")
    print(json.dumps(outputs, indent=2))


def cmd_analyze_regions(args):
    samples = load_split(args.dataset, args.split)
    stats = []
    for s in samples:
        rmap = classify_regions(s.depth_raw, s.depth_gt, s.mask, args.tau)
        pred = s.depth_raw
        if args.pred_dir:
            import cv2
            q = cv2.imread(str(Path(args.pred_dir) / s.meta["sample_id"] / "depth_pred.png"),
                           cv2.IMREAD_UNCHANGED)
            if q is None:
                raise DataError(f"no prediction for sample {s.meta['sample_id']} in {args.pred_dir}")
            pred = dequantize_depth(q)
        stats.append((s.meta["sample_id"], region_stats(rmap, pred, s.depth_gt)))
    emit_region_report(stats, Path(args.out) / "regions.csv")
    print(Path(args.out) / "regions.csv")


def cmd_export_cloud(args):
    sample = read_sample(args.sample, require_gt=False)
    if args.depth:
        import cv2
        q = cv2.imread(args.depth, cv2.IMREAD_UNCHANGED)
        if q is None:
            raise DataError(f"unreadable depth image {args.depth}")
        depth = dequantize_depth(q)
    elif args.use_gt:
        if sample.depth_gt is None:
            raise DataError("sample has no ground truth depth")
        depth = sample.depth_gt
    else:
        depth = sample.depth_raw
    z_max = float(sample.meta.get("z_max", 3.0))
    depth = clamp_depth(depth, z_max)
    cloud = extract_object(depth, sample.mask, sample.intrinsics, sample.rgb)
    write_ply(cloud, args.out, sample.intrinsics, clamp_range=(0.0, z_max))
    if args.csv:
        write_points_csv(cloud, args.csv)
    print(f"{len(cloud)} points -> {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="remake", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def train_opts(sp):
        sp.add_argument("--config")
        sp.add_argument("--dataset")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--preset", choices=["desk"])
        sp.add_argument("--loss", choices=["global", "mask"])
        sp.add_argument("--variant", choices=[v.value for v in Variant])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out-dir", dest="out_dir")

    sp = sub.add_parser("build-dataset", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--spec", help="scene spec / sampler overrides (JSON or key = value)")
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--shift-benchmark", action="store_true",
                    help="near-background train/val, far-background test")
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train", help="train a model")
    train_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--eval-region", choices=["mask", "all"], default="mask")
    sp.add_argument("--source", choices=["model", "raw", "gt"], default="model")
    sp.add_argument("--variant", choices=[v.value for v in Variant])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("ablate", help="train and evaluate all five input variants")
    train_opts(sp)
    sp.add_argument("--eval-region", choices=["mask", "all"], default="mask")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("infer", help="complete depth for one sample directory")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sample", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant", choices=[v.value for v in Variant])
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("analyze-regions", help="per-region error report for a split")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--tau", type=float, default=TAU_DEFAULT)
    sp.add_argument("--pred-dir", help="directory of <sample_id>/depth_pred.png; raw depth if omitted")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_analyze_regions)

    sp = sub.add_parser("export-cloud", help="write the masked object's point cloud")
    sp.add_argument("--sample", required=True)
    sp.add_argument("--depth", help="16-bit depth PNG (0.1 mm units); raw depth if omitted")
    sp.add_argument("--use-gt", action="store_true")
    sp.add_argument("--out", required=True)
    sp.add_argument("--csv")
    sp.set_defaults(func=cmd_export_cloud)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except RemakeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
