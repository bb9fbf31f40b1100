"""Dataset builds, training, evaluation, ablation and inference."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import __version__
from .cloud_lift import clamp_depth, extract_object, write_ply
from .errors import ConfigError, DataError, EmptyRegionError, NumericError, ShapeMismatchError
from .metrics import (EvalRegion, MetricsReport, compute_metrics, global_l1, masked_l1,
                      mean_reports, metrics_by_region)
from .net import ModelConfig, Variant, apply_variant, init_params, load_checkpoint, save_checkpoint
from .region_atlas import (TAU_DEFAULT, classify_regions, emit_region_report, region_stats,
                           write_error_heatmap)
from .relative_depth import ingest_external_map, proxy_relative_depth
from .scene_forge import (SceneSpec, generate_scene, load_split, random_scene_spec, read_sample,
                          sample_ids, write_depth_png, write_sample)

log = logging.getLogger(__name__)

LOSS_REGIMES = ("global", "mask")
REL_SOURCES = ("proxy", "external")


@dataclass
class TrainConfig:
    dataset: str = ""
    split: str = "train"
    val_split: str = "val"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: str = "global"
    lr: float = 1e-3
    weight_decay: float = 0.01
    decay_factor: float = 0.1
    decay_period: int = 15
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    grad_clip: Optional[float] = 1.0
    out_dir: str = "runs/default"
    rel_source: str = "proxy"
    rel_noise: float = 0.0
    variant: str = "full"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.loss = str(self.loss).lower()
        self.variant = Variant.parse(self.variant).value
        if self.loss not in LOSS_REGIMES:
            raise ConfigError(f"loss must be one of {LOSS_REGIMES}, got {self.loss!r}")
        if self.rel_source not in REL_SOURCES:
            raise ConfigError(f"rel_source must be one of {REL_SOURCES}, got {self.rel_source!r}")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if self.epochs < 1 or self.decay_period < 1 or self.batch_size < 1:
            raise ConfigError("epochs, decay_period and batch_size must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


DESK_PRESET = {"epochs": 150, "decay_period": 60, "batch_size": 8,
               "model": {"height": 32, "width": 32}}


def with_preset(cfg: TrainConfig, preset: Optional[str]) -> TrainConfig:
    if preset is None:
        return cfg
    if preset != "desk":
        raise ConfigError(f"unknown preset {preset!r}")
    model = replace(cfg.model, **DESK_PRESET["model"])
    return replace(cfg, model=model, **{k: v for k, v in DESK_PRESET.items() if k != "model"})


def lr_at(epoch: int, lr0: float, period: int, factor: float = 0.1) -> float:
    return lr0 * factor ** (epoch // period)


# -- dataset -----------------------------------------------------------------

def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, bytes):
        tmp.write_bytes(data)
    else:
        tmp.write_text(data)
    os.replace(tmp, path)


def split_counts(count: int):
    n_train = int(round(0.8 * count))
    n_val = int(round(0.1 * count))
    return n_train, n_val, count - n_train - n_val


def build_dataset(out_dir, count: int, seed: int = 0, spec_template: Optional[dict] = None,
                  resolution=(32, 32), test_overrides: Optional[dict] = None,
                  split_sizes: Optional[tuple] = None) -> Path:
    """Generate ``count`` scenes with an 80/10/10 split.

    ``spec_template`` either holds keyword overrides for the random scene
    sampler, or a full scene spec (key ``primitives``) that is reused with a
    fresh seed per sample. ``test_overrides`` are applied on top for the test
    split only, which is how the distribution-shift benchmark is built.
    ``split_sizes`` (train, val, test) replaces the 80/10/10 rule.
    """
    if count < 1:
        raise ConfigError("dataset count must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    template = dict(spec_template or {})
    if split_sizes is not None:
        if sum(split_sizes) != count or min(split_sizes) < 0:
            raise ConfigError(f"split sizes {split_sizes} do not add up to {count}")
        n_train, n_val, _ = split_sizes
    else:
        n_train, n_val, _ = split_counts(count)
    splits = {"train": [], "val": [], "test": []}
    ss = np.random.SeedSequence(seed)
    sample_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(count)]
    for i, s_seed in enumerate(sample_seeds):
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        kwargs = dict(template)
        if split == "test" and test_overrides:
            kwargs.update(test_overrides)
        if "primitives" in kwargs:
            kwargs["seed"] = s_seed
            spec = SceneSpec.from_dict(kwargs)
        else:
            kwargs.setdefault("resolution", tuple(resolution))
            spec = _sample_spec_with_retry(s_seed, kwargs)
        sid = f"{i:05d}"
        write_sample(generate_scene(spec), out / sid)
        splits[split].append(sid)
    index = {"format": "remake-dataset/1", "seed": seed, "count": count, "splits": splits}
    _atomic_write(out / "index.json", json.dumps(index, indent=2, sort_keys=True))
    return out


def _sample_spec_with_retry(seed, kwargs, attempts=20):
    for k in range(attempts):
        spec = random_scene_spec(seed + k * 7919, **kwargs)
        try:
            generate_scene(spec)
            return spec
        except DataError:
            continue
    raise DataError(f"could not sample a valid scene for seed {seed}")


SHIFT_NEAR = {"background_range": (0.6, 0.8)}
SHIFT_FAR = {"background_range": (0.9, 1.1)}


def build_shift_benchmark(out_dir, seed: int = 0, split_sizes=(64, 8, 24), resolution=(32, 32)) -> Path:
    """Train/val scenes with near backgrounds, test scenes with far backgrounds."""
    return build_dataset(out_dir, sum(split_sizes), seed, spec_template=SHIFT_NEAR,
                         resolution=resolution, test_overrides=SHIFT_FAR, split_sizes=split_sizes)


# -- tensors -----------------------------------------------------------------

def relative_map_for(sample, cfg: TrainConfig | None = None, rel_source="proxy", rel_noise=0.0):
    if cfg is not None:
        rel_source, rel_noise = cfg.rel_source, cfg.rel_noise
    src = sample.meta.get("source_dir")
    if rel_source == "external":
        if src is None:
            raise DataError("external relative depth requires samples loaded from disk")
        for name in ("relative.f32", "relative.png"):
            p = Path(src) / name
            if p.exists():
                return ingest_external_map(p, sample.shape)
        raise DataError(f"no relative.f32 / relative.png in {src}")
    reference = sample.depth_gt if sample.depth_gt is not None else sample.depth_raw
    seed = sample.meta.get("seed") or 0
    return proxy_relative_depth(reference, rel_noise, seed=seed)


@dataclass
class Batchable:
    ids: list
    rgb: torch.Tensor
    mask: torch.Tensor
    rel: torch.Tensor
    depth: torch.Tensor
    gt: torch.Tensor
    samples: list

    def __len__(self):
        return len(self.ids)


def to_tensors(samples, cfg: TrainConfig, dtype=torch.float32) -> Batchable:
    if not samples:
        raise DataError("split is empty")
    shape = (cfg.model.height, cfg.model.width)
    for s in samples:
        if s.shape != shape:
            raise ShapeMismatchError(f"sample {s.meta.get('sample_id')} is {s.shape}, model expects {shape}")
    rel = [relative_map_for(s, cfg).values for s in samples]
    f = lambda arrs: torch.as_tensor(np.stack(arrs), dtype=dtype)
    return Batchable(
        ids=[s.meta.get("sample_id", str(i)) for i, s in enumerate(samples)],
        rgb=f([s.rgb for s in samples]), mask=f([s.mask for s in samples]), rel=f(rel),
        depth=f([s.depth_raw for s in samples]), gt=f([s.depth_gt for s in samples]),
        samples=samples)


def _loss(regime, pred, gt, mask):
    return masked_l1(pred, gt, mask) if regime == "mask" else global_l1(pred, gt)


def _predict(net, data: Batchable, idx, variant):
    m, r, d = apply_variant(variant, data.mask[idx], data.rel[idx], data.depth[idx])
    return net(data.rgb[idx], m, r, d)


def _batch_hash(ids) -> str:
    return hashlib.sha256(",".join(ids).encode()).hexdigest()[:16]


# -- training ----------------------------------------------------------------

@dataclass
class RunManifest:
    config: dict
    epoch_losses: list
    val_losses: list
    lr_trace: list
    batch_hashes: list
    best_epoch: int
    selection: str
    checkpoint: str
    checkpoint_sha256: str
    final_metrics: Optional[dict]
    wall_clock_s: float
    version: str = __version__

    def to_dict(self):
        return asdict(self)


def train(cfg: TrainConfig, train_samples=None, val_samples=None) -> RunManifest:
    """Train under the configured loss and step schedule; writes checkpoints and manifest.json.

    Samples are read from ``cfg.dataset`` unless passed in directly.
    """
    t0 = time.perf_counter()
    if train_samples is None:
        train_samples = load_split(cfg.dataset, cfg.split)
        if val_samples is None and cfg.val_split:
            try:
                val_samples = load_split(cfg.dataset, cfg.val_split)
            except DataError:
                val_samples = []
    if not train_samples:
        raise DataError(f"training split {cfg.split!r} is empty")
    data = to_tensors(train_samples, cfg)
    val = to_tensors(val_samples, cfg) if val_samples else None
    variant = Variant.parse(cfg.variant)

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = init_params(cfg.model, cfg.seed)
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)

    epoch_losses, val_losses, lr_trace, hashes = [], [], [], []
    best_val, best_epoch = float("inf"), -1
    best_path, last_path = out / "best.ckpt", out / "last.ckpt"
    meta = {"config": cfg.to_dict(), "version": __version__}
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr, cfg.decay_period, cfg.decay_factor)
        for group in opt.param_groups:
            group["lr"] = lr
        lr_trace.append(lr)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        net.train()
        batch_losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            ids = [data.ids[i] for i in idx.tolist()]
            hashes.append(_batch_hash(ids))
            pred = _predict(net, data, idx, variant)
            try:
                loss = _loss(cfg.loss, pred, data.gt[idx], data.mask[idx])
            except EmptyRegionError:
                continue  # no supervised pixel in this batch
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b} (samples {ids})")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
            opt.step()
            batch_losses.append(float(loss.detach()))
        epoch_losses.append(float(np.mean(batch_losses)) if batch_losses else float("nan"))

        if val is not None:
            net.eval()
            with torch.no_grad():
                idx = torch.arange(len(val))
                v = float(_loss(cfg.loss, _predict(net, val, idx, variant), val.gt, val.mask))
            val_losses.append(v)
            if v < best_val:
                best_val, best_epoch = v, epoch
                save_checkpoint(net, best_path, {**meta, "epoch": epoch, "val_loss": v})
        log.info("epoch %d lr %.2e loss %.5f%s", epoch, lr, epoch_losses[-1],
                 f" val {val_losses[-1]:.5f}" if val_losses else "")

    last_sha = save_checkpoint(net, last_path, {**meta, "epoch": cfg.epochs - 1})
    if best_epoch >= 0:
        selection, ckpt = "best-validation", best_path
        sha = hashlib.sha256(best_path.read_bytes()).hexdigest()
    else:
        selection, ckpt, sha, best_epoch = "last-epoch", last_path, last_sha, cfg.epochs - 1
    manifest = RunManifest(
        config=cfg.to_dict(), epoch_losses=epoch_losses, val_losses=val_losses, lr_trace=lr_trace,
        batch_hashes=hashes, best_epoch=best_epoch, selection=selection, checkpoint=ckpt.name,
        checkpoint_sha256=sha, final_metrics=None, wall_clock_s=time.perf_counter() - t0)
    _atomic_write(out / "manifest.json", json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
    return manifest


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalResult:
    aggregate: MetricsReport
    per_sample: list            # (sample_id, MetricsReport)
    regions: dict               # region name -> MetricsReport | None (mean over samples)
    region_stats: list          # (sample_id, RegionStats)

    def to_dict(self):
        return {
            "aggregate": self.aggregate.to_dict(),
            "per_sample": {sid: r.to_dict() for sid, r in self.per_sample},
            "regions": {k: (v.to_dict() if v is not None else None) for k, v in self.regions.items()},
        }


def predict_samples(net, samples, cfg: TrainConfig, variant=None):
    variant = Variant.parse(variant or cfg.variant)
    data = to_tensors(samples, cfg, dtype=next(net.parameters()).dtype)
    net.eval()
    with torch.no_grad():
        pred = _predict(net, data, torch.arange(len(data)), variant)
    return [clamp_depth(p.double().numpy(), cfg.model.z_max) for p in pred]


def evaluate_predictions(samples, preds, eval_region="mask", tau=TAU_DEFAULT) -> EvalResult:
    region = _eval_region(eval_region)
    per_sample, per_region, stats = [], {}, []
    for s, pred in zip(samples, preds):
        sid = s.meta.get("sample_id", str(len(per_sample)))
        if pred.shape != s.shape:
            raise ShapeMismatchError(f"prediction {pred.shape} vs sample {s.shape}")
        sel = s.mask.astype(bool) if region is EvalRegion.TRANSPARENT_MASK else np.ones(s.shape, bool)
        per_sample.append((sid, compute_metrics(pred, s.depth_gt, sel, eval_region=region)))
        rmap = classify_regions(s.depth_raw, s.depth_gt, s.mask, tau)
        for name, rep in metrics_by_region(pred, s.depth_gt, rmap).items():
            if rep is not None:
                per_region.setdefault(name, []).append(rep)
        stats.append((sid, region_stats(rmap, pred, s.depth_gt)))
    regions = {name: (mean_reports(per_region[name]) if name in per_region else None)
               for name in ("REFRACTION", "REFLECTION", "NORMAL")}
    return EvalResult(aggregate=mean_reports([r for _, r in per_sample], region),
                      per_sample=per_sample, regions=regions, region_stats=stats)


def _eval_region(v) -> EvalRegion:
    if isinstance(v, EvalRegion):
        return v
    v = str(v).lower()
    if v in ("mask", "transparent_mask"):
        return EvalRegion.TRANSPARENT_MASK
    if v in ("all", "all_valid"):
        return EvalRegion.ALL_VALID
    raise ConfigError(f"eval region must be 'mask' or 'all', got {v!r}")


def metrics_json(result: EvalResult) -> str:
    return json.dumps(result.to_dict(), indent=2, sort_keys=True)


def evaluate(checkpoint, dataset, split="test", eval_region="mask", out_dir=None,
             source="model", variant=None, tau=TAU_DEFAULT, rel_source=None, rel_noise=None) -> EvalResult:
    """Evaluate a checkpoint (or the raw/gt depth when ``source`` says so) on a split.

    Writes ``metrics.json``, ``per_sample.csv`` and ``regions.csv`` (+ heatmaps)
    into ``out_dir`` when given.
    """
    samples = load_split(dataset, split)
    if not samples:
        raise DataError(f"split {split!r} is empty")
    if source == "model":
        net, meta = load_checkpoint(checkpoint)
        cfg = TrainConfig(**{k: v for k, v in meta.get("config", {}).items()
                             if k in TrainConfig.__dataclass_fields__})
        cfg.model = net.cfg
        if rel_source is not None:
            cfg.rel_source = rel_source
        if rel_noise is not None:
            cfg.rel_noise = rel_noise
        if samples[0].shape != (net.cfg.height, net.cfg.width):
            raise ShapeMismatchError(f"checkpoint expects {(net.cfg.height, net.cfg.width)}, "
                                     f"dataset has {samples[0].shape}")
        preds = predict_samples(net, samples, cfg, variant)
    elif source == "raw":
        preds = [s.depth_raw.copy() for s in samples]
    elif source == "gt":
        preds = [s.depth_gt.copy() for s in samples]
    else:
        raise ConfigError(f"unknown prediction source {source!r}")
    result = evaluate_predictions(samples, preds, eval_region, tau)
    if out_dir is not None:
        write_eval_outputs(result, out_dir)
    return result


def write_eval_outputs(result: EvalResult, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "metrics.json", metrics_json(result))
    buf = io.StringIO()
    keys = list(result.aggregate.to_dict())
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id"] + keys)
    for sid, rep in result.per_sample:
        w.writerow([sid] + [rep.to_dict()[k] for k in keys])
    _atomic_write(out / "per_sample.csv", buf.getvalue())
    emit_region_report(result.region_stats, out / "regions.csv")


# -- ablation ----------------------------------------------------------------

ABLATION_ORDER = (Variant.FULL, Variant.BLANK, Variant.NO_REL, Variant.NO_MASK, Variant.NO_TRANS_DEPTH)


def ablate(base: TrainConfig, eval_split="test", eval_region="mask", variants=ABLATION_ORDER):
    """Train and evaluate each variant with identical seed and data order.

    Returns {variant value: MetricsReport} and writes ``ablation.csv`` /
    ``ablation.json`` under ``base.out_dir``.
    """
    root = Path(base.out_dir)
    train_samples = load_split(base.dataset, base.split)
    val_samples = load_split(base.dataset, base.val_split) if base.val_split else []
    test_samples = load_split(base.dataset, eval_split)
    table, hashes = {}, {}
    for v in variants:
        v = Variant.parse(v)
        cfg = replace(base, variant=v.value, out_dir=str(root / v.value))
        manifest = train(cfg, train_samples, val_samples)
        hashes[v.value] = manifest.batch_hashes
        net, _ = load_checkpoint(Path(cfg.out_dir) / manifest.checkpoint)
        preds = predict_samples(net, test_samples, cfg, v)
        table[v.value] = evaluate_predictions(test_samples, preds, eval_region).aggregate
    same_batches = len({tuple(h) for h in hashes.values()}) == 1
    rows = [{"variant": k, **rep.to_dict()} for k, rep in table.items()]
    _atomic_write(root / "ablation.json", json.dumps(
        {"rows": rows, "identical_batches": same_batches}, indent=2, sort_keys=True))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _atomic_write(root / "ablation.csv", buf.getvalue())
    if not same_batches:
        raise NumericError("ablation variants consumed different batch sequences")
    return table


# -- inference ---------------------------------------------------------------

def infer(checkpoint, sample_dir, out_dir, variant="full", rel_source=None):
    """Complete one sample's depth and export depth PNG, error map (if gt) and object PLY."""
    net, meta = load_checkpoint(checkpoint)
    sample = read_sample(sample_dir, require_gt=False)
    cfg_d = meta.get("config", {})
    rel_src = rel_source or cfg_d.get("rel_source", "proxy")
    if rel_src == "external":
        rel = relative_map_for(sample, rel_source="external")
    else:
        rel = relative_map_for(sample, rel_source="proxy", rel_noise=cfg_d.get("rel_noise", 0.0))
    if sample.shape != (net.cfg.height, net.cfg.width):
        raise ShapeMismatchError(f"checkpoint expects {(net.cfg.height, net.cfg.width)}, sample is {sample.shape}")
    v = Variant.parse(variant)
    with torch.no_grad():
        t = lambda a: torch.as_tensor(np.asarray(a), dtype=torch.float32).unsqueeze(0)
        m, r, d = apply_variant(v, t(sample.mask), t(rel.values), t(sample.depth_raw))
        raw_pred = net(t(sample.rgb), m, r, d)[0].double().numpy()
    z_max = net.cfg.z_max
    pred = clamp_depth(raw_pred, z_max)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_depth_png(out / "depth_pred.png", pred)
    outputs = {"depth": str(out / "depth_pred.png")}
    if sample.depth_gt is not None:
        err = np.where(sample.depth_gt > 0, np.abs(pred - sample.depth_gt), 0.0)
        write_error_heatmap(err, out / "abs_error.png")
        outputs["error_map"] = str(out / "abs_error.png")
    cloud = extract_object(pred, sample.mask, sample.intrinsics, sample.rgb)
    write_ply(cloud, out / "object.ply", sample.intrinsics, clamp_range=(0.0, z_max))
    outputs["ply"] = str(out / "object.ply")
    outputs["points"] = len(cloud)
    return pred, outputs
