"""Reflection / refraction / normal analysis of transparent pixels.

Labels are recovered from (raw, gt, mask) alone, then used to break depth
errors down per region and to write CSV reports and error heatmaps.
"""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .scene_forge import Region

TAU_DEFAULT = 0.001
TRANSPARENT_REGIONS = (Region.REFRACTION, Region.REFLECTION, Region.NORMAL)


@dataclass
class RegionMap:
    labels: np.ndarray
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def classify_regions(depth_raw, depth_gt, mask, tau: float = TAU_DEFAULT) -> RegionMap:
    raw = np.asarray(depth_raw, dtype=np.float64)
    gt = np.asarray(depth_gt, dtype=np.float64)
    m = np.asarray(mask).astype(bool)
    if not (raw.shape == gt.shape == m.shape):
        raise ShapeMismatchError(f"raw {raw.shape}, gt {gt.shape}, mask {m.shape} must match")
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    labels = np.full(raw.shape, Region.BACKGROUND, dtype=np.uint8)
    refl = m & (raw == 0)
    off = np.abs(raw - gt) > tau
    labels[m & ~refl & off] = Region.REFRACTION
    labels[m & ~refl & ~off] = Region.NORMAL
    labels[refl] = Region.REFLECTION
    return RegionMap(labels=labels, tau=float(tau))


@dataclass
class RegionError:
    """Error summary over one region. ``rmse``/``mae`` are None when the region is empty."""

    count: int
    fraction: float
    rmse: Optional[float]
    mae: Optional[float]
    evaluated: int = 0

    @property
    def absent(self) -> bool:
        return self.rmse is None


@dataclass
class RegionStats:
    regions: dict = field(default_factory=dict)  # Region name -> RegionError
    abs_error: Optional[np.ndarray] = None

    def __getitem__(self, region) -> RegionError:
        name = region.name if isinstance(region, Region) else str(region)
        return self.regions[name]


def region_stats(region_map: RegionMap, pred, depth_gt) -> RegionStats:
    labels = region_map.labels
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(depth_gt, dtype=np.float64)
    if not (labels.shape == pred.shape == gt.shape):
        raise ShapeMismatchError(f"labels {labels.shape}, pred {pred.shape}, gt {gt.shape} must match")
    n_trans = int(np.count_nonzero(labels != Region.BACKGROUND))
    err = np.abs(pred - gt)
    stats = RegionStats(abs_error=np.where(gt > 0, err, 0.0))
    for region in TRANSPARENT_REGIONS:
        in_region = labels == region
        count = int(in_region.sum())
        sel = in_region & (gt > 0)
        e = err[sel]
        if e.size:
            rmse, mae = float(np.sqrt(np.mean(e * e))), float(np.mean(e))
        else:
            rmse = mae = None
        stats.regions[region.name] = RegionError(
            count=count, fraction=count / n_trans if n_trans else 0.0,
            rmse=rmse, mae=mae, evaluated=int(e.size))
    return stats


def _fmt(x) -> str:
    return "absent" if x is None else repr(float(x))


def emit_region_report(stats_list: Sequence, path, heatmap_scale: Optional[float] = None) -> None:
    """Write a per-(sample, region, metric) CSV and one error heatmap per sample.

    ``stats_list`` holds (sample_id, RegionStats) pairs. Heatmaps go next to
    the CSV as ``<sample_id>_abs_error.png`` with a JSON sidecar giving the
    metres-per-level scale.
    """
    if not stats_list:
        raise ConfigError("region report needs at least one sample")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "region", "metric", "value", "pixel_count"])
    for sample_id, stats in stats_list:
        for region in TRANSPARENT_REGIONS:
            r = stats[region]
            writer.writerow([sample_id, region.name, "rmse", _fmt(r.rmse), r.evaluated])
            writer.writerow([sample_id, region.name, "mae", _fmt(r.mae), r.evaluated])
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)

    for sample_id, stats in stats_list:
        if stats.abs_error is not None:
            write_error_heatmap(stats.abs_error, path.parent / f"{sample_id}_abs_error.png",
                                scale=heatmap_scale)


def write_error_heatmap(abs_error, path, scale: Optional[float] = None) -> float:
    """Linear 8-bit map of absolute error; level 255 = ``scale`` metres.

    Returns the scale used (max error when not given).
    """
    e = np.asarray(abs_error, dtype=np.float64)
    if scale is None:
        scale = float(e.max()) if e.size and e.max() > 0 else 1.0
    img = np.round(np.clip(e / scale, 0, 1) * 255).astype(np.uint8)
    path = Path(path)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")
    sidecar = {"metres_per_level": scale / 255.0, "max_metres": scale, "colormap": "linear-gray"}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return scale
