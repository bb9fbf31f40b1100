"""L1 supervision (masked and global) and the depth evaluation suite."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, EmptyRegionError, ShapeMismatchError
from .scene_forge import Region

DELTA_THRESHOLDS = (1.01, 1.03, 1.05, 1.10, 1.25)


class EvalRegion(str, Enum):
    TRANSPARENT_MASK = "TRANSPARENT_MASK"
    ALL_VALID = "ALL_VALID"


def delta_key(t: float) -> str:
    return "delta_" + f"{t:.2f}".replace(".", "_")


@dataclass
class MetricsReport:
    rmse: float
    rel: float
    mae: float
    delta: dict
    eval_region: EvalRegion
    pixel_count: int

    def to_dict(self) -> dict:
        d = {"rmse_m": self.rmse, "rel": self.rel, "mae_m": self.mae}
        for t, v in sorted(self.delta.items()):
            d[delta_key(t)] = v
        d["eval_region"] = EvalRegion(self.eval_region).value
        d["pixel_count"] = int(self.pixel_count)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        delta = {float(k[len("delta_"):].replace("_", ".")): float(v)
                 for k, v in d.items() if k.startswith("delta_")}
        return cls(rmse=float(d["rmse_m"]), rel=float(d["rel"]), mae=float(d["mae_m"]),
                   delta=delta, eval_region=EvalRegion(d["eval_region"]),
                   pixel_count=int(d["pixel_count"]))


METRICS_SCHEMA = {
    "type": "object",
    "required": ["rmse_m", "rel", "mae_m", *(delta_key(t) for t in DELTA_THRESHOLDS),
                 "eval_region", "pixel_count"],
    "properties": {
        "rmse_m": {"type": "number", "minimum": 0},
        "rel": {"type": "number", "minimum": 0},
        "mae_m": {"type": "number", "minimum": 0},
        **{delta_key(t): {"type": "number", "minimum": 0, "maximum": 100} for t in DELTA_THRESHOLDS},
        "eval_region": {"enum": [e.value for e in EvalRegion]},
        "pixel_count": {"type": "integer", "minimum": 1},
    },
}


# -- losses ----------------------------------------------------------------
# Work on numpy arrays or torch tensors; torch inputs stay differentiable.

def _l1_mean(pred, gt, sel):
    if isinstance(pred, torch.Tensor):
        sel = torch.as_tensor(sel, device=pred.device)
        n = sel.sum()
        if int(n) == 0:
            raise EmptyRegionError("loss region is empty (no valid ground-truth pixels)")
        return ((pred - gt).abs() * sel).sum() / n
    sel = np.asarray(sel, dtype=bool)
    if not sel.any():
        raise EmptyRegionError("loss region is empty (no valid ground-truth pixels)")
    return float(np.mean(np.abs(np.asarray(pred, dtype=np.float64)[sel] - np.asarray(gt)[sel])))


def _check_shapes(*arrs):
    shapes = {tuple(a.shape) for a in arrs}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"shapes differ: {sorted(shapes)}")


def global_l1(pred, gt):
    """Mean |pred - gt| over all pixels with gt > 0."""
    _check_shapes(pred, gt)
    return _l1_mean(pred, gt, gt > 0)


def masked_l1(pred, gt, mask):
    """Mean |pred - gt| over pixels with mask = 1 and gt > 0."""
    _check_shapes(pred, gt, mask)
    return _l1_mean(pred, gt, (mask > 0) & (gt > 0))


# -- metrics ---------------------------------------------------------------

def compute_metrics(pred, gt, eval_mask=None, thresholds=DELTA_THRESHOLDS,
                    eval_region: EvalRegion = EvalRegion.TRANSPARENT_MASK) -> MetricsReport:
    """RMSE, REL, MAE and delta accuracies over ``eval_mask`` & (gt > 0).

    A pixel counts toward delta_t when max(d/d*, d*/d) < t (strict). Pixels
    with pred <= 0 always fail delta but still enter RMSE/MAE/REL. With
    ``eval_mask=None`` every valid pixel is used.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if eval_mask is None:
        eval_mask = np.ones(gt.shape, dtype=bool)
        eval_region = EvalRegion.ALL_VALID
    eval_mask = np.asarray(eval_mask).astype(bool)
    _check_shapes(pred, gt, eval_mask)
    if any(t <= 0 for t in thresholds):
        raise ConfigError(f"thresholds must be positive, got {thresholds}")
    sel = eval_mask & (gt > 0)
    n = int(sel.sum())
    if n == 0:
        raise EmptyRegionError("evaluation region is empty")
    d, ds = pred[sel], gt[sel]
    diff = d - ds
    positive = d > 0
    safe = np.where(positive, d, 1.0)
    ratio = np.where(positive, np.maximum(safe / ds, ds / safe), np.inf)
    delta = {float(t): 100.0 * np.count_nonzero(ratio < t) / n for t in thresholds}
    return MetricsReport(
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rel=float(np.mean(np.abs(diff) / ds)),
        mae=float(np.mean(np.abs(diff))),
        delta=delta,
        eval_region=EvalRegion(eval_region),
        pixel_count=n,
    )


def metrics_by_region(pred, gt, region_map, thresholds=DELTA_THRESHOLDS) -> dict:
    """compute_metrics per transparent region; empty regions map to None."""
    labels = getattr(region_map, "labels", region_map)
    out = {}
    for region in (Region.REFRACTION, Region.REFLECTION, Region.NORMAL):
        sel = (labels == region) & (np.asarray(gt) > 0)
        out[region.name] = (compute_metrics(pred, gt, sel, thresholds) if sel.any() else None)
    return out


def mean_reports(reports, eval_region=None) -> MetricsReport:
    """Unweighted mean of per-sample reports; pixel counts add up."""
    reports = list(reports)
    if not reports:
        raise EmptyRegionError("no reports to aggregate")
    keys = reports[0].delta.keys()
    return MetricsReport(
        rmse=float(np.mean([r.rmse for r in reports])),
        rel=float(np.mean([r.rel for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        delta={k: float(np.mean([r.delta[k] for r in reports])) for k in keys},
        eval_region=eval_region or reports[0].eval_region,
        pixel_count=int(sum(r.pixel_count for r in reports)),
    )
