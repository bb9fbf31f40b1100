"""Affine-invariant relative depth maps (near = 1, far = 0)."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import distance_transform_edt

from .errors import DataError, MissingFileError
from .scene_forge import smooth_noise

log = logging.getLogger(__name__)


class Provenance(str, Enum):
    PROXY = "proxy"
    EXTERNAL = "external"


@dataclass
class RelativeDepthMap:
    values: np.ndarray
    provenance: Provenance
    warnings: list = field(default_factory=list)

    def __post_init__(self):
        v = self.values
        if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
            raise DataError("relative depth values must be finite and within [0, 1]")


def _normalize_near_is_one(d: np.ndarray, valid: np.ndarray) -> np.ndarray:
    lo, hi = d[valid].min(), d[valid].max()
    out = np.full(d.shape, 0.5)
    if hi > lo:
        out[valid] = (hi - d[valid]) / (hi - lo)
    return out


def _fill_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all():
        return values
    _, (iy, ix) = distance_transform_edt(~valid, return_indices=True)
    return values[iy, ix]


def proxy_relative_depth(depth_gt, noise_amplitude: float = 0.0, seed=0) -> RelativeDepthMap:
    """Stand-in for a monocular estimator: min-max normalised inverse ordering of ``depth_gt``.

    Invalid (<= 0) pixels take the value of their nearest valid neighbour. A
    smooth seeded perturbation of at most ``noise_amplitude`` emulates
    estimator error.
    """
    d = np.asarray(depth_gt, dtype=np.float64)
    valid = np.isfinite(d) & (d > 0)
    if not valid.any():
        raise DataError("relative depth needs at least one valid (>0) depth pixel")
    rel = _fill_nearest(_normalize_near_is_one(d, valid), valid)
    if noise_amplitude > 0:
        corr = 0.1 * max(d.shape)
        rel = np.clip(rel + noise_amplitude * smooth_noise(d.shape, [seed, 3], corr), 0.0, 1.0)
    return RelativeDepthMap(values=rel, provenance=Provenance.PROXY)


def ingest_external_map(path, target_shape) -> RelativeDepthMap:
    """Load an estimator's output and bring it to ``target_shape`` in [0, 1].

    Accepts a 16-bit PNG, or a little-endian float32 ``.f32``/``.raw`` grid
    with a ``.json`` sidecar holding ``shape`` and ``convention``
    (``"near_is_high"``, the default, or ``"far_is_high"``). PNG input is
    assumed near-is-high, as disparity-style estimators emit.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"external relative depth map {path} not found")
    convention = "near_is_high"
    if path.suffix.lower() == ".png":
        img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if img is None or img.ndim != 2:
            raise DataError(f"{path} is not a single-channel image")
        grid = img.astype(np.float64)
    else:
        sidecar = path.with_suffix(".json")
        try:
            info = json.loads(sidecar.read_text())
            shape = tuple(info["shape"])
            convention = info.get("convention", convention)
            grid = np.fromfile(path, dtype="<f4").astype(np.float64).reshape(shape)
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read float grid {path}: {exc}") from exc
    if not np.all(np.isfinite(grid)):
        raise DataError(f"{path} contains non-finite values")

    warnings = []
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        norm = (grid - lo) / (hi - lo)
        if convention == "far_is_high":
            norm = 1.0 - norm
    else:
        msg = f"{path.name}: constant map, normalised to 0.5"
        log.warning(msg)
        warnings.append(msg)
        norm = np.full(grid.shape, 0.5)
    th, tw = target_shape
    if norm.shape != (th, tw):
        norm = resize_bilinear_aligned(norm, (th, tw))
    return RelativeDepthMap(values=np.clip(norm, 0.0, 1.0), provenance=Provenance.EXTERNAL,
                            warnings=warnings)


def resize_bilinear_aligned(img: np.ndarray, shape) -> np.ndarray:
    """Bilinear resize with corner alignment (corner samples map onto corner samples)."""
    h, w = img.shape
    th, tw = shape
    ys = np.linspace(0, h - 1, th) if th > 1 else np.zeros(1)
    xs = np.linspace(0, w - 1, tw) if tw > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def write_external_map(values: np.ndarray, path) -> None:
    """Write a float grid in the external-map format (``.f32`` + sidecar)."""
    path = Path(path)
    np.asarray(values, dtype="<f4").tofile(path)
    path.with_suffix(".json").write_text(
        json.dumps({"shape": list(values.shape), "convention": "near_is_high", "dtype": "float32-le"}))
