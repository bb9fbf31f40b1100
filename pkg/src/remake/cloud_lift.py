"""Pinhole backprojection, mask-guided object extraction and PLY export.

Camera frame: x right, y down, z forward. Pixel (u, v) has its centre at
integer coordinates.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeMismatchError
from .scene_forge import CameraIntrinsics


@dataclass
class PointCloud:
    points: np.ndarray              # N x 3, metres
    pixels: np.ndarray              # N x 2, (u, v)
    colors: Optional[np.ndarray] = None  # N x 3 in [0, 1]

    def __len__(self):
        return len(self.points)


def _check_intrinsics(K: CameraIntrinsics):
    if not (K.fx > 0 and K.fy > 0 and np.isfinite([K.fx, K.fy, K.cx, K.cy]).all()):
        raise ConfigError(f"invalid intrinsics {K}")


def backproject(depth, intrinsics: CameraIntrinsics, rgb=None, select=None) -> PointCloud:
    depth = np.asarray(depth, dtype=np.float64)
    _check_intrinsics(intrinsics)
    if depth.shape != (intrinsics.height, intrinsics.width):
        raise ShapeMismatchError(f"depth {depth.shape} vs intrinsics "
                                 f"{(intrinsics.height, intrinsics.width)}")
    keep = np.isfinite(depth) & (depth > 0)
    if select is not None:
        keep &= select
    v, u = np.nonzero(keep)
    z = depth[v, u]
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    colors = None
    if rgb is not None:
        colors = np.clip(np.asarray(rgb, dtype=np.float64)[v, u], 0, 1)
    return PointCloud(points=np.stack([x, y, z], axis=1), pixels=np.stack([u, v], axis=1),
                      colors=colors)


def project(points, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points -> N x 2 pixel coordinates (u, v)."""
    p = np.asarray(points, dtype=np.float64)
    u = p[:, 0] * intrinsics.fx / p[:, 2] + intrinsics.cx
    v = p[:, 1] * intrinsics.fy / p[:, 2] + intrinsics.cy
    return np.stack([u, v], axis=1)


def extract_object(depth, mask, intrinsics: CameraIntrinsics, rgb=None) -> PointCloud:
    """Backproject only the pixels inside ``mask``. An empty mask gives an empty cloud."""
    mask = np.asarray(mask)
    if mask.shape != np.shape(depth):
        raise ShapeMismatchError(f"mask {mask.shape} vs depth {np.shape(depth)}")
    if not np.isin(mask, (0, 1)).all():
        raise ConfigError("mask must be binary")
    return backproject(depth, intrinsics, rgb, select=mask.astype(bool))


def clamp_depth(depth, z_max: float) -> np.ndarray:
    """Clamp network output to [0, z_max]; nonpositive values become missing (0)."""
    d = np.asarray(depth, dtype=np.float64)
    return np.where(d > 0, np.minimum(d, z_max), 0.0)


def write_ply(cloud: PointCloud, path, intrinsics: Optional[CameraIntrinsics] = None,
              clamp_range=None) -> None:
    """ASCII PLY with float32 x, y, z and optional uint8 colour."""
    path = Path(path)
    n = len(cloud)
    has_color = cloud.colors is not None
    lines = ["ply", "format ascii 1.0",
             "comment frame camera x-right y-down z-forward, metres"]
    if intrinsics is not None:
        K = intrinsics
        lines.append(f"comment intrinsics fx={K.fx!r} fy={K.fy!r} cx={K.cx!r} cy={K.cy!r} "
                     f"width={K.width} height={K.height}")
    if clamp_range is not None:
        lines.append(f"comment clamp {clamp_range[0]!r} {clamp_range[1]!r}")
    lines += [f"element vertex {n}", "property float x", "property float y", "property float z"]
    if has_color:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    pts = cloud.points.astype(np.float32)
    if has_color:
        cols = np.round(np.clip(cloud.colors, 0, 1) * 255).astype(np.uint8)
        body = [f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}"
                for p, c in zip(pts.tolist(), cols.tolist())]
    else:
        body = [f"{p[0]!r} {p[1]!r} {p[2]!r}" for p in pts.tolist()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines + body) + "\n")
    os.replace(tmp, path)


def read_ply(path) -> PointCloud:
    """Parse the ASCII PLY subset written by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    if not text or text[0] != "ply":
        raise ValueError(f"{path} is not a PLY file")
    end = text.index("end_header")
    header = text[:end]
    n = next(int(l.split()[2]) for l in header if l.startswith("element vertex"))
    has_color = any(l.endswith(" red") for l in header)
    if n == 0:
        return PointCloud(points=np.zeros((0, 3)), pixels=np.zeros((0, 2), dtype=int))
    rows = np.array([l.split() for l in text[end + 1:end + 1 + n]], dtype=np.float64)
    points = rows[:, :3].astype(np.float32).astype(np.float64)
    colors = rows[:, 3:6] / 255.0 if has_color else None
    return PointCloud(points=points, pixels=np.zeros((n, 2), dtype=int), colors=colors)


def write_points_csv(cloud: PointCloud, path) -> None:
    path = Path(path)
    rows = ["u,v,x,y,z"] + [f"{int(u)},{int(v)},{x!r},{y!r},{z!r}"
                            for (u, v), (x, y, z) in zip(cloud.pixels.tolist(), cloud.points.tolist())]
    path.write_text("\n".join(rows) + "\n")
