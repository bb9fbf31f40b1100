"""Synthetic transparent-object RGB-D scenes and the on-disk sample format.

Scenes are rendered by analytic ray casting through a pinhole camera at the
origin looking down +z. Depth is the z coordinate of the hit point, so for a
ray with direction ((u-cx)/fx, (v-cy)/fy, 1) the ray parameter *is* the depth.

Transparent pixels are split into three sensor behaviours:

* REFLECTION: no return, raw depth is 0
* REFRACTION: raw depth = gt * (1 + eps), eps smooth with sign changes
* NORMAL: raw depth = gt
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import (
    ConfigError,
    MalformedMetadataError,
    MissingFileError,
    MissingGroundTruthError,
    RatioUnreachableError,
    ShapeMismatchError,
)

DEPTH_UNIT_M = 1e-4
Z_MAX_DEFAULT = 3.0
FORMAT_VERSION = "remake-sample/1"


class Region(IntEnum):
    BACKGROUND = 0
    NORMAL = 1
    REFRACTION = 2
    REFLECTION = 3


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ConfigError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @classmethod
    def from_fov(cls, height: int, width: int, fov_deg: float = 60.0) -> "CameraIntrinsics":
        """Square pixels, horizontal field of view ``fov_deg``, centred principal point."""
        f = width / (2.0 * np.tan(np.deg2rad(fov_deg) / 2.0))
        return cls(fx=f, fy=f, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)

    def ray_directions(self) -> np.ndarray:
        """H x W x 3 unnormalised ray directions through pixel centres (z component 1)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones_like(u)], axis=-1)


def _rotation(euler) -> np.ndarray:
    rx, ry, rz = euler
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


@dataclass(frozen=True)
class Primitive:
    """A sphere, cylinder or box.

    ``size`` is (radius,) for spheres, (radius, half_height) for cylinders
    (axis along local y) and (hx, hy, hz) half extents for boxes.
    """

    kind: str
    center: tuple
    size: tuple
    rotation: tuple = (0.0, 0.0, 0.0)
    transparent: bool = False
    color: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        expected = {"sphere": 1, "cylinder": 2, "box": 3}
        if self.kind not in expected:
            raise ConfigError(f"unknown primitive kind {self.kind!r}")
        if len(self.size) != expected[self.kind] or min(self.size) <= 0:
            raise ConfigError(f"{self.kind} needs {expected[self.kind]} positive size values, got {self.size}")
        if len(self.center) != 3 or len(self.rotation) != 3 or len(self.color) != 3:
            raise ConfigError("center, rotation and color must have 3 components")

    def intersect(self, dirs: np.ndarray):
        """Nearest positive hit of rays from the origin along ``dirs``.

        Returns (t, normal) with t = inf where the ray misses. Normals are in
        camera frame and unit length.
        """
        R = _rotation(self.rotation)
        c = np.asarray(self.center, dtype=np.float64)
        o = R.T @ (-c)
        d = dirs @ R  # row-vector form of R.T @ d
        if self.kind == "sphere":
            t, n = _hit_sphere(o, d, self.size[0])
        elif self.kind == "cylinder":
            t, n = _hit_cylinder(o, d, *self.size)
        else:
            t, n = _hit_box(o, d, np.asarray(self.size, dtype=np.float64))
        n = n @ R.T
        return t, n

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Unsigned distance from camera-frame points to the primitive surface."""
        R = _rotation(self.rotation)
        p = (points - np.asarray(self.center, dtype=np.float64)) @ R
        if self.kind == "sphere":
            return np.abs(np.linalg.norm(p, axis=-1) - self.size[0])
        if self.kind == "cylinder":
            r, h = self.size
            radial = np.hypot(p[..., 0], p[..., 2]) - r
            axial = np.abs(p[..., 1]) - h
            outside = np.hypot(np.maximum(radial, 0), np.maximum(axial, 0))
            return np.abs(outside + np.minimum(np.maximum(radial, axial), 0))
        q = np.abs(p) - np.asarray(self.size, dtype=np.float64)
        outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
        return np.abs(outside + np.minimum(q.max(axis=-1), 0))


def _hit_sphere(o, d, r):
    a = np.einsum("...i,...i->...", d, d)
    b = 2.0 * d @ o
    c = o @ o - r * r
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    t = np.where(ok & (t > 0), t, np.inf)
    p = o + t[..., None] * d
    n = np.where(np.isfinite(t)[..., None], p / r, 0.0)
    return t, n


def _hit_cylinder(o, d, r, h):
    # side: x^2 + z^2 = r^2, |y| <= h
    a = d[..., 0] ** 2 + d[..., 2] ** 2
    b = 2 * (o[0] * d[..., 0] + o[2] * d[..., 2])
    c = o[0] ** 2 + o[2] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    a_safe = np.where(ok, a, 1.0)
    best = np.full(d.shape[:-1], np.inf)
    normal = np.zeros(d.shape)
    for t_side in ((-b - sq) / (2 * a_safe), (-b + sq) / (2 * a_safe)):
        y = o[1] + t_side * d[..., 1]
        hit = ok & (t_side > 0) & (np.abs(y) <= h) & (t_side < best)
        best = np.where(hit, t_side, best)
        p = o + t_side[..., None] * d
        side_n = np.stack([p[..., 0] / r, np.zeros_like(y), p[..., 2] / r], axis=-1)
        normal = np.where(hit[..., None], side_n, normal)
    dy = d[..., 1]
    dy_safe = np.where(np.abs(dy) > 1e-15, dy, 1.0)
    for sign in (-1.0, 1.0):
        t_cap = (sign * h - o[1]) / dy_safe
        p = o + t_cap[..., None] * d
        inside = p[..., 0] ** 2 + p[..., 2] ** 2 <= r * r
        hit = (np.abs(dy) > 1e-15) & (t_cap > 0) & inside & (t_cap < best)
        best = np.where(hit, t_cap, best)
        normal = np.where(hit[..., None], np.array([0.0, sign, 0.0]), normal)
    return best, normal


def _hit_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    ok = (t_near <= t_far) & (t_far > 0)
    t = np.where(t_near > 0, t_near, t_far)
    t = np.where(ok, t, np.inf)
    axis = np.where(t_near > 0, tmin.argmax(axis=-1), tmax.argmin(axis=-1))
    normal = np.zeros(d.shape)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    for k in range(3):
        sel = (axis == k) & np.isfinite(t)
        normal[..., k] = np.where(sel, np.sign(p[..., k]), 0.0)
    return t, normal


@dataclass(frozen=True)
class SceneSpec:
    resolution: tuple
    primitives: tuple
    background_depth: float
    ratios: tuple = (0.6008, 0.1747, 0.2245)  # refraction, reflection, normal
    distortion: float = 0.05
    min_refraction_offset: float = 0.003  # metres
    seed: int = 0
    z_max: float = Z_MAX_DEFAULT
    fov_deg: float = 60.0
    background_color: tuple = (0.55, 0.5, 0.45)
    region_smoothness: float = 0.12  # noise correlation length as a fraction of image size

    def __post_init__(self):
        if len(self.resolution) != 2 or min(self.resolution) < 1:
            raise ConfigError(f"bad resolution {self.resolution}")
        if not self.primitives:
            raise ConfigError("scene needs at least one primitive")
        if not any(p.transparent for p in self.primitives):
            raise ConfigError("scene needs at least one transparent primitive")
        if len(self.ratios) != 3 or min(self.ratios) < 0 or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"region ratios must be nonnegative and sum to 1, got {self.ratios}")
        if not (0 < self.background_depth <= self.z_max):
            raise ConfigError(f"background depth {self.background_depth} outside (0, {self.z_max}]")
        if self.distortion < 0 or self.min_refraction_offset < 0:
            raise ConfigError("distortion and minimum refraction offset must be nonnegative")

    def intrinsics(self) -> CameraIntrinsics:
        h, w = self.resolution
        return CameraIntrinsics.from_fov(h, w, self.fov_deg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primitives"] = [asdict(p) for p in self.primitives]
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        prims = tuple(
            Primitive(kind=p["kind"], center=tuple(p["center"]), size=tuple(p["size"]),
                      rotation=tuple(p.get("rotation", (0.0, 0.0, 0.0))),
                      transparent=bool(p.get("transparent", False)),
                      color=tuple(p.get("color", (0.5, 0.5, 0.5))))
            for p in d.pop("primitives"))
        for key in ("resolution", "ratios", "background_color"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(primitives=prims, **d)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class RgbdSample:
    rgb: np.ndarray
    depth_raw: np.ndarray
    depth_gt: Optional[np.ndarray]
    mask: np.ndarray
    region_labels: Optional[np.ndarray]
    intrinsics: CameraIntrinsics
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.depth_raw.shape

    def validate(self):
        h, w = self.depth_raw.shape
        if self.rgb.shape != (h, w, 3):
            raise ShapeMismatchError(f"rgb shape {self.rgb.shape} vs depth {(h, w)}")
        if self.mask.shape != (h, w):
            raise ShapeMismatchError(f"mask shape {self.mask.shape} vs depth {(h, w)}")
        for name in ("depth_gt", "region_labels"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (h, w):
                raise ShapeMismatchError(f"{name} shape {arr.shape} vs depth {(h, w)}")
        if (self.intrinsics.height, self.intrinsics.width) != (h, w):
            raise ShapeMismatchError(
                f"intrinsics describe {self.intrinsics.height}x{self.intrinsics.width}, image is {h}x{w}")
        return self

    def region_fractions(self) -> dict:
        """Fraction of transparent pixels in each region, from the recorded labels."""
        labels = self.region_labels[self.mask.astype(bool)]
        n = max(labels.size, 1)
        return {r.name: float(np.count_nonzero(labels == r)) / n
                for r in (Region.REFRACTION, Region.REFLECTION, Region.NORMAL)}


def smooth_noise(shape, seed, correlation: float) -> np.ndarray:
    """Seeded Gaussian-filtered white noise scaled to [-1, 1]."""
    rng = np.random.default_rng(seed)
    field_ = gaussian_filter(rng.standard_normal(shape), sigma=max(correlation, 1e-6), mode="wrap")
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def render(spec: SceneSpec):
    """Ray-cast the scene. Returns depth, rgb, transparent mask and the owning primitive index."""
    K = spec.intrinsics()
    dirs = K.ray_directions()
    h, w = spec.resolution
    hits = []
    for prim in spec.primitives:
        t, n = prim.intersect(dirs)
        t = np.where(t <= spec.z_max, t, np.inf)
        hits.append((t, n))
    ts = np.stack([t for t, _ in hits] + [np.full((h, w), spec.background_depth)])
    owner = ts.argmin(axis=0)
    depth = np.take_along_axis(ts, owner[None], axis=0)[0]

    light = np.array([-0.4, -0.6, -0.7])
    light /= np.linalg.norm(light)
    rng = np.random.default_rng([spec.seed, 7])
    tex = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 16, mode="wrap")
    tex = 0.08 * tex / max(np.abs(tex).max(), 1e-12)
    background = np.clip(np.asarray(spec.background_color)[None, None] + tex[..., None], 0, 1)

    def shade(idx):
        t, n = hits[idx]
        lam = np.clip(-(n @ light), 0, 1)
        return np.asarray(spec.primitives[idx].color)[None, None] * (0.35 + 0.65 * lam[..., None])

    # colour of the nearest opaque surface, seen through any transparent layers
    opaque_ts = np.stack([t if not p.transparent else np.full((h, w), np.inf)
                          for (t, _), p in zip(hits, spec.primitives)] + [ts[-1]])
    opaque_owner = opaque_ts.argmin(axis=0)
    behind = background.copy()
    for i, prim in enumerate(spec.primitives):
        if not prim.transparent:
            sel = opaque_owner == i
            behind[sel] = shade(i)[sel]
    rgb = behind.copy()
    mask = np.zeros((h, w), dtype=bool)
    for i, prim in enumerate(spec.primitives):
        sel = owner == i
        if not sel.any():
            continue
        if prim.transparent:
            t, n = hits[i]
            spec_hl = np.clip(-(n @ light), 0, 1) ** 24
            tinted = 0.8 * behind + 0.2 * shade(i) + 0.5 * spec_hl[..., None]
            rgb[sel] = np.clip(tinted, 0, 1)[sel]
            mask |= sel
        else:
            rgb[sel] = shade(i)[sel]
    return depth, rgb, mask, owner


def generate_scene(spec: SceneSpec) -> RgbdSample:
    """Render ``spec`` and corrupt its transparent pixels into the three sensor regions."""
    h, w = spec.resolution
    K = spec.intrinsics()
    depth_gt, rgb, mask, _ = render(spec)
    n_trans = int(mask.sum())
    if n_trans == 0:
        raise RatioUnreachableError(
            "no transparent pixels in view: region ratios "
            f"{spec.ratios} need a nonzero transparent area, shortfall is 100% of every region")

    p_refr, p_refl, p_norm = spec.ratios
    n_refl = int(round(p_refl * n_trans))
    n_refr = int(round(p_refr * n_trans))
    n_refr = min(n_refr, n_trans - n_refl)
    n_norm = n_trans - n_refl - n_refr
    achieved = (n_refr / n_trans, n_refl / n_trans, n_norm / n_trans)
    shortfall = [abs(a - p) for a, p in zip(achieved, spec.ratios)]
    if max(shortfall) > 0.05:
        names = ("refraction", "reflection", "normal")
        worst = int(np.argmax(shortfall))
        raise RatioUnreachableError(
            f"{n_trans} transparent pixels cannot meet {names[worst]} ratio {spec.ratios[worst]:.4f}: "
            f"closest achievable {achieved[worst]:.4f}, shortfall {shortfall[worst]:.4f} > 0.05")

    corr = spec.region_smoothness * max(h, w)
    region_field = smooth_noise((h, w), [spec.seed, 1], corr)
    idx = np.flatnonzero(mask)
    order = idx[np.argsort(region_field.ravel()[idx], kind="stable")]
    labels = np.zeros(h * w, dtype=np.uint8)
    labels[order[:n_refl]] = Region.REFLECTION
    labels[order[n_refl:n_refl + n_norm]] = Region.NORMAL
    labels[order[n_refl + n_norm:]] = Region.REFRACTION
    labels = labels.reshape(h, w)

    # refraction offset keeps the sign pattern of a smooth field but never drops
    # below min_refraction_offset in magnitude (unless the amplitude cap forbids it)
    eps_field = smooth_noise((h, w), [spec.seed, 2], corr)
    sign = np.where(eps_field >= 0, 1.0, -1.0)
    cap = spec.distortion * depth_gt
    floor = np.minimum(spec.min_refraction_offset, cap)
    offset = sign * (floor + (cap - floor) * np.abs(eps_field))
    eps = offset / depth_gt

    depth_raw = depth_gt.copy()
    refr = labels == Region.REFRACTION
    depth_raw[refr] = depth_gt[refr] * (1.0 + eps[refr])
    depth_raw[labels == Region.REFLECTION] = 0.0

    meta = {"seed": spec.seed, "z_max": spec.z_max, "spec": spec.to_dict(),
            "format": FORMAT_VERSION}
    return RgbdSample(rgb=rgb, depth_raw=depth_raw, depth_gt=depth_gt, mask=mask.astype(np.uint8),
                      region_labels=labels, intrinsics=K, meta=meta)


def random_scene_spec(seed: int, resolution=(32, 32), background_range=(0.6, 0.8),
                      object_depth_range=(0.42, 0.55), **overrides) -> SceneSpec:
    """Sample a table-top style scene: one transparent vessel plus an optional opaque distractor."""
    rng = np.random.default_rng([seed, 11])
    h, w = resolution
    K = CameraIntrinsics.from_fov(h, w, overrides.get("fov_deg", 60.0))
    bg = float(rng.uniform(*background_range))

    def place(z, margin):
        # keep the object centre inside the central part of the frustum
        u = rng.uniform(margin * w, (1 - margin) * w)
        v = rng.uniform(margin * h, (1 - margin) * h)
        return ((u - K.cx) * z / K.fx, (v - K.cy) * z / K.fy, z)

    z = float(rng.uniform(*object_depth_range))
    kind = rng.choice(["cylinder", "sphere", "cylinder", "box"])
    if kind == "sphere":
        size = (float(rng.uniform(0.07, 0.1)),)
    elif kind == "cylinder":
        size = (float(rng.uniform(0.05, 0.08)), float(rng.uniform(0.08, 0.13)))
    else:
        size = tuple(float(s) for s in rng.uniform(0.05, 0.08, size=3))
    tint = tuple(float(c) for c in rng.uniform(0.6, 0.95, size=3))
    rot = (float(rng.uniform(-0.3, 0.3)), float(rng.uniform(-0.5, 0.5)), float(rng.uniform(-0.2, 0.2)))
    prims = [Primitive(kind=str(kind), center=place(z, 0.35), size=size, rotation=rot,
                       transparent=True, color=tint)]
    # distractor only when there is depth room between object and background
    if rng.uniform() < 0.5 and z + 0.02 < bg - 0.05:
        z2 = float(rng.uniform(z + 0.02, min(bg - 0.05, z + 0.2)))
        prims.append(Primitive(kind="box", center=place(z2, 0.2),
                               size=tuple(float(s) for s in rng.uniform(0.02, 0.04, size=3)),
                               rotation=(0.0, float(rng.uniform(-0.6, 0.6)), 0.0),
                               transparent=False,
                               color=tuple(float(c) for c in rng.uniform(0.1, 0.9, size=3))))
    bg_color = tuple(float(c) for c in rng.uniform(0.3, 0.7, size=3))
    kwargs = dict(resolution=tuple(resolution), primitives=tuple(prims), background_depth=bg,
                  seed=int(seed), background_color=bg_color)
    kwargs.update(overrides)
    return SceneSpec(**kwargs)


# ---------------------------------------------------------------------------
# canonical sample directory

def quantize_depth(depth: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(depth, dtype=np.float64) / DEPTH_UNIT_M)
    if q.max(initial=0) > 65535:
        raise ConfigError(f"depth {depth.max():.3f} m exceeds 16-bit range at 0.1 mm units")
    return q.astype(np.uint16)


def dequantize_depth(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) * DEPTH_UNIT_M


def write_depth_png(path, depth):
    _imwrite(path, quantize_depth(depth))


def _imwrite(path, img):
    path = str(path)
    tmp = path + ".tmp.png"
    if not cv2.imwrite(tmp, img):
        raise OSError(f"could not write {path}")
    os.replace(tmp, path)


def _atomic_text(path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_sample(sample: RgbdSample, directory) -> None:
    """Write ``sample`` as a canonical sample directory."""
    sample.validate()
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create sample directory {d}: {exc}") from exc
    K = sample.intrinsics
    meta = {
        "format": FORMAT_VERSION,
        "intrinsics": asdict(K),
        "z_max": sample.meta.get("z_max", Z_MAX_DEFAULT),
        "seed": sample.meta.get("seed"),
        "spec": sample.meta.get("spec"),
        "depth_unit_m": DEPTH_UNIT_M,
    }
    _atomic_text(d / "meta.json", json.dumps(_jsonable(meta), indent=2, sort_keys=True))
    rgb8 = np.round(np.clip(sample.rgb, 0, 1) * 255).astype(np.uint8)
    _imwrite(d / "rgb.png", cv2.cvtColor(rgb8, cv2.COLOR_RGB2BGR))
    write_depth_png(d / "depth_raw.png", sample.depth_raw)
    if sample.depth_gt is not None:
        write_depth_png(d / "depth_gt.png", sample.depth_gt)
    _imwrite(d / "mask.png", (sample.mask > 0).astype(np.uint8) * 255)
    if sample.region_labels is not None:
        _imwrite(d / "regions.png", sample.region_labels.astype(np.uint8))


def _imread(path, flags):
    if not path.exists():
        raise MissingFileError(f"missing {path.name} in {path.parent}")
    img = cv2.imread(str(path), flags)
    if img is None:
        raise MalformedMetadataError(f"unreadable image {path}")
    return img


def read_sample(directory, require_gt: bool = True) -> RgbdSample:
    """Load a canonical sample directory.

    With ``require_gt=False`` a missing ``depth_gt.png`` is allowed and the
    sample's ``depth_gt`` is None.
    """
    d = Path(directory)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise MissingFileError(f"missing meta.json in {d}")
    try:
        meta = json.loads(meta_path.read_text())
        K = CameraIntrinsics(**meta["intrinsics"])
    except (json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise MalformedMetadataError(f"malformed meta.json in {d}: {exc}") from exc

    bgr = _imread(d / "rgb.png", cv2.IMREAD_COLOR)
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float64) / 255.0
    raw = dequantize_depth(_imread(d / "depth_raw.png", cv2.IMREAD_UNCHANGED))
    gt_path = d / "depth_gt.png"
    if gt_path.exists():
        gt = dequantize_depth(_imread(gt_path, cv2.IMREAD_UNCHANGED))
    elif require_gt:
        raise MissingGroundTruthError(f"missing-ground-truth: {gt_path} not found")
    else:
        gt = None
    mask = (_imread(d / "mask.png", cv2.IMREAD_UNCHANGED) > 0).astype(np.uint8)
    reg_path = d / "regions.png"
    labels = _imread(reg_path, cv2.IMREAD_UNCHANGED).astype(np.uint8) if reg_path.exists() else None
    for name, arr in (("depth_raw", raw), ("depth_gt", gt), ("mask", mask), ("regions", labels)):
        if arr is not None and arr.ndim != 2:
            raise ShapeMismatchError(f"shape-mismatch: {name} must be single-channel, got {arr.shape}")
    sample = RgbdSample(rgb=rgb, depth_raw=raw, depth_gt=gt, mask=mask, region_labels=labels,
                        intrinsics=K, meta={"z_max": meta.get("z_max", Z_MAX_DEFAULT),
                                            "seed": meta.get("seed"), "spec": meta.get("spec"),
                                            "source_dir": str(d)})
    try:
        return sample.validate()
    except ShapeMismatchError as exc:
        raise ShapeMismatchError(f"shape-mismatch in {d}: {exc}") from exc


def sample_ids(dataset_dir, split: str) -> list:
    index_path = Path(dataset_dir) / "index.json"
    if not index_path.exists():
        raise MissingFileError(f"missing index.json in {dataset_dir}")
    try:
        index = json.loads(index_path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedMetadataError(f"malformed index.json: {exc}") from exc
    if split not in index.get("splits", {}):
        raise MalformedMetadataError(f"split {split!r} not in index.json")
    return list(index["splits"][split])


def load_split(dataset_dir, split: str, ids: Optional[Sequence[str]] = None) -> list:
    ids = sample_ids(dataset_dir, split) if ids is None else ids
    out = []
    for sid in ids:
        s = read_sample(Path(dataset_dir) / sid)
        s.meta["sample_id"] = sid
        out.append(s)
    return out
