"""Four-branch depth completion network.

    D_o = f(I, M, D_rel, D)

* mask branch: RGB + mask (4 channels) -> windowed-attention encoder
* relative branch: D_rel (1 channel) -> encoder of the same topology, own weights
* depth branch: D / z_max -> per-patch MLP, pooled to the coarsest grid
* decoder: coarsest-stage concat -> residual MLP blocks -> nearest upsample
  with stage-1 skips (mask, relative and depth branches) -> linear head,
  one depth value per pixel

Tensors are channels-last: images are (B, H, W, C).
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, MalformedMetadataError, ShapeMismatchError

CHECKPOINT_FORMAT = "remake-ckpt/1"
HEAD_INIT_SCALE = 0.1


@dataclass
class ModelConfig:
    height: int = 32
    width: int = 32
    patch: int = 2
    stages: int = 2
    dims: tuple = (32, 64)
    depths: tuple = (2, 2)
    heads: tuple = (2, 4)
    window: int = 4
    decoder_blocks: int = 4
    decoder_width: int = 64
    mlp_ratio: int = 2
    z_max: float = 3.0

    def __post_init__(self):
        self.dims, self.depths, self.heads = tuple(self.dims), tuple(self.depths), tuple(self.heads)
        if min(self.patch, self.stages, self.window, self.decoder_blocks, self.decoder_width,
               self.mlp_ratio) < 1:
            raise ConfigError("all counts in ModelConfig must be >= 1")
        for name in ("dims", "depths", "heads"):
            if len(getattr(self, name)) != self.stages:
                raise ConfigError(f"{name} needs one entry per stage ({self.stages})")
        if min(self.depths) < 1 or min(self.heads) < 1 or min(self.dims) < 1:
            raise ConfigError("dims, depths and heads must be >= 1")
        for d, h in zip(self.dims, self.heads):
            if d % h:
                raise ConfigError(f"embed dim {d} not divisible by {h} heads")
        if self.z_max <= 0:
            raise ConfigError("z_max must be positive")

    @property
    def grids(self):
        """Token grid (h, w) per stage."""
        return [(self.height // (self.patch * 2 ** i), self.width // (self.patch * 2 ** i))
                for i in range(self.stages)]

    def check_geometry(self):
        step = self.patch * 2 ** (self.stages - 1)
        if self.height % step or self.width % step:
            raise ConfigError(f"input {self.height}x{self.width} must be a multiple of "
                              f"patch*2^(stages-1) = {step}")
        for i, (gh, gw) in enumerate(self.grids):
            if self.window > gh or self.window > gw:
                raise ConfigError(f"window {self.window} larger than stage-{i + 1} token grid {gh}x{gw}")
            if gh % self.window or gw % self.window:
                raise ConfigError(f"stage-{i + 1} grid {gh}x{gw} not divisible by window {self.window}")

    def to_dict(self):
        d = asdict(self)
        for k in ("dims", "depths", "heads"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Variant(str, Enum):
    FULL = "full"
    BLANK = "blank"
    NO_REL = "no-rel"
    NO_MASK = "no-mask"
    NO_TRANS_DEPTH = "no-trans-depth"

    @classmethod
    def parse(cls, v):
        if isinstance(v, cls):
            return v
        key = str(v).strip().lower().replace("_", "-")
        for member in cls:
            if key in (member.value, member.name.lower().replace("_", "-")):
                return member
        raise ConfigError(f"unknown variant {v!r}; choose from {[m.value for m in cls]}")


# -- building blocks --------------------------------------------------------

def _patchify(x, p):
    """(B, H, W, C) -> (B, H/p, W/p, p*p*C)"""
    B, H, W, C = x.shape
    x = x.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * C)


def _unpatchify(x, p):
    """(B, h, w, p*p) -> (B, h*p, w*p)"""
    B, h, w, _ = x.shape
    x = x.reshape(B, h, w, p, p).permute(0, 1, 3, 2, 4)
    return x.reshape(B, h * p, w * p)


def _windows(x, ws):
    B, H, W, C = x.shape
    x = x.reshape(B, H // ws, ws, W // ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, C)


def _unwindows(x, ws, B, H, W):
    C = x.shape[-1]
    x = x.reshape(B, H // ws, W // ws, ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


class WindowAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        N, T, C = x.shape
        qkv = self.qkv(x).reshape(N, T, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(N, T, C))


class Block(nn.Module):
    """Pre-norm window attention + MLP, both residual. No shifted windows."""

    def __init__(self, dim, heads, window, mlp_ratio):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x):
        B, H, W, C = x.shape
        y = _windows(self.norm1(x), self.window)
        x = x + _unwindows(self.attn(y), self.window, B, H, W)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class PatchMerge(nn.Module):
    def __init__(self, dim_in, dim_out):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim_in)
        self.reduce = nn.Linear(4 * dim_in, dim_out)

    def forward(self, x):
        return self.reduce(self.norm(_patchify(x, 2)))


class WindowEncoder(nn.Module):
    """Patch embedding followed by per-stage attention blocks and 2x patch merging."""

    def __init__(self, in_ch, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch
        self.embed = nn.Linear(in_ch * cfg.patch ** 2, cfg.dims[0])
        # absolute position embedding; also keeps constant-input tokens away from the
        # zero vector, where stacked LayerNorms have exploding gradients
        gh, gw = cfg.grids[0]
        self.pos = nn.Parameter(torch.zeros(gh, gw, cfg.dims[0]))
        self.embed_norm = nn.LayerNorm(cfg.dims[0])
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(cfg.stages):
            self.stages.append(nn.ModuleList(
                Block(cfg.dims[i], cfg.heads[i], cfg.window, cfg.mlp_ratio) for _ in range(cfg.depths[i])))
            if i + 1 < cfg.stages:
                self.merges.append(PatchMerge(cfg.dims[i], cfg.dims[i + 1]))

    def forward(self, x):
        x = self.embed_norm(self.embed(_patchify(x, self.patch)) + self.pos)
        feats = []
        for i, blocks in enumerate(self.stages):
            if i > 0:
                x = self.merges[i - 1](x)
            for blk in blocks:
                x = blk(x)
            feats.append(x)
        return feats


class DepthMLP(nn.Module):
    """Per-patch MLP on scaled depth, average-pooled to the coarsest grid."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch
        self.pool = 2 ** (cfg.stages - 1)
        self.fc1 = nn.Linear(cfg.patch ** 2, cfg.dims[0])
        self.fc2 = nn.Linear(cfg.dims[0], cfg.dims[0])
        self.out = nn.Linear(cfg.dims[0], cfg.dims[-1])

    def forward(self, depth_scaled):
        x = _patchify(depth_scaled.unsqueeze(-1), self.patch)
        x = self.fc2(F.gelu(self.fc1(x)))
        if self.pool > 1:
            x = F.avg_pool2d(x.permute(0, 3, 1, 2), self.pool).permute(0, 2, 3, 1)
        return self.out(x)


class ResidualMLP(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(self.norm(x))))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.decoder_width
        self.patch = cfg.patch
        self.up = 2 ** (cfg.stages - 1)
        self.fuse = nn.Linear(3 * cfg.dims[-1], w)
        self.blocks = nn.ModuleList(ResidualMLP(w) for _ in range(cfg.decoder_blocks))
        self.skip_mask = nn.Linear(cfg.dims[0], w)
        self.skip_rel = nn.Linear(cfg.dims[0], w)
        # one value per pixel of each stage-1 patch
        self.head = nn.Linear(w, cfg.patch ** 2)

    def forward(self, f_mask, f_rel, f_depth):
        if not (f_mask[-1].shape[:3] == f_rel[-1].shape[:3] == f_depth.shape[:3]):
            raise ShapeMismatchError(
                f"branch grids differ: mask {tuple(f_mask[-1].shape)}, rel {tuple(f_rel[-1].shape)}, "
                f"depth {tuple(f_depth.shape)}")
        x = self.fuse(torch.cat([f_mask[-1], f_rel[-1], f_depth], dim=-1))
        for blk in self.blocks:
            x = blk(x)
        if self.up > 1:
            x = x.repeat_interleave(self.up, dim=1).repeat_interleave(self.up, dim=2)
        x = x + self.skip_mask(f_mask[0]) + self.skip_rel(f_rel[0])
        # no normalisation here: token magnitude carries metric depth
        return _unpatchify(self.head(x), self.patch)


class ReMakeNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.check_geometry()
        self.cfg = cfg
        self.mask_encoder = WindowEncoder(4, cfg)
        self.rel_encoder = WindowEncoder(1, cfg)
        self.depth_encoder = DepthMLP(cfg)
        self.decoder = Decoder(cfg)

    def encode_mask(self, rgb, mask):
        return self.mask_encoder(torch.cat([rgb, mask.unsqueeze(-1)], dim=-1))

    def encode_rel(self, rel):
        return self.rel_encoder(rel.unsqueeze(-1))

    def encode_depth(self, depth):
        return self.depth_encoder(depth / self.cfg.z_max)

    def decode(self, f_mask, f_rel, f_depth):
        return self.decoder(f_mask, f_rel, f_depth) * self.cfg.z_max

    def forward(self, rgb, mask, rel, depth):
        """rgb (B,H,W,3), mask/rel/depth (B,H,W) -> completed depth (B,H,W) in metres."""
        return self.decode(self.encode_mask(rgb, mask), self.encode_rel(rel), self.encode_depth(depth))


def apply_variant(variant, mask, rel, depth):
    """Neutralise inputs for an ablation variant; the network itself is unchanged."""
    variant = Variant.parse(variant)
    if variant in (Variant.BLANK, Variant.NO_MASK):
        mask = torch.zeros_like(mask)
    if variant in (Variant.BLANK, Variant.NO_REL):
        rel = torch.full_like(rel, 0.5)
    if variant is Variant.NO_TRANS_DEPTH:
        depth = depth * (1 - mask)
    return mask, rel, depth


def init_params(cfg: ModelConfig, seed: int = 0, dtype=torch.float32) -> ReMakeNet:
    """Build the network with deterministic weights.

    Linear weights are Glorot-uniform; attention projections are uniform in
    [-1, 1] / sqrt(dim); biases are zero; LayerNorm starts at identity;
    position embeddings are uniform in [-0.5, 0.5]. The output head is
    scaled by HEAD_INIT_SCALE so initial predictions are near zero instead of
    spanning several metres.
    """
    cfg.check_geometry()
    gen = torch.Generator().manual_seed(int(seed))
    net = ReMakeNet(cfg)
    for mod in net.modules():
        if isinstance(mod, WindowEncoder):
            with torch.no_grad():
                mod.pos.copy_(torch.rand(mod.pos.shape, generator=gen) - 0.5)
        if isinstance(mod, WindowAttention):
            for lin in (mod.qkv, mod.proj):
                fan_in = lin.in_features
                with torch.no_grad():
                    lin.weight.copy_((torch.rand(lin.weight.shape, generator=gen) * 2 - 1) / math.sqrt(fan_in))
                    lin.bias.zero_()
        elif isinstance(mod, nn.Linear) and not _is_attention_linear(net, mod):
            bound = math.sqrt(6.0 / (mod.in_features + mod.out_features))
            with torch.no_grad():
                mod.weight.copy_((torch.rand(mod.weight.shape, generator=gen) * 2 - 1) * bound)
                mod.bias.zero_()
        elif isinstance(mod, nn.LayerNorm):
            with torch.no_grad():
                mod.weight.fill_(1.0)
                mod.bias.zero_()
    with torch.no_grad():
        net.decoder.head.weight.mul_(HEAD_INIT_SCALE)
    return net.to(dtype)


def _is_attention_linear(net, lin):
    return any(lin is m.qkv or lin is m.proj for m in net.modules() if isinstance(m, WindowAttention))


# -- numpy-facing wrappers ---------------------------------------------------

def _t(x, net, batch=True):
    dtype = next(net.parameters()).dtype
    t = torch.as_tensor(np.asarray(x), dtype=dtype)
    return t.unsqueeze(0) if batch else t


def _check_inputs(rgb=None, mask=None, rel=None, depth=None):
    if rgb is not None and (np.min(rgb) < 0 or np.max(rgb) > 1):
        raise DataError("rgb values must lie in [0, 1]")
    if mask is not None and not np.isin(np.asarray(mask), (0, 1)).all():
        raise DataError("mask must be binary {0, 1}")
    if rel is not None and (np.min(rel) < 0 or np.max(rel) > 1):
        raise DataError("relative depth must lie in [0, 1]")
    if depth is not None and np.min(depth) < 0:
        raise DataError("depth must be nonnegative (0 = missing)")


def encode_mask_branch(rgb, mask, net: ReMakeNet):
    _check_inputs(rgb=rgb, mask=mask)
    with torch.no_grad():
        feats = net.encode_mask(_t(rgb, net), _t(mask, net))
    return [f[0].numpy() for f in feats]


def encode_relative_branch(rel, net: ReMakeNet):
    _check_inputs(rel=rel)
    with torch.no_grad():
        feats = net.encode_rel(_t(rel, net))
    return [f[0].numpy() for f in feats]


def encode_depth_branch(depth_raw, net: ReMakeNet):
    _check_inputs(depth=depth_raw)
    with torch.no_grad():
        return net.encode_depth(_t(depth_raw, net))[0].numpy()


@dataclass
class FeatureSet:
    f_mask: list
    f_rel: list
    f_depth: np.ndarray


def encode_all(sample, rel, net: ReMakeNet) -> FeatureSet:
    return FeatureSet(f_mask=encode_mask_branch(sample.rgb, sample.mask, net),
                      f_rel=encode_relative_branch(_rel_values(rel), net),
                      f_depth=encode_depth_branch(sample.depth_raw, net))


def fuse_and_decode(features: FeatureSet, net: ReMakeNet):
    """Decode a FeatureSet to metric depth (unclamped)."""
    with torch.no_grad():
        fm = [_t(f, net) for f in features.f_mask]
        fr = [_t(f, net) for f in features.f_rel]
        return net.decode(fm, fr, _t(features.f_depth, net))[0].numpy()


def _rel_values(rel):
    return getattr(rel, "values", rel)


def forward(sample, rel, net: ReMakeNet):
    return forward_variant(sample, rel, net, Variant.FULL)


def forward_variant(sample, rel, net: ReMakeNet, variant):
    variant = Variant.parse(variant)
    rel_v = _rel_values(rel)
    _check_inputs(sample.rgb, sample.mask, rel_v, sample.depth_raw)
    shape = (net.cfg.height, net.cfg.width)
    if sample.depth_raw.shape != shape or np.shape(rel_v) != shape:
        raise ShapeMismatchError(f"inputs {sample.depth_raw.shape}/{np.shape(rel_v)} vs model {shape}")
    m, r, d = apply_variant(variant, _t(sample.mask, net), _t(rel_v, net), _t(sample.depth_raw, net))
    with torch.no_grad():
        return net(_t(sample.rgb, net), m, r, d)[0].numpy()


# -- checkpoints -------------------------------------------------------------

_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def _zip_write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def checkpoint_bytes(net: ReMakeNet, metadata: dict | None = None) -> bytes:
    """Archive: ``header.json`` (format, config, metadata, tensor index) + ``tensors.bin``.

    Tensors are stored as float32 little-endian in state_dict order.
    """
    index, blobs, offset = [], [], 0
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": CHECKPOINT_FORMAT, "config": net.cfg.to_dict(),
              "metadata": metadata or {}, "tensors": index}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "header.json", json.dumps(header, sort_keys=True, indent=1).encode())
        _zip_write(zf, "tensors.bin", b"".join(blobs))
    return buf.getvalue()


def save_checkpoint(net: ReMakeNet, path, metadata: dict | None = None) -> str:
    """Write atomically; returns the sha256 of the file."""
    data = checkpoint_bytes(net, metadata)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path, dtype=torch.float32):
    """Returns (net, metadata)."""
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            blob = zf.read("tensors.bin")
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise MalformedMetadataError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format") != CHECKPOINT_FORMAT:
        raise MalformedMetadataError(f"checkpoint format {header.get('format')!r}, expected {CHECKPOINT_FORMAT}")
    net = ReMakeNet(ModelConfig.from_dict(header["config"]))
    state = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(blob, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)),
                            offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)
    return net.to(dtype), header.get("metadata", {})
