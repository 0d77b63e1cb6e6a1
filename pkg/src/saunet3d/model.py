"""Anisotropic 3D U-Net with spatial attention skips and 3D ASPP.

Public tensors follow the ``(N, H, W, D, C)`` layout. Internally the torch
modules run channel-first ``(N, C, H, W, D)``; kernel and dilation triples
are always given in ``(H, W, D)`` order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .preprocessing import (
    CANONICAL_SHAPE,
    N_CHUNKS,
    from_canonical,
    normalize_intensity,
    slice_z,
    to_canonical,
    unslice_z,
)
from .volume_io import Case, LabelMask

Triple = Tuple[int, int, int]
TensorLike = Union[torch.Tensor, np.ndarray]

DEBUG = False


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


def _triple(v) -> Triple:
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise ConfigError(f"expected a triple, got {v!r}")
    return t


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 24
    levels: int = 4
    encoder_kernel: Triple = (3, 3, 1)
    resample_kernel: Triple = (2, 2, 1)
    bottleneck_kernel: Triple = (3, 3, 3)
    norm: str = "group"
    gn_groups: int = 8
    use_sam: bool = True
    sam_kernel: Triple = (14, 14, 1)
    use_aspp: bool = True
    aspp_rates: Tuple[Triple, ...] = ((1, 1, 1), (2, 2, 1), (4, 4, 1))
    aspp_pooling: bool = False
    out_classes: int = 2
    head_prior: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        # normalise list-ish JSON input to hashable tuples
        for name in ("encoder_kernel", "resample_kernel", "bottleneck_kernel", "sam_kernel"):
            object.__setattr__(self, name, _triple(getattr(self, name)))
        object.__setattr__(self, "aspp_rates", tuple(_triple(r) for r in self.aspp_rates))
        if self.levels < 2:
            raise ConfigError("levels must be >= 2")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be >= 2")
        if self.norm not in ("group", "batch"):
            raise ConfigError(f"norm must be 'group' or 'batch', got {self.norm!r}")
        if self.bottleneck_kernel != (3, 3, 3):
            raise ConfigError("bottleneck kernel is fixed at (3, 3, 3)")
        for k in (self.encoder_kernel, self.bottleneck_kernel):
            if any(n % 2 == 0 for n in k):
                raise ConfigError(f"convolution kernel {k} must be odd-sized")
        if any(n < 1 for n in self.resample_kernel + self.sam_kernel):
            raise ConfigError("kernel extents must be >= 1")
        if self.use_aspp and not self.aspp_rates:
            raise ConfigError("use_aspp requires at least one dilation rate")
        if self.out_classes < 2:
            raise ConfigError("out_classes must be >= 2")
        if not 0 < self.head_prior < 1:
            raise ConfigError("head_prior must lie in (0, 1)")
        # ASPP always uses group norm, so check its channels whatever `norm` is
        if self.norm == "group" or self.use_aspp:
            for c in self.channels:
                if c % self.gn_groups:
                    raise ConfigError(
                        f"gn_groups={self.gn_groups} does not divide channel count {c}"
                    )

    @property
    def channels(self) -> List[int]:
        """Channel count per level; the last entry is the bottleneck."""
        return [self.base_channels * 2**l for l in range(self.levels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = [list(x) if isinstance(x, tuple) else x for x in v]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys {sorted(extra)}")
        return cls(**d)

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


# -- building blocks ----------------------------------------------------------

def _norm(kind: str, channels: int, groups: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(groups, channels)
    return nn.BatchNorm3d(channels)


def _same_padding(kernel: Triple, dilation: Triple = (1, 1, 1)) -> Triple:
    return tuple(d * (k - 1) // 2 for k, d in zip(kernel, dilation))


class ConvNormAct(nn.Module):
    def __init__(self, cin, cout, kernel, norm, groups, dilation=(1, 1, 1)):
        super().__init__()
        # bias is redundant ahead of a normalization layer
        self.conv = nn.Conv3d(cin, cout, kernel, padding=_same_padding(kernel, dilation),
                              dilation=dilation, bias=False)
        self.norm = _norm(norm, cout, groups)
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, kernel, norm, groups):
        super().__init__(
            ConvNormAct(cin, cout, kernel, norm, groups),
            ConvNormAct(cout, cout, kernel, norm, groups),
        )


def sam_padding(kernel: Triple) -> Tuple[int, ...]:
    """F.pad amounts giving same-size output; even extents pad one extra voxel in front."""
    pads = []
    for k in reversed(kernel):  # F.pad lists the last axis first
        total = k - 1
        lead = (total + 1) // 2
        pads += [lead, total - lead]
    return tuple(pads)


def attention_map_cf(x: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor]) -> torch.Tensor:
    """Sigmoid spatial attention map for a channel-first tensor, shape ``(N,1,H,W,D)``."""
    avg = x.mean(dim=1, keepdim=True)
    mx = x.amax(dim=1, keepdim=True)
    desc = torch.cat([avg, mx], dim=1)
    kernel = tuple(weight.shape[2:])
    desc = F.pad(desc, sam_padding(kernel))
    return torch.sigmoid(F.conv3d(desc, weight, bias))


class SpatialAttention3d(nn.Module):
    def __init__(self, kernel: Triple = (14, 14, 1)):
        super().__init__()
        self.kernel = kernel
        self.conv = nn.Conv3d(2, 1, kernel)
        self.conv._init_gain = 1.0

    def forward(self, x):
        return x * attention_map_cf(x, self.conv.weight, self.conv.bias)


def spatial_attention_3d(
    feat: TensorLike,
    params: Dict[str, torch.Tensor],
    kernel: Triple = (14, 14, 1),
    return_map: bool = False,
):
    """Gate an ``(N,H,W,D,C)`` feature map by its spatial attention map.

    ``params`` holds ``weight`` of shape ``(1, 2, *kernel)`` and optional
    ``bias``; input channel 0 of the weight sees the channel mean, channel 1
    the channel max.
    """
    x = _as_tensor(feat)
    if x.ndim != 5 or x.shape[-1] < 1:
        raise ShapeError(f"expected (N,H,W,D,C) with C >= 1, got {tuple(x.shape)}")
    weight = params["weight"]
    if tuple(weight.shape) != (1, 2, *kernel):
        raise ShapeError(f"weight shape {tuple(weight.shape)} != {(1, 2, *kernel)}")
    xc = x.permute(0, 4, 1, 2, 3)
    m = attention_map_cf(xc, weight.to(xc.dtype), None if params.get("bias") is None else params["bias"].to(xc.dtype))
    out = (xc * m).permute(0, 2, 3, 4, 1)
    if return_map:
        return out, m.permute(0, 2, 3, 4, 1)
    return out


class ASPP3d(nn.Module):
    """Parallel 1x1x1 and dilated 3x3x3 branches, each conv-GN-ReLU, fused by 1x1x1 conv."""

    def __init__(self, channels: int, rates: Sequence[Triple], groups: int, pooling: bool = False):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList([ConvNormAct(channels, channels, (1, 1, 1), "group", groups)])
        for r in self.rates:
            self.branches.append(ConvNormAct(channels, channels, (3, 3, 3), "group", groups, dilation=r))
        self.pool = None
        if pooling:
            self.pool = ConvNormAct(channels, channels, (1, 1, 1), "group", groups)
        n = len(self.branches) + (1 if pooling else 0)
        self.fuse = nn.Conv3d(n * channels, channels, 1)
        self.fuse._init_gain = 1.0

    def check_extent(self, spatial: Sequence[int]) -> None:
        for r in self.rates:
            for axis, (rate, n) in enumerate(zip(r, spatial)):
                if rate >= n and n > 1 or (n == 1 and rate > 1):
                    raise ShapeError(
                        f"ASPP dilation {r} exceeds feature-map extent {tuple(spatial)} on axis {axis}"
                    )

    def forward(self, x):
        self.check_extent(x.shape[2:])
        outs = [b(x) for b in self.branches]
        if self.pool is not None:
            g = self.pool(x.mean(dim=(2, 3, 4), keepdim=True))
            outs.append(g.expand_as(outs[0]))
        return self.fuse(torch.cat(outs, dim=1))


def aspp_3d(feat: TensorLike, module: ASPP3d) -> torch.Tensor:
    """Run an :class:`ASPP3d` on an ``(N,H,W,D,C)`` tensor."""
    x = _as_tensor(feat).permute(0, 4, 1, 2, 3)
    return module(x).permute(0, 2, 3, 4, 1)


class SAUNet3D(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        g = cfg.gn_groups
        self.encoders = nn.ModuleList()
        cin = 1
        for c in ch[:-1]:
            self.encoders.append(DoubleConv(cin, c, cfg.encoder_kernel, cfg.norm, g))
            cin = c
        self.pool = nn.MaxPool3d(cfg.resample_kernel, stride=cfg.resample_kernel)
        self.bottleneck = DoubleConv(ch[-2], ch[-1], cfg.bottleneck_kernel, cfg.norm, g)
        self.aspp = ASPP3d(ch[-1], cfg.aspp_rates, g, cfg.aspp_pooling) if cfg.use_aspp else None
        self.upsamples = nn.ModuleList()
        self.attentions = nn.ModuleList() if cfg.use_sam else None
        self.decoders = nn.ModuleList()
        for lvl in reversed(range(cfg.levels - 1)):
            up = nn.ConvTranspose3d(ch[lvl + 1], ch[lvl], cfg.resample_kernel, stride=cfg.resample_kernel)
            up._init_gain = 1.0
            self.upsamples.append(up)
            if cfg.use_sam:
                self.attentions.append(SpatialAttention3d(cfg.sam_kernel))
            self.decoders.append(DoubleConv(2 * ch[lvl], ch[lvl], cfg.encoder_kernel, cfg.norm, g))
        self.head = nn.Conv3d(ch[0], cfg.out_classes, 1)
        self.head._init_gain = 1.0
        init_parameters(self, cfg.seed)
        with torch.no_grad():
            # foreground classes start at the given prior probability
            self.head.bias[1:] = -math.log((1 - cfg.head_prior) / cfg.head_prior)

    def check_input(self, shape: Sequence[int]) -> None:
        n_down = self.cfg.levels - 1
        for axis, (n, k) in enumerate(zip(shape, self.cfg.resample_kernel)):
            if n % (k**n_down):
                raise ShapeError(
                    f"spatial axis {axis} of size {n} not divisible by {k}**{n_down}"
                )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Channel-first forward: ``(N,1,H,W,D)`` -> ``(N,classes,H,W,D)`` logits."""
        if x.shape[1] != 1:
            raise ShapeError(f"expected 1 input channel, got {x.shape[1]}")
        self.check_input(x.shape[2:])
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        if self.aspp is not None:
            x = self.aspp(x)
        _check_finite(x, "bottleneck")
        for i, (up, dec) in enumerate(zip(self.upsamples, self.decoders)):
            x = up(x)
            skip = skips[-(i + 1)]
            if self.attentions is not None:
                skip = self.attentions[i](skip)
            x = dec(torch.cat([skip, x], dim=1))
            _check_finite(x, f"decoder {i}")
        return self.head(x)


def _check_finite(x: torch.Tensor, where: str) -> None:
    if DEBUG and not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations after {where}")


def _fan_in(m: nn.Module) -> int:
    w = m.weight
    if isinstance(m, nn.ConvTranspose3d):
        # kernel == stride: each output voxel sees one tap per input channel
        return w.shape[0] * math.prod(w.shape[2:]) // math.prod(m.stride)
    return w.shape[1] * math.prod(w.shape[2:])


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights (He bound before ReLU), zero biases, unit norm scales."""
    gen = torch.Generator().manual_seed(int(seed))
    for _, m in model.named_modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            gain = getattr(m, "_init_gain", math.sqrt(2.0))
            bound = gain * math.sqrt(3.0 / _fan_in(m))
            w = torch.rand(m.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1
            m.weight.copy_(w * bound)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, (nn.GroupNorm, nn.BatchNorm3d)):
            m.weight.fill_(1.0)
            m.bias.zero_()


def build_model(cfg: ModelConfig) -> SAUNet3D:
    """Construct the network with deterministically initialised parameters.

    The returned module's ``state_dict()`` is the parameter set, keyed by
    stable layer paths such as ``encoders.0.0.conv.weight``.
    """
    return SAUNet3D(cfg)


def parameter_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in build_model(cfg).parameters())


def layer_listing(model_or_cfg: Union[SAUNet3D, ModelConfig]) -> List[str]:
    """One line per leaf layer: ``path Type key=value...`` for graph inspection."""
    model = model_or_cfg if isinstance(model_or_cfg, nn.Module) else build_model(model_or_cfg)
    lines = []
    for path, m in model.named_modules():
        if isinstance(m, (SpatialAttention3d, ASPP3d)):
            lines.append(f"{path} {type(m).__name__}")
        if list(m.children()):
            continue
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            desc = f"kernel={tuple(m.kernel_size)} in={m.in_channels} out={m.out_channels}"
            if m.dilation != (1, 1, 1):
                desc += f" dilation={tuple(m.dilation)}"
        elif isinstance(m, nn.GroupNorm):
            desc = f"groups={m.num_groups} channels={m.num_channels}"
        elif isinstance(m, nn.BatchNorm3d):
            desc = f"channels={m.num_features}"
        elif isinstance(m, nn.MaxPool3d):
            desc = f"kernel={tuple(m.kernel_size)}"
        else:
            desc = ""
        lines.append(f"{path} {type(m).__name__} {desc}".rstrip())
    return lines


# -- functional entry points ----------------------------------------------------

def _as_tensor(x: TensorLike, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    if dtype is not None:
        x = x.to(dtype)
    return x


_SKELETONS: Dict[ModelConfig, SAUNet3D] = {}


def _skeleton(cfg: ModelConfig) -> SAUNet3D:
    if cfg not in _SKELETONS:
        _SKELETONS[cfg] = build_model(cfg)
    return _SKELETONS[cfg]


def forward(
    params: Union[SAUNet3D, Dict[str, torch.Tensor]],
    cfg: Optional[ModelConfig],
    x: TensorLike,
) -> torch.Tensor:
    """Logits ``(N,H,W,D,classes)`` for input ``(N,H,W,D,1)``.

    ``params`` is either a built model or a ``state_dict``-style mapping; in
    the latter case the computation is purely functional.
    """
    if isinstance(params, nn.Module):
        model = params
        dtype = next(model.parameters()).dtype
        xt = _as_tensor(x, dtype)
        _check_rank(xt)
        return model(xt.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
    if cfg is None:
        raise ConfigError("a ModelConfig is required with a parameter mapping")
    skel = _skeleton(cfg)
    dtype = next(iter(params.values())).dtype
    xt = _as_tensor(x, dtype)
    _check_rank(xt)
    out = functional_call(skel, dict(params), (xt.permute(0, 4, 1, 2, 3),), strict=False)
    return out.permute(0, 2, 3, 4, 1)


def _check_rank(x: torch.Tensor) -> None:
    if x.ndim != 5:
        raise ShapeError(f"expected a (N,H,W,D,C) tensor, got shape {tuple(x.shape)}")


@torch.no_grad()
def predict_case(
    model: SAUNet3D,
    case: Case,
    canonical_shape: Sequence[int] = CANONICAL_SHAPE,
    n_chunks: int = N_CHUNKS,
    normalize: bool = True,
) -> LabelMask:
    """Binary WMH mask at the case's original shape.

    Pipeline: normalize, pad/crop to canonical, split into z-slabs, run the
    network per slab, argmax (ties go to background), reassemble, restore.
    """
    was_training = model.training
    model.eval()
    try:
        image = normalize_intensity(case.image) if normalize else case.image
        canon, _, geom = to_canonical(image, None, canonical_shape)
        chunks = slice_z(canon.data, n_chunks, chunk_depth=None)
        labels = []
        for chunk in chunks:
            logits = forward(model, None, chunk[None, ..., None])[0]
            labels.append(argmax_labels(logits).numpy().astype(np.uint8))
        full = unslice_z(labels, n_chunks, chunk_depth=None)
        return from_canonical(full, geom)
    finally:
        model.train(was_training)


def argmax_labels(logits: torch.Tensor) -> torch.Tensor:
    """Class index along the last axis; ties resolve to the lowest index."""
    best = logits[..., 0]
    idx = torch.zeros(logits.shape[:-1], dtype=torch.long)
    for c in range(1, logits.shape[-1]):
        better = logits[..., c] > best
        idx = torch.where(better, c, idx)
        best = torch.where(better, logits[..., c], best)
    return idx
