"""Paired image/mask augmentation for anisotropic volumes.

Geometric transforms (flip, transpose, rotation, elastic) act only in the
H-W plane and are applied identically to image and mask; the mask is
resampled nearest-neighbour. Intensity transforms (channel shift, bias
field, motion ghosting) touch the image only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from itertools import product
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

TRANSFORMS = (
    "rotation",
    "flip",
    "transpose",
    "channel_shift",
    "bias_field",
    "elastic",
    "ghosting",
)


def _all_enabled() -> dict:
    return {name: True for name in TRANSFORMS}


@dataclass
class AugmentationConfig:
    enabled: dict = field(default_factory=_all_enabled)
    rotation_max_deg: float = 15.0
    elastic_alpha: float = 8.0
    elastic_sigma: float = 4.0
    channel_shift_max: float = 0.1
    bias_field_order: int = 3
    bias_field_strength: float = 0.3
    ghost_axes: Tuple[int, ...] = (0, 1)
    ghost_intensity: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        unknown = set(self.enabled) - set(TRANSFORMS)
        if unknown:
            raise ValueError(f"unknown transforms {sorted(unknown)}")
        self.enabled = {name: bool(self.enabled.get(name, False)) for name in TRANSFORMS}
        if not 0 <= self.rotation_max_deg <= 180:
            raise ValueError("rotation_max_deg must lie in [0, 180]")
        for name in ("elastic_alpha", "elastic_sigma", "channel_shift_max",
                     "bias_field_strength", "ghost_intensity"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bias_field_order < 0:
            raise ValueError("bias_field_order must be >= 0")
        self.ghost_axes = tuple(int(a) for a in self.ghost_axes)
        if not self.ghost_axes or any(a not in (0, 1) for a in self.ghost_axes):
            raise ValueError("ghost_axes must be a non-empty subset of {0, 1}")

    @classmethod
    def only(cls, *names: str, **kwargs) -> "AugmentationConfig":
        return cls(enabled={n: True for n in names}, **kwargs)

    @classmethod
    def none(cls, **kwargs) -> "AugmentationConfig":
        return cls(enabled={}, **kwargs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ghost_axes"] = list(self.ghost_axes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def sample_rng(seed: int, *sample_id: int) -> np.random.Generator:
    """Independent stream per (seed, sample id...) for parallel-safe augmentation."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, sample_id)]))


# -- H-W plane coordinate maps ------------------------------------------------

def rotation_coords(shape: Tuple[int, int], angle_deg: float) -> Tuple[np.ndarray, np.ndarray]:
    """Source (row, col) for every output pixel of a rotation about the plane centre."""
    h, w = shape
    ch, cw = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(angle_deg)
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dr, dc = rr - ch, cc - cw
    src_r = np.cos(t) * dr + np.sin(t) * dc + ch
    src_c = -np.sin(t) * dr + np.cos(t) * dc + cw
    return src_r, src_c


def elastic_displacement(
    shape: Tuple[int, int], alpha: float, sigma: float, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    noise = rng.uniform(-1.0, 1.0, size=(2, *shape))
    dr = ndimage.gaussian_filter(noise[0], sigma, mode="constant") * alpha
    dc = ndimage.gaussian_filter(noise[1], sigma, mode="constant") * alpha
    return dr, dc


def warp_linear(image: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    # bilinear in-plane per slice == trilinear with integer z
    out = np.empty_like(image)
    for z in range(image.shape[2]):
        out[:, :, z] = ndimage.map_coordinates(
            image[:, :, z], [src_r, src_c], order=1, mode="constant", cval=0.0
        )
    return out


def warp_nearest(mask: np.ndarray, src_r: np.ndarray, src_c: np.ndarray) -> np.ndarray:
    h, w = mask.shape[:2]
    r = np.floor(src_r + 0.5).astype(np.int64)
    c = np.floor(src_c + 0.5).astype(np.int64)
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.zeros_like(mask)
    out[inside] = mask[r[inside], c[inside]]
    return out


# -- intensity transforms -----------------------------------------------------

def bias_field(
    shape: Tuple[int, int, int], order: int, strength: float, rng: np.random.Generator
) -> np.ndarray:
    """Smooth multiplicative field ``exp(p)`` with ``p`` a zero-mean polynomial.

    ``p`` is rescaled when needed so that ``max|p| <= log(1 + strength)``,
    which keeps the field inside ``[1/(1+s), 1+s]`` and hence ``[1-s, 1+s]``.
    """
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1) for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(shape, dtype=np.float64)
    for i, j, k in product(range(order + 1), repeat=3):
        if i + j + k > order:
            continue
        poly += rng.uniform(-strength, strength) * x**i * y**j * z**k
    poly -= poly.mean()
    bound = np.log1p(strength)
    peak = np.abs(poly).max()
    if peak > bound:
        poly *= bound / peak
    return np.exp(poly)


def motion_ghosting(image: np.ndarray, axis: int, k: int, intensity: float) -> np.ndarray:
    """Attenuate every k-th k-space line along ``axis`` (DC line kept).

    Lines are indexed by signed frequency so the mask is Hermitian-symmetric
    and the result stays real.
    """
    kspace = np.fft.fftn(image, axes=(0, 1))
    n = image.shape[axis]
    lines = np.rint(np.fft.fftfreq(n) * n).astype(np.int64)
    hit = (lines % k == 0) & (lines != 0)
    scale = np.where(hit, 1.0 - intensity, 1.0)
    shape = [1] * image.ndim
    shape[axis] = n
    kspace = kspace * scale.reshape(shape)
    return np.real(np.fft.ifftn(kspace, axes=(0, 1))).astype(image.dtype)


# -- driver -------------------------------------------------------------------

def augment(
    image: np.ndarray,
    mask: np.ndarray,
    cfg: AugmentationConfig,
    draw: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Apply the enabled transforms in a fixed order; returns new arrays.

    Draws from ``draw`` happen in a fixed sequence regardless of which
    transforms are enabled, so toggling one transform never shifts the
    random parameters of another.
    """
    if image.shape != mask.shape:
        raise ValueError(f"image {image.shape} and mask {mask.shape} differ in shape")
    if image.ndim != 3:
        raise ValueError("augment expects 3D arrays")
    rng = draw if draw is not None else np.random.default_rng(cfg.seed)
    on = cfg.enabled
    if not any(on.values()):
        return image, mask

    p = draw_params(cfg, rng)
    field_rng = np.random.default_rng(p["field_seed"])
    elastic_rng = np.random.default_rng(p["elastic_seed"])

    img = np.array(image, dtype=np.float32, copy=True)
    msk = np.array(mask, copy=True)

    if on["flip"]:
        if p["flip_h"]:
            img, msk = img[::-1], msk[::-1]
        if p["flip_w"]:
            img, msk = img[:, ::-1], msk[:, ::-1]
    if on["transpose"] and p["swap"]:
        img, msk = img.transpose(1, 0, 2), msk.transpose(1, 0, 2)
    img, msk = np.ascontiguousarray(img), np.ascontiguousarray(msk)

    plane = img.shape[:2]
    src = None
    if on["rotation"] and p["angle"] != 0.0:
        src = rotation_coords(plane, p["angle"])
    if on["elastic"] and cfg.elastic_alpha > 0:
        dr, dc = elastic_displacement(plane, cfg.elastic_alpha, cfg.elastic_sigma, elastic_rng)
        if src is None:
            rr, cc = np.meshgrid(np.arange(plane[0], dtype=np.float64),
                                 np.arange(plane[1], dtype=np.float64), indexing="ij")
            src = (rr + dr, cc + dc)
        else:
            # displacement sampled at the output grid, then rotated lookup
            src = (src[0] + dr, src[1] + dc)
    if src is not None:
        img = warp_linear(img, *src)
        msk = warp_nearest(msk, *src)

    if on["channel_shift"]:
        img = img + np.float32(p["shift"] * float(img.std()))
    if on["bias_field"]:
        img = (img * bias_field(img.shape, cfg.bias_field_order, cfg.bias_field_strength, field_rng)).astype(np.float32)
    if on["ghosting"] and cfg.ghost_intensity > 0:
        img = motion_ghosting(img, p["ghost_axis"], p["ghost_k"], cfg.ghost_intensity)

    return img.astype(np.float32), msk


def draw_params(cfg: AugmentationConfig, draw: np.random.Generator) -> dict:
    """Draw every random parameter of one augmentation, in a fixed order."""
    flip_h, flip_w, swap = draw.random(3) < 0.5
    return {
        "flip_h": bool(flip_h),
        "flip_w": bool(flip_w),
        "swap": bool(swap),
        "angle": float(draw.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg)),
        "shift": float(draw.uniform(-cfg.channel_shift_max, cfg.channel_shift_max)),
        "ghost_axis": int(cfg.ghost_axes[draw.integers(len(cfg.ghost_axes))]),
        "ghost_k": int(draw.integers(2, 5)),
        "field_seed": int(draw.integers(2**63)),
        "elastic_seed": int(draw.integers(2**63)),
    }
