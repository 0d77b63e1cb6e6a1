"""Synthetic FLAIR-like phantoms with small, faint, z-flattened lesions.

Lesion centres are drawn at continuous (sub-voxel) positions on all three
axes, so the expected voxel count of a stamped ellipsoid equals its
continuous volume ``4/3·pi·rh·rw·rd``. Thin lesions (``rd < 0.5``) can
therefore miss every z-plane; such stamps are recorded with zero voxels and
do not appear in the truth mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .volume_io import Case, LabelMask, Volume


@dataclass
class PhantomConfig:
    shape: Tuple[int, int, int] = (64, 64, 16)
    spacing: Tuple[float, float, float] = (1.0, 1.0, 3.0)
    n_lesions: Tuple[int, int] = (3, 10)
    lesion_radius_inplane: Tuple[float, float] = (1.0, 4.0)
    lesion_radius_z: Tuple[float, float] = (0.0, 1.0)
    lesion_contrast: float = 1.5
    background_noise: float = 0.1
    background_level: float = 1.0
    include_label2: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.n_lesions = tuple(int(n) for n in self.n_lesions)
        self.lesion_radius_inplane = tuple(float(r) for r in self.lesion_radius_inplane)
        self.lesion_radius_z = tuple(float(r) for r in self.lesion_radius_z)
        if any(n < m for n, m in zip(self.shape, (16, 16, 4))):
            raise ValueError(f"phantom shape must be at least (16,16,4), got {self.shape}")
        if self.lesion_contrast <= 0:
            raise ValueError("lesion_contrast must be > 0")
        if self.n_lesions[0] < 0 or self.n_lesions[1] < self.n_lesions[0]:
            raise ValueError(f"bad lesion count range {self.n_lesions}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def ellipsoid_mask(shape, centre, radii) -> np.ndarray:
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = np.zeros(shape, dtype=np.float64)
    for g, c, r in zip(grids, centre, radii):
        d = g - c
        if r <= 0:
            # degenerate axis: only an exact hit counts
            acc = acc + np.where(d == 0, 0.0, np.inf)
        else:
            acc = acc + (d / r) ** 2
    return acc <= 1.0


def _head_mask(shape) -> np.ndarray:
    h, w, _ = shape
    rr, cc = np.ogrid[:h, :w]
    inside = ((rr - (h - 1) / 2) / (0.45 * h)) ** 2 + ((cc - (w - 1) / 2) / (0.45 * w)) ** 2 <= 1
    return np.repeat(inside[:, :, None], shape[2], axis=2)


def generate(cfg: PhantomConfig, case_id: Optional[str] = None) -> Case:
    """One phantom case; identical config (including seed) gives an identical case."""
    rng = np.random.default_rng(cfg.seed)
    shape = cfg.shape
    head = _head_mask(shape)

    # smooth low-order field plus white noise, zero outside the head
    coarse = rng.normal(size=(4, 4, 2))
    zoom = [n / c for n, c in zip(shape, coarse.shape)]
    smooth = ndimage.zoom(coarse, zoom, order=3)[: shape[0], : shape[1], : shape[2]]
    base = cfg.background_level + 0.1 * smooth
    image = base + rng.normal(scale=cfg.background_noise, size=shape)

    truth = np.zeros(shape, dtype=np.uint8)
    occupied = np.zeros(shape, dtype=bool)
    lesions = []
    n = int(rng.integers(cfg.n_lesions[0], cfg.n_lesions[1] + 1))
    n_blobs = n + (1 if cfg.include_label2 else 0)
    # keep lesions 4 voxels clear of the head outline, in-plane only
    inner2d = ndimage.binary_erosion(head[:, :, 0], iterations=4, border_value=0)
    inner = np.repeat(inner2d[:, :, None], shape[2], axis=2)
    halo = ndimage.generate_binary_structure(3, 3)
    for k in range(n_blobs):
        label = 2 if k == n else 1
        # radii are fixed per lesion; only the position is retried, so
        # rejection does not bias the size distribution toward small lesions
        rh, rw = rng.uniform(*cfg.lesion_radius_inplane, size=2)
        rd = rng.uniform(*cfg.lesion_radius_z)
        for _attempt in range(100):
            centre = (
                rng.uniform(6, shape[0] - 7),
                rng.uniform(6, shape[1] - 7),
                rng.uniform(0.5, shape[2] - 1.5),
            )
            stamp = ellipsoid_mask(shape, centre, (rh, rw, rd))
            if (stamp & ~inner).any():
                continue
            # lesions must not touch, even diagonally
            if (ndimage.binary_dilation(stamp, halo) & occupied).any():
                continue
            break
        else:
            continue
        occupied |= stamp
        truth[stamp] = label
        lesions.append({
            "label": label,
            "centre": [float(c) for c in centre],
            "radii": [float(rh), float(rw), float(rd)],
            "voxels": int(stamp.sum()),
        })

    std = cfg.background_noise
    image = np.where(truth > 0, image + cfg.lesion_contrast * std, image)
    image = np.where(head, image, 0.0).astype(np.float32)

    cid = case_id if case_id is not None else f"phantom_{cfg.seed:04d}"
    return Case(
        cid,
        "phantom",
        Volume(image, cfg.spacing),
        LabelMask(truth),
        meta={"lesions": lesions, "n_requested": n},
    )


def generate_dataset(n: int, cfg: Optional[PhantomConfig] = None, seed: int = 0) -> List[Case]:
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or PhantomConfig()
    out = []
    for i in range(n):
        sub = PhantomConfig.from_dict({**asdict(cfg), "seed": seed + i})
        out.append(generate(sub, case_id=f"phantom_{i:03d}"))
    return out


def expected_lesion_volume(cfg: PhantomConfig) -> float:
    """Mean continuous ellipsoid volume under the configured radius ranges."""
    mean_ip = sum(cfg.lesion_radius_inplane) / 2
    mean_z = sum(cfg.lesion_radius_z) / 2
    return 4.0 / 3.0 * np.pi * mean_ip * mean_ip * mean_z
