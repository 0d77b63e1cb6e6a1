"""Geometry pipeline: canonical grid, z-slabs, restoration, normalization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .volume_io import LabelMask, Volume

CANONICAL_SHAPE = (256, 256, 128)
N_CHUNKS = 4
VARIANCE_FLOOR = 1e-8
MAX_INPUT_DIM = 512


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryRecord:
    """Per-axis pad/crop bookkeeping between an original grid and the canonical one."""

    original_shape: Tuple[int, int, int]
    pad_before: Tuple[int, int, int]
    crop_before: Tuple[int, int, int]
    canonical_shape: Tuple[int, int, int] = CANONICAL_SHAPE

    def __post_init__(self) -> None:
        for p, c in zip(self.pad_before, self.crop_before):
            if p < 0 or c < 0:
                raise GeometryError("pads and crops must be non-negative")
            if p and c:
                raise GeometryError("an axis cannot be both padded and cropped")

    @property
    def pad_after(self) -> Tuple[int, ...]:
        return tuple(
            max(t - n, 0) - p
            for n, t, p in zip(self.original_shape, self.canonical_shape, self.pad_before)
        )

    @property
    def crop_after(self) -> Tuple[int, ...]:
        return tuple(
            max(n - t, 0) - c
            for n, t, c in zip(self.original_shape, self.canonical_shape, self.crop_before)
        )

    def to_json(self) -> str:
        return json.dumps({k: list(v) for k, v in asdict(self).items()}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GeometryRecord":
        d = json.loads(text)
        return cls(
            tuple(d["original_shape"]),
            tuple(d["pad_before"]),
            tuple(d["crop_before"]),
            tuple(d.get("canonical_shape", CANONICAL_SHAPE)),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GeometryRecord":
        return cls.from_json(Path(path).read_text())


def plan_geometry(
    shape: Sequence[int], canonical_shape: Sequence[int] = CANONICAL_SHAPE
) -> GeometryRecord:
    # centred; an odd remainder goes to the trailing side
    pads, crops = [], []
    for n, t in zip(shape, canonical_shape):
        if n > MAX_INPUT_DIM:
            raise GeometryError(f"dimension {n} exceeds sanity bound {MAX_INPUT_DIM}")
        pads.append((t - n) // 2 if t >= n else 0)
        crops.append((n - t) // 2 if n > t else 0)
    return GeometryRecord(
        tuple(int(n) for n in shape), tuple(pads), tuple(crops), tuple(int(t) for t in canonical_shape)
    )


def _forward_slices(g: GeometryRecord):
    src, dst = [], []
    for n, t, p, c in zip(g.original_shape, g.canonical_shape, g.pad_before, g.crop_before):
        k = min(n, t)
        src.append(slice(c, c + k))
        dst.append(slice(p, p + k))
    return tuple(src), tuple(dst)


def apply_geometry(arr: np.ndarray, g: GeometryRecord) -> np.ndarray:
    if tuple(arr.shape) != g.original_shape:
        raise GeometryError(f"array shape {arr.shape} != record {g.original_shape}")
    out = np.zeros(g.canonical_shape, dtype=arr.dtype)
    src, dst = _forward_slices(g)
    out[dst] = arr[src]
    return out


def invert_geometry(arr: np.ndarray, g: GeometryRecord) -> np.ndarray:
    if tuple(arr.shape) != g.canonical_shape:
        raise GeometryError(f"array shape {arr.shape} != canonical {g.canonical_shape}")
    out = np.zeros(g.original_shape, dtype=arr.dtype)
    src, dst = _forward_slices(g)
    out[src] = arr[dst]
    return out


def to_canonical(
    v: Volume,
    m: Optional[LabelMask] = None,
    canonical_shape: Sequence[int] = CANONICAL_SHAPE,
) -> Tuple[Volume, Optional[LabelMask], GeometryRecord]:
    """Zero-pad (centred) or centre-crop each axis to the canonical grid."""
    if not np.all(np.isfinite(v.data)):
        raise GeometryError("non-finite intensities")
    g = plan_geometry(v.shape, canonical_shape)
    out_v = Volume(apply_geometry(v.data, g), v.spacing, original_shape=v.original_shape)
    out_m = LabelMask(apply_geometry(m.data, g)) if m is not None else None
    return out_v, out_m, g


def from_canonical(pred: LabelMask | np.ndarray, g: GeometryRecord) -> LabelMask:
    """Restore a canonical-grid mask to the original shape; cropped-away voxels become 0."""
    data = pred.data if isinstance(pred, LabelMask) else np.asarray(pred)
    return LabelMask(invert_geometry(data, g))


def slice_z(v, n_parts: int = N_CHUNKS, chunk_depth: Optional[int] = 32) -> list[np.ndarray]:
    """Split along the third axis into ``n_parts`` contiguous slabs.

    Accepts a :class:`Volume`, a :class:`LabelMask` or any array whose axes
    2 (or, for 5-axis tensors ``(N,H,W,D,C)``, axis 3) is depth. With the
    default ``chunk_depth`` the input depth must be exactly 128; pass
    ``chunk_depth=None`` to accept any depth divisible by ``n_parts``.
    """
    arr = v.data if isinstance(v, (Volume, LabelMask)) else v
    axis = 3 if arr.ndim == 5 else 2
    depth = arr.shape[axis]
    if chunk_depth is None:
        if depth % n_parts:
            raise GeometryError(f"depth {depth} not divisible into {n_parts} parts")
        chunk_depth = depth // n_parts
    if depth != n_parts * chunk_depth:
        raise GeometryError(f"expected depth {n_parts * chunk_depth}, got {depth}")
    idx = [slice(None)] * arr.ndim
    chunks = []
    for k in range(n_parts):
        idx[axis] = slice(k * chunk_depth, (k + 1) * chunk_depth)
        chunks.append(arr[tuple(idx)].copy())
    return chunks


def unslice_z(chunks: Sequence[np.ndarray], n_parts: int = N_CHUNKS, chunk_depth: Optional[int] = 32) -> np.ndarray:
    if len(chunks) != n_parts:
        raise GeometryError(f"expected {n_parts} chunks, got {len(chunks)}")
    first = np.asarray(chunks[0])
    axis = 3 if first.ndim == 5 else 2
    if chunk_depth is None:
        chunk_depth = first.shape[axis]
    for c in chunks:
        c = np.asarray(c)
        if c.shape[axis] != chunk_depth:
            raise GeometryError(f"chunk depth {c.shape[axis]} != {chunk_depth}")
        if c.shape[:axis] != first.shape[:axis] or c.shape[axis + 1:] != first.shape[axis + 1:]:
            raise GeometryError("chunks disagree in non-depth extent")
    return np.concatenate([np.asarray(c) for c in chunks], axis=axis)


def normalize_intensity(v: Volume) -> Volume:
    """Z-score over nonzero voxels; zeros (background/padding) stay zero."""
    data = v.data.astype(np.float64)
    nz = data != 0
    if not nz.any():
        return Volume(v.data.copy(), v.spacing, v.original_shape)
    vals = data[nz]
    mean = vals.mean()
    std = np.sqrt(max(vals.var(), VARIANCE_FLOOR))
    out = np.zeros_like(data)
    out[nz] = (vals - mean) / std
    return Volume(out.astype(np.float32), v.spacing, v.original_shape)


def training_target(m: LabelMask | np.ndarray, ignore_label2: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Binary WMH target and the ignore grid (label 2) for the loss and metrics.

    With ``ignore_label2=False`` label 2 is merged into background instead.
    """
    data = m.data if isinstance(m, LabelMask) else np.asarray(m)
    target = (data == 1).astype(np.uint8)
    if ignore_label2:
        ignore = data == 2
    else:
        ignore = np.zeros(data.shape, dtype=bool)
    return target, ignore
