"""Loading and saving of 3D intensity volumes and label masks.

Two on-disk formats are understood:

* NIfTI (``.nii`` / ``.nii.gz``), read through nibabel. Axes are taken as
  stored; orientation codes are not applied.
* Raw little-endian binary with a JSON sidecar next to it
  (``case.raw`` + ``case.json``) holding ``shape``, ``spacing`` and ``dtype``
  (``"f32"`` or ``"u8"``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence, Tuple, Union

import nibabel as nib
import numpy as np

PathLike = Union[str, Path]

LABEL_VALUES = (0, 1, 2)

SCANNERS = (
    "3T Philips Achieva",
    "3T Siemens TrioTim",
    "3T GE Signa HDxt",
    "3T Philips Ingenuity",
    "1.5T GE Signa HDxt",
    "phantom",
)

_RAW_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


class VolumeIOError(ValueError):
    """Raised for unreadable files, bad sidecars and inconsistent geometry."""


class IllegalLabelError(VolumeIOError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    original_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise VolumeIOError(f"volume must be a non-empty 3D grid, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeIOError(f"spacing must be three positive reals, got {self.spacing}")
        if self.original_shape is None:
            self.original_shape = tuple(int(n) for n in self.data.shape)
        else:
            self.original_shape = tuple(int(n) for n in self.original_shape)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class LabelMask:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeIOError(f"label mask must be 3D, got shape {arr.shape}")
        check_labels(arr)
        self.data = arr.astype(np.uint8)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass
class Case:
    id: str
    scanner: str
    image: Volume
    truth: Optional[LabelMask] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.truth is not None and self.truth.shape != self.image.shape:
            raise VolumeIOError(
                f"case {self.id}: image shape {self.image.shape} != truth shape {self.truth.shape}"
            )


def check_labels(arr: np.ndarray) -> None:
    values = np.unique(arr)
    bad = [v for v in values.tolist() if v not in LABEL_VALUES]
    if bad:
        raise IllegalLabelError(f"illegal label value(s) {bad}; allowed {list(LABEL_VALUES)}")


def sidecar_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".json")


def _is_nifti(path: Path) -> bool:
    name = path.name.lower()
    return name.endswith(".nii") or name.endswith(".nii.gz")


def read_array(path: PathLike) -> Tuple[np.ndarray, Tuple[float, float, float], dict]:
    """Read a grid and its spacing from NIfTI or raw+sidecar.

    Returns ``(array, spacing, extra)`` where ``extra`` carries any additional
    sidecar keys (empty for NIfTI). The array dtype is whatever is stored.
    """
    path = Path(path)
    if not path.exists():
        raise VolumeIOError(f"file not found: {path}")
    if _is_nifti(path):
        try:
            img = nib.load(str(path))
            arr = np.asarray(img.dataobj)
        except Exception as exc:  # nibabel raises a zoo of types
            raise VolumeIOError(f"unreadable NIfTI file {path}: {exc}") from exc
        if arr.ndim == 4 and arr.shape[3] == 1:
            arr = arr[..., 0]
        if arr.ndim != 3:
            raise VolumeIOError(f"{path}: expected a 3D volume, got shape {arr.shape}")
        zooms = img.header.get_zooms()[:3]
        return arr, tuple(float(z) for z in zooms), {}

    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except FileNotFoundError as exc:
        raise VolumeIOError(f"missing JSON sidecar {side} for raw file {path}") from exc
    except json.JSONDecodeError as exc:
        raise VolumeIOError(f"malformed sidecar {side}: {exc}") from exc
    try:
        shape = tuple(int(n) for n in meta["shape"])
        spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
        dtype = _RAW_DTYPES[meta.get("dtype", "f32")]
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeIOError(f"bad sidecar {side}: {exc}") from exc
    if len(shape) != 3:
        raise VolumeIOError(f"bad sidecar {side}: shape must have 3 entries")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeIOError(f"{path}: {len(raw)} bytes on disk, sidecar implies {expected}")
    # C order, first axis slowest
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    extra = {k: v for k, v in meta.items() if k not in ("shape", "spacing", "dtype")}
    return arr, spacing, extra


def write_array(
    arr: np.ndarray,
    path: PathLike,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    kind: str = "f32",
    extra: Optional[dict] = None,
) -> None:
    """Write a grid in the format implied by the file extension."""
    path = Path(path)
    dtype = _RAW_DTYPES[kind]
    arr = np.asarray(arr).astype(dtype)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if _is_nifti(path):
            img = nib.Nifti1Image(arr, np.diag([*spacing, 1.0]))
            img.header.set_zooms(tuple(float(s) for s in spacing))
            nib.save(img, str(path))
            return
        path.write_bytes(np.ascontiguousarray(arr).tobytes())
        meta: dict[str, Any] = {
            "shape": [int(n) for n in arr.shape],
            "spacing": [float(s) for s in spacing],
            "dtype": kind,
        }
        if extra:
            meta.update(extra)
        sidecar_path(path).write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise VolumeIOError(f"cannot write {path}: {exc}") from exc


def load_volume(path: PathLike) -> Volume:
    arr, spacing, _ = read_array(path)
    return Volume(arr.astype(np.float32, copy=False), spacing)


def load_mask(path: PathLike) -> LabelMask:
    arr, _, _ = read_array(path)
    if np.issubdtype(arr.dtype, np.floating):
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise IllegalLabelError(f"{path}: non-integer label values")
    check_labels(arr)
    return LabelMask(arr)


def load_case(
    image_path: PathLike,
    truth_path: Optional[PathLike] = None,
    scanner: str = "phantom",
    case_id: Optional[str] = None,
) -> Case:
    """Load an image (and optionally its label mask) into a :class:`Case`."""
    image = load_volume(image_path)
    truth = load_mask(truth_path) if truth_path is not None else None
    if truth is not None and truth.shape != image.shape:
        raise VolumeIOError(
            f"shape mismatch: image {image.shape} vs truth {truth.shape}"
        )
    if case_id is None:
        case_id = _stem(Path(image_path))
    return Case(case_id, scanner, image, truth)


def save_mask(mask: LabelMask, path: PathLike, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> None:
    check_labels(mask.data)
    write_array(mask.data, path, spacing, kind="u8")


def save_volume(volume: Volume, path: PathLike) -> None:
    write_array(volume.data, path, volume.spacing, kind="f32")


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii", ".raw"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


# -- dataset directories ----------------------------------------------------
#
# A dataset directory holds ``<id>_image.<ext>`` and optionally
# ``<id>_truth.<ext>`` per case. An optional ``cases.json`` index maps ids to
# scanner names: ``{"cases": [{"id": ..., "scanner": ...}, ...]}``.

_EXTS = (".raw", ".nii.gz", ".nii")


def find_file(directory: Path, stem: str) -> Optional[Path]:
    for ext in _EXTS:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def list_case_ids(directory: PathLike, role: str = "image") -> list[str]:
    directory = Path(directory)
    suffix = f"_{role}"
    ids = set()
    for p in directory.iterdir():
        stem = _stem(p)
        if stem.endswith(suffix) and p.name.endswith(_EXTS):
            ids.add(stem[: -len(suffix)])
    return sorted(ids)


def read_index(directory: PathLike) -> dict[str, str]:
    index = Path(directory) / "cases.json"
    if not index.exists():
        return {}
    entries = json.loads(index.read_text()).get("cases", [])
    return {e["id"]: e.get("scanner", "unknown") for e in entries}


def write_index(directory: PathLike, cases: Sequence[Case]) -> None:
    payload = {"cases": [{"id": c.id, "scanner": c.scanner} for c in cases]}
    Path(directory, "cases.json").write_text(json.dumps(payload, indent=2))


def save_case(case: Case, directory: PathLike, ext: str = ".raw") -> None:
    directory = Path(directory)
    save_volume(case.image, directory / f"{case.id}_image{ext}")
    if case.truth is not None:
        save_mask(case.truth, directory / f"{case.id}_truth{ext}", case.image.spacing)


def load_dataset(directory: PathLike) -> list[Case]:
    """Load every ``<id>_image`` case in a directory, with truth when present."""
    directory = Path(directory)
    if not directory.is_dir():
        raise VolumeIOError(f"data directory not found: {directory}")
    scanners = read_index(directory)
    cases = []
    for cid in list_case_ids(directory, "image"):
        image = find_file(directory, f"{cid}_image")
        truth = find_file(directory, f"{cid}_truth")
        cases.append(load_case(image, truth, scanners.get(cid, "unknown"), case_id=cid))
    return cases
