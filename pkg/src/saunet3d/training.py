"""Combined cross-entropy + Dice loss, Adam training loop, checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .augmentation import AugmentationConfig, augment, sample_rng
from .model import ModelConfig, SAUNet3D, build_model
from .preprocessing import (
    CANONICAL_SHAPE,
    N_CHUNKS,
    normalize_intensity,
    slice_z,
    to_canonical,
    training_target,
)
from .volume_io import Case

log = logging.getLogger(__name__)

DICE_SMOOTH = 1.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class AllIgnoredError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    steps: int = 100
    loss_weights: Tuple[float, float] = (0.5, 0.5)
    seed: int = 0
    checkpoint_every: int = 0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    canonical_shape: Tuple[int, int, int] = CANONICAL_SHAPE
    n_chunks: int = N_CHUNKS
    normalize: bool = True
    ignore_label2: bool = True

    def __post_init__(self) -> None:
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig.from_dict(self.augmentation)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.canonical_shape = tuple(int(n) for n in self.canonical_shape)
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if len(self.loss_weights) != 2 or min(self.loss_weights) < 0 or sum(self.loss_weights) == 0:
            raise ValueError("loss_weights must be two non-negative reals, not both zero")
        if self.canonical_shape[2] % self.n_chunks:
            raise ValueError("canonical depth must divide into n_chunks slabs")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        d["loss_weights"] = list(self.loss_weights)
        d["canonical_shape"] = list(self.canonical_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown train config keys {sorted(extra)}")
        return cls(**d)


@dataclass
class LossRecord:
    step: int
    total: float
    ce: float
    dice: float


@dataclass
class LossTrace:
    records: List[LossRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def totals(self) -> List[float]:
        return [r.total for r in self.records]

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "total", "ce", "dice"])
            for r in self.records:
                w.writerow([r.step, repr(r.total), repr(r.ce), repr(r.dice)])

    @classmethod
    def read_csv(cls, path) -> "LossTrace":
        with Path(path).open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([LossRecord(int(r["step"]), float(r["total"]), float(r["ce"]), float(r["dice"])) for r in rows])


# -- loss -----------------------------------------------------------------------

def combined_loss(
    logits: torch.Tensor,
    target: torch.Tensor,
    ignore: Optional[torch.Tensor] = None,
    weights: Tuple[float, float] = (0.5, 0.5),
    smooth: float = DICE_SMOOTH,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """``(total, ce, dice_loss)`` for ``(N,H,W,D,2)`` logits and binary targets.

    Both terms are computed over non-ignored voxels only, pooled over the
    whole batch. Ignored voxels are removed with ``torch.where`` so their
    logits cannot influence the value, even when non-finite.
    """
    if logits.shape[-1] != 2:
        raise ValueError(f"expected 2 logit channels, got {logits.shape[-1]}")
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    keep = torch.ones_like(target, dtype=torch.bool) if ignore is None else ~ignore.bool()
    n = keep.sum()
    if int(n) == 0:
        raise AllIgnoredError("every voxel is ignored")
    safe = torch.where(keep[..., None], logits, torch.zeros_like(logits))
    logp = torch.log_softmax(safe, dim=-1)
    t = target.long()
    nll = -logp.gather(-1, t[..., None])[..., 0]
    zero = torch.zeros((), dtype=logits.dtype)
    ce = torch.where(keep, nll, zero).sum() / n
    p1 = torch.where(keep, logp[..., 1].exp(), zero)
    tf = torch.where(keep, t.to(logits.dtype), zero)
    dice_loss = 1 - (2 * (p1 * tf).sum() + smooth) / (p1.sum() + tf.sum() + smooth)
    total = weights[0] * ce + weights[1] * dice_loss
    return total, ce, dice_loss


def make_optimizer(params, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


# -- data -----------------------------------------------------------------------

@dataclass
class Chunk:
    case_id: str
    index: int
    image: np.ndarray
    labels: np.ndarray


def case_chunks(case: Case, cfg: TrainConfig) -> List[Chunk]:
    """Canonical z-slabs of one case: normalize, pad/crop, slice."""
    if case.truth is None:
        raise ValueError(f"case {case.id} has no truth mask")
    image = normalize_intensity(case.image) if cfg.normalize else case.image
    canon, mask, _ = to_canonical(image, case.truth, cfg.canonical_shape)
    imgs = slice_z(canon.data, cfg.n_chunks, chunk_depth=None)
    masks = slice_z(mask.data, cfg.n_chunks, chunk_depth=None)
    return [Chunk(case.id, k, i, m) for k, (i, m) in enumerate(zip(imgs, masks))]


def batch_order(n_chunks: int, batch_size: int, steps: int, seed: int) -> List[List[int]]:
    """Chunk indices per step: consecutive seeded permutations, wrapping epochs."""
    rng = np.random.default_rng(seed)
    order: List[int] = []
    need = steps * batch_size
    while len(order) < need:
        order.extend(rng.permutation(n_chunks).tolist())
    return [order[s * batch_size:(s + 1) * batch_size] for s in range(steps)]


def make_batch(
    chunks: Sequence[Chunk], idx: Sequence[int], cfg: TrainConfig, step: int
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    xs, ts, igs = [], [], []
    for slot, i in enumerate(idx):
        c = chunks[i]
        rng = sample_rng(cfg.augmentation.seed + cfg.seed, step, slot)
        img, lab = augment(c.image, c.labels, cfg.augmentation, rng)
        t, ig = training_target(lab, cfg.ignore_label2)
        xs.append(img)
        ts.append(t)
        igs.append(ig)
    x = torch.from_numpy(np.stack(xs)[..., None].astype(np.float32))
    return x, torch.from_numpy(np.stack(ts)), torch.from_numpy(np.stack(igs))


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[Case],
    out_dir: Optional[Path] = None,
    model: Optional[SAUNet3D] = None,
    on_step: Optional[Callable[[LossRecord], None]] = None,
) -> Tuple[SAUNet3D, LossTrace]:
    """Train from scratch with Adam; returns the model and its loss trace.

    Checkpoints ``ckpt_{step}.bin`` are written to ``out_dir`` every
    ``checkpoint_every`` steps (and after the last step) when both are set.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    torch.manual_seed(train_cfg.seed)
    model = model if model is not None else build_model(model_cfg)
    trace = LossTrace()
    if train_cfg.steps == 0:
        return model, trace

    chunks = [c for case in dataset for c in case_chunks(case, train_cfg)]
    plan = batch_order(len(chunks), train_cfg.batch_size, train_cfg.steps, train_cfg.seed)
    opt = make_optimizer(model.parameters(), train_cfg.lr)
    model.train()
    for step, idx in enumerate(plan, start=1):
        x, t, ig = make_batch(chunks, idx, train_cfg, step)
        logits = model(x.permute(0, 4, 1, 2, 3)).permute(0, 2, 3, 4, 1)
        try:
            total, ce, dl = combined_loss(logits, t, ig, train_cfg.loss_weights)
        except AllIgnoredError:
            log.warning("step %d: every voxel ignored, batch skipped", step)
            continue
        value = float(total.detach())
        if not math.isfinite(value):
            raise DivergenceError(step, value)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        rec = LossRecord(step, value, float(ce.detach()), float(dl.detach()))
        trace.records.append(rec)
        if on_step is not None:
            on_step(rec)
        if out_dir is not None and train_cfg.checkpoint_every and (
            step % train_cfg.checkpoint_every == 0 or step == train_cfg.steps
        ):
            save_checkpoint(model, Path(out_dir) / f"ckpt_{step}.bin", extra=checkpoint_extra(train_cfg, step))
    return model, trace


def checkpoint_extra(cfg: TrainConfig, step: int) -> dict:
    """Metadata prediction needs to reproduce the training-time geometry."""
    return {
        "step": step,
        "preprocessing": {
            "canonical_shape": list(cfg.canonical_shape),
            "n_chunks": cfg.n_chunks,
            "normalize": cfg.normalize,
        },
    }


# -- checkpoints ----------------------------------------------------------------
#
# Layout: magic "SAUNCKPT", u32 version, u32 manifest byte length, UTF-8 JSON
# manifest, then the tensors' raw little-endian float32 bytes in manifest
# order. The manifest carries the ModelConfig, the ordered (path, shape, dtype)
# records, any extra metadata, and a sha256 of the payload.

MAGIC = b"SAUNCKPT"
VERSION = 1


def save_checkpoint(model: SAUNet3D, path, extra: Optional[dict] = None) -> None:
    state = model.state_dict()
    records, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        records.append({"path": name, "shape": list(arr.shape), "dtype": str(t.dtype).replace("torch.", "")})
        blobs.append(arr.tobytes())
    payload = b"".join(blobs)
    manifest = {
        "model_config": model.cfg.to_dict(),
        "tensors": records,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "extra": extra or {},
    }
    head = json.dumps(manifest).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload)


def read_checkpoint(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, n = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(raw[16:16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted manifest") from exc
    payload = raw[16 + n:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: payload checksum mismatch")
    tensors, offset = {}, 0
    for rec in manifest["tensors"]:
        count = int(np.prod(rec["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(rec["shape"])
        tensors[rec["path"]] = arr
        offset += 4 * count
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing or missing tensor data")
    return manifest, tensors


def load_checkpoint(path) -> Tuple[SAUNet3D, dict]:
    manifest, tensors = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(manifest["model_config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from exc
    model = build_model(cfg)
    state = model.state_dict()
    if set(state) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match the configured model")
    dtypes = {rec["path"]: rec["dtype"] for rec in manifest["tensors"]}
    new_state = {}
    for name, ref in state.items():
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr.copy()).to(getattr(torch, dtypes[name]))
    model.load_state_dict(new_state)
    return model, manifest
