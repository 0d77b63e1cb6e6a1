"""Segmentation metrics: DICE, AVD and lesion-wise F1 over 3D connected components."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
CSV_FIELDS = ("case_id", "scanner", "dice", "avd", "f1", "n_truth", "n_detected", "n_false")


class UndefinedMetricError(ValueError):
    """The metric is 0/0 for this case (e.g. AVD with an empty truth)."""


def _binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype != bool:
        arr = arr != 0
    return arr


def _prepare(P, G, ignore) -> Tuple[np.ndarray, np.ndarray]:
    P, G = _binary(P, "P"), _binary(G, "G")
    if P.shape != G.shape:
        raise ValueError(f"shape mismatch: prediction {P.shape} vs truth {G.shape}")
    if ignore is not None:
        keep = ~_binary(ignore, "ignore")
        if keep.shape != P.shape:
            raise ValueError(f"shape mismatch: ignore {keep.shape} vs {P.shape}")
        P, G = P & keep, G & keep
    return P, G


def dice(P, G, ignore=None) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both are empty."""
    P, G = _prepare(P, G, ignore)
    denom = int(P.sum()) + int(G.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((P & G).sum()) / denom


def avd(P, G, ignore=None) -> float:
    """|V_P - V_G| / V_G as a ratio (not percent)."""
    P, G = _prepare(P, G, ignore)
    vg = int(G.sum())
    if vg == 0:
        raise UndefinedMetricError("AVD undefined: truth volume is zero")
    return abs(int(P.sum()) - vg) / vg


def connected_components_3d(mask, connectivity: int = 26) -> Tuple[np.ndarray, int]:
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    labels, n = ndimage.label(_binary(mask, "mask"), structure=structure)
    return labels, int(n)


def lesion_f1(P, G, connectivity: int = 26, ignore=None, dilation: int = 0) -> Tuple[float, int, int]:
    """Lesion-wise F1 = N_T / (N_T + N_F).

    N_T counts truth components touched by the prediction; N_F counts
    prediction components touching no truth voxel. With ``dilation > 0`` the
    prediction is dilated (same connectivity) before matching only.
    Returns ``(f1, N_T, N_F)``; when both counts are zero f1 is 1.0 for an
    empty truth and 0.0 otherwise.
    """
    P, G = _prepare(P, G, ignore)
    if dilation > 0:
        structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
        P = ndimage.binary_dilation(P, structure, iterations=dilation)
    g_lab, n_g = connected_components_3d(G, connectivity)
    p_lab, n_p = connected_components_3d(P, connectivity)
    n_t = len(np.unique(g_lab[P & (g_lab > 0)]))
    hit = np.unique(p_lab[G & (p_lab > 0)])
    n_f = n_p - len(hit)
    if n_t + n_f == 0:
        return (1.0 if n_g == 0 else 0.0), n_t, n_f
    return n_t / (n_t + n_f), n_t, n_f


@dataclass
class CaseMetrics:
    case_id: str
    scanner: str
    dice: float
    avd: Optional[float]
    f1: float
    n_truth_lesions: int
    n_detected: int
    n_false: int

    def row(self) -> dict:
        return {
            "case_id": self.case_id,
            "scanner": self.scanner,
            "dice": self.dice,
            "avd": "" if self.avd is None else self.avd,
            "f1": self.f1,
            "n_truth": self.n_truth_lesions,
            "n_detected": self.n_detected,
            "n_false": self.n_false,
        }


def evaluate_case(
    case_id: str, scanner: str, P, G, ignore=None, connectivity: int = 26, dilation: int = 0
) -> CaseMetrics:
    d = dice(P, G, ignore)
    try:
        a = avd(P, G, ignore)
    except UndefinedMetricError:
        log.warning("case %s: AVD undefined (empty truth); excluded from AVD means", case_id)
        a = None
    f1, n_t, n_f = lesion_f1(P, G, connectivity, ignore, dilation)
    _, n_g = connected_components_3d(_prepare(P, G, ignore)[1], connectivity)
    return CaseMetrics(case_id, scanner, d, a, f1, n_g, n_t, n_f)


def _mean(vals: Iterable[Optional[float]]) -> Optional[float]:
    vals = [v for v in vals if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


@dataclass
class GroupSummary:
    name: str
    n_cases: int
    dice: Optional[float]
    avd: Optional[float]
    f1: Optional[float]


@dataclass
class MetricsReport:
    cases: List[CaseMetrics]
    failures: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def per_scanner(self) -> List[GroupSummary]:
        groups: "OrderedDict[str, list]" = OrderedDict()
        for c in sorted(self.cases, key=lambda c: (c.scanner, c.case_id)):
            groups.setdefault(c.scanner, []).append(c)
        return [_summarise(name, rows) for name, rows in groups.items()]

    @property
    def overall(self) -> GroupSummary:
        return _summarise("overall", self.cases)

    def summary_line(self) -> str:
        o = self.overall
        return f"DICE {_fmt(o.dice)} AVD {_fmt(o.avd)} F1 {_fmt(o.f1)}"

    def scanner_lines(self) -> List[str]:
        return [f"{g.name}, DICE {_fmt(g.dice, 2)}, AVD {_fmt(g.avd)}, F1 {_fmt(g.f1, 2)}" for g in self.per_scanner]

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            for c in sorted(self.cases, key=lambda c: c.case_id):
                w.writerow(c.row())
            fh.write("\n# summary\n")
            fh.write("group,n_cases,dice,avd,avd_percent,f1\n")
            for g in [*self.per_scanner, self.overall]:
                pct = "" if g.avd is None else g.avd * 100
                fh.write(f"{g.name},{g.n_cases},{_csv(g.dice)},{_csv(g.avd)},{_csv(pct)},{_csv(g.f1)}\n")

    def to_dict(self) -> dict:
        return {
            "cases": [asdict(c) for c in sorted(self.cases, key=lambda c: c.case_id)],
            "per_scanner": [asdict(g) for g in self.per_scanner],
            "overall": asdict(self.overall),
            "failures": [{"case_id": cid, "error": msg} for cid, msg in self.failures],
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _summarise(name: str, rows: Sequence[CaseMetrics]) -> GroupSummary:
    return GroupSummary(
        name,
        len(rows),
        _mean(c.dice for c in rows),
        _mean(c.avd for c in rows),
        _mean(c.f1 for c in rows),
    )


def _fmt(v: Optional[float], digits: int = 3) -> str:
    return "nan" if v is None else f"{v:.{digits}f}"


def _csv(v) -> str:
    return "" if v is None or v == "" else repr(float(v))


def evaluate_cases(
    pairs: Sequence[tuple],
    connectivity: int = 26,
    ignore_label2: bool = True,
    dilation: int = 0,
) -> MetricsReport:
    """Metrics for ``(case_id, prediction, truth, scanner)`` tuples.

    ``truth`` may be a label mask with values {0,1,2}; WMH is label 1 and
    label-2 voxels are ignored unless ``ignore_label2`` is False. Per-case
    failures are collected in ``report.failures`` rather than dropped.
    """
    rows, failures = [], []
    for case_id, pred, truth, scanner in pairs:
        try:
            truth = np.asarray(truth)
            G = truth == 1
            ignore = (truth == 2) if ignore_label2 else None
            P = np.asarray(pred) == 1
            rows.append(evaluate_case(case_id, scanner, P, G, ignore, connectivity, dilation))
        except Exception as exc:  # noqa: BLE001 - reported per case
            log.error("case %s failed: %s", case_id, exc)
            failures.append((case_id, str(exc)))
    return MetricsReport(rows, failures)
