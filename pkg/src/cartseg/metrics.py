"""Voxel-wise confusion counts and the derived overlap scores.

Ratios with a zero denominator are reported as ``None`` (undefined) rather
than coerced to 0, 1 or NaN.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Volume

METRICS = ("accuracy", "precision", "recall", "dice")


def _ratio(num: float, den: float) -> float | None:
    return num / den if den > 0 else None


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    dice: float | None
    name: str = ""

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int, name: str = "") -> "EvalReport":
        total = tp + fp + fn + tn
        return cls(
            tp, fp, fn, tn,
            accuracy=_ratio(tp + tn, total),
            precision=_ratio(tp, tp + fp),
            recall=_ratio(tp, tp + fn),
            dice=_ratio(2 * tp, 2 * tp + fp + fn),
            name=name,
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_dict(self) -> dict:
        return asdict(self)


def _binary(v) -> np.ndarray:
    arr = v.voxels if isinstance(v, Volume) else np.asarray(v)
    if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
        raise ValueError("evaluate needs binary masks")
    return arr.astype(bool, copy=False)


def evaluate(pred, truth, name: str = "") -> EvalReport:
    p, g = _binary(pred), _binary(truth)
    if p.shape != g.shape:
        raise ValueError(f"prediction dims {p.shape} differ from truth dims {g.shape}")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return EvalReport.from_counts(tp, fp, fn, tn, name)


@dataclass(frozen=True)
class Aggregate:
    report: EvalReport
    mode: str
    undefined: dict  # metric -> number of volumes where it was undefined (macro only)


def aggregate(reports: Sequence[EvalReport], mode: str = "macro") -> EvalReport:
    return aggregate_detail(reports, mode).report


def aggregate_detail(reports: Sequence[EvalReport], mode: str = "macro") -> Aggregate:
    """Macro: unweighted mean of per-volume metrics, skipping undefined ones.
    Micro: metrics recomputed from summed confusion counts."""
    if not reports:
        raise ValueError("aggregate needs at least one report")
    tp = sum(r.tp for r in reports)
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    tn = sum(r.tn for r in reports)
    if mode == "micro":
        return Aggregate(EvalReport.from_counts(tp, fp, fn, tn, "micro"), mode, {m: 0 for m in METRICS})
    if mode != "macro":
        raise ValueError(f"mode must be 'macro' or 'micro', got {mode!r}")
    values, undefined = {}, {}
    for m in METRICS:
        vals = [getattr(r, m) for r in reports if getattr(r, m) is not None]
        undefined[m] = len(reports) - len(vals)
        values[m] = float(np.mean(vals)) if vals else None
    return Aggregate(EvalReport(tp, fp, fn, tn, name="macro", **values), mode, undefined)


def format_table(reports: Sequence[EvalReport], aggregates: Sequence[EvalReport] = ()) -> str:
    def fmt(v):
        return "   n/a" if v is None else f"{v:6.4f}"

    head = f"{'volume':<24} {'tp':>7} {'fp':>7} {'fn':>7} {'tn':>10}  " + "  ".join(f"{m:>9}" for m in METRICS)
    lines = [head, "-" * len(head)]
    for r in list(reports) + list(aggregates):
        lines.append(
            f"{r.name:<24} {r.tp:>7} {r.fp:>7} {r.fn:>7} {r.tn:>10}  "
            + "  ".join(f"{fmt(getattr(r, m)):>9}" for m in METRICS)
        )
    return "\n".join(lines)
