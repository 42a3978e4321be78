"""One-pass evaluation: precision and success curves.

Boxes are (x, y, w, h) in pixels with a top-left origin. Frames whose
ground truth is absent (any NaN field) are skipped.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 21), 2)
PRECISION_AT = 20


@dataclass
class SequenceRecord:
    name: str
    boxes: np.ndarray                       # [T,4], NaN rows for absent frames
    attributes: frozenset[str] = frozenset()
    frames: list = field(default_factory=list, repr=False)  # optional pixel data

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.boxes) == 0:
            raise ValueError(f"sequence {self.name!r} has no frames")
        if np.isnan(self.boxes[0]).any():
            raise ValueError(f"sequence {self.name!r}: first frame needs a valid box")
        self.attributes = frozenset(self.attributes)


@dataclass
class EvalReport:
    precision_curve: np.ndarray
    success_curve: np.ndarray
    center_errors: np.ndarray = field(repr=False)
    overlaps: np.ndarray = field(repr=False)
    by_attribute: dict[str, "EvalReport"] = field(default_factory=dict)

    @property
    def precision_at_20(self) -> float:
        return float(self.precision_curve[PRECISION_AT])

    @property
    def success_auc(self) -> float:
        return float(self.success_curve.mean())

    @property
    def n_frames(self) -> int:
        return len(self.overlaps)


def iou(a, b) -> np.ndarray | float:
    """Intersection over union of (x, y, w, h) boxes; 0 where the union is empty.
    Broadcasts over leading axes. Clipped to [0, 1] against rounding."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, np.minimum(inter / np.where(union > 0, union, 1), 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def center_error(a, b) -> np.ndarray | float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    ca = a[..., :2] + a[..., 2:] / 2
    cb = b[..., :2] + b[..., 2:] / 2
    d = ca - cb
    out = np.hypot(d[..., 0], d[..., 1])
    return float(out) if out.ndim == 0 else out


def _curves(errors: np.ndarray, overlaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if len(errors) == 0:
        raise ValueError("no scorable frames")
    precision = (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (overlaps[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return precision, success


def report_from_pairs(errors: np.ndarray, overlaps: np.ndarray) -> EvalReport:
    precision, success = _curves(errors, overlaps)
    return EvalReport(precision, success, errors, overlaps)


def evaluate(results, gt: SequenceRecord) -> EvalReport:
    results = np.asarray(results, dtype=np.float64).reshape(-1, 4)
    if len(results) != len(gt.boxes):
        raise ValueError(f"{gt.name}: {len(results)} result boxes for {len(gt.boxes)} frames")
    valid = ~np.isnan(gt.boxes).any(axis=1)
    res, ref = results[valid], gt.boxes[valid]
    return report_from_pairs(np.atleast_1d(center_error(res, ref)), np.atleast_1d(iou(res, ref)))


def aggregate(reports: dict[str, EvalReport], records: dict[str, SequenceRecord] | None = None,
              attribute: str | None = None, pooled: bool = True) -> EvalReport:
    """Combine per-sequence reports, optionally restricted to one attribute.

    Pooled mode concatenates all frames before computing curves; otherwise
    curves are averaged over sequences.
    """
    names = sorted(reports)
    if attribute is not None:
        if records is None:
            raise ValueError("attribute filtering needs the sequence records")
        names = [n for n in names if attribute in records[n].attributes]
    if not names:
        raise ValueError(f"empty selection (attribute={attribute!r})")
    if pooled:
        errors = np.concatenate([reports[n].center_errors for n in names])
        overlaps = np.concatenate([reports[n].overlaps for n in names])
        return report_from_pairs(errors, overlaps)
    precision = np.mean([reports[n].precision_curve for n in names], axis=0)
    success = np.mean([reports[n].success_curve for n in names], axis=0)
    return EvalReport(precision, success,
                      np.concatenate([reports[n].center_errors for n in names]),
                      np.concatenate([reports[n].overlaps for n in names]))


def evaluate_all(results: dict[str, np.ndarray], records: dict[str, SequenceRecord], pooled: bool = True) -> EvalReport:
    """Overall report with one sub-report per attribute tag."""
    reports = {name: evaluate(results[name], records[name]) for name in sorted(records)}
    overall = aggregate(reports, records, pooled=pooled)
    tags = sorted(set().union(*(r.attributes for r in records.values())))
    overall.by_attribute = {t: aggregate(reports, records, t, pooled) for t in tags}
    return overall


# ---------------------------------------------------------------------------
# file formats


def read_boxes(path) -> np.ndarray:
    """One "x,y,w,h" line per frame; "NaN" tokens allowed."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").split(",")
        if len(parts) != 4:
            raise ValueError(f"{path}:{lineno}: expected 4 comma-separated values, got {line!r}")
        rows.append([float(p) for p in parts])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def _fmt(v: float) -> str:
    return "NaN" if math.isnan(v) else repr(round(float(v), 4))


def write_boxes(path, boxes: Iterable[Sequence[float]]) -> None:
    lines = [",".join(_fmt(v) for v in box) for box in boxes]
    Path(path).write_text("\n".join(lines) + "\n")


def read_attributes(path) -> dict[str, frozenset[str]]:
    """Lines of "name: tag,tag,..."."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        if ":" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'name: tag,tag,...'")
        name, tags = line.split(":", 1)
        out[name.strip()] = frozenset(t.strip() for t in tags.split(",") if t.strip())
    return out


def write_attributes(path, attrs: dict[str, Iterable[str]]) -> None:
    Path(path).write_text("".join(f"{n}: {','.join(sorted(t))}\n" for n, t in sorted(attrs.items())))


def write_report_csv(path, report: EvalReport) -> None:
    """Rows of curve,threshold,value, then summary rows per attribute."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "threshold", "value"])

        def emit(tag: str, rep: EvalReport):
            for t, v in zip(PRECISION_THRESHOLDS, rep.precision_curve):
                w.writerow([f"{tag}precision", f"{t:g}", f"{v:.6f}"])
            for t, v in zip(SUCCESS_THRESHOLDS, rep.success_curve):
                w.writerow([f"{tag}success", f"{t:.2f}", f"{v:.6f}"])

        emit("", report)
        for tag, sub in sorted(report.by_attribute.items()):
            emit(f"{tag}:", sub)
        w.writerow(["summary", "precision_at_20", f"{report.precision_at_20:.6f}"])
        w.writerow(["summary", "success_auc", f"{report.success_auc:.6f}"])
        w.writerow(["summary", "frames", str(report.n_frames)])
        for tag, sub in sorted(report.by_attribute.items()):
            w.writerow([f"summary:{tag}", "success_auc", f"{sub.success_auc:.6f}"])
