"""Confusion-matrix evaluation with both metric naming conventions.

The 2x2 matrix is oriented predicted-by-actual with background first.
Heads-up on naming: the reported "sensitivity" treats *background* as
the positive class (it is the background recall) and "specificity" is
the exudate recall -- the inverse of the standard medical convention.
Both namings are emitted side by side with explicit labels so neither
can be misread.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

CLASS_NAMES = ("background", "exudate")


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[p][a] = pixels predicted as class p whose actual class is a."""

    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.shape != (2, 2):
            raise ShapeError(f"confusion matrix must be 2x2, got {arr.shape}")
        if (arr < 0).any():
            raise ValueError("confusion matrix counts must be nonnegative")
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def predicted_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def actual_totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(pred_mask, truth_mask) -> ConfusionMatrix:
    """Count per-pixel agreement between two binary masks of equal extent."""
    pred = np.asarray(pred_mask)
    truth = np.asarray(truth_mask)
    if pred.shape != truth.shape:
        raise ShapeError(
            f"prediction extent {pred.shape} != truth extent {truth.shape}"
        )
    for name, arr in (("prediction", pred), ("truth", truth)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask is not binary")
    cell = pred.astype(np.int64).ravel() * 2 + truth.astype(np.int64).ravel()
    counts = np.bincount(cell, minlength=4).reshape(2, 2)
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class EvalReport:
    """Metrics for one confusion matrix; None marks an undefined ratio."""

    matrix: ConfusionMatrix
    accuracy: float
    paper_sensitivity: float | None      # background recall
    paper_specificity: float | None      # exudate recall
    standard_sensitivity: float | None   # exudate recall
    standard_specificity: float | None   # background recall

    def to_dict(self) -> dict:
        return {
            "counts": self.matrix.counts.tolist(),
            "total": self.matrix.total,
            "accuracy": self.accuracy,
            "paper_sensitivity_background_recall": self.paper_sensitivity,
            "paper_specificity_exudate_recall": self.paper_specificity,
            "standard_sensitivity_exudate_recall": self.standard_sensitivity,
            "standard_specificity_background_recall": self.standard_specificity,
        }


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def report(cm: ConfusionMatrix) -> EvalReport:
    """Accuracy and class recalls; zero-denominator recalls stay undefined."""
    if cm.total == 0:
        raise ValueError("cannot report on an empty confusion matrix")
    actual = cm.actual_totals
    background_recall = _ratio(int(cm.counts[0, 0]), int(actual[0]))
    exudate_recall = _ratio(int(cm.counts[1, 1]), int(actual[1]))
    return EvalReport(
        matrix=cm,
        accuracy=int(cm.counts[0, 0] + cm.counts[1, 1]) / cm.total,
        paper_sensitivity=background_recall,
        paper_specificity=exudate_recall,
        standard_sensitivity=exudate_recall,
        standard_specificity=background_recall,
    )


@dataclass(frozen=True)
class AggregateReport:
    """Pooled (sum counts, then score) and macro (mean of per-image scores)."""

    pooled: EvalReport
    macro_accuracy: float
    macro_paper_sensitivity: float | None
    macro_paper_specificity: float | None
    images: int
    undefined_sensitivity_images: int
    undefined_specificity_images: int

    def to_dict(self) -> dict:
        return {
            "images": self.images,
            "pooled": self.pooled.to_dict(),
            "macro": {
                "accuracy": self.macro_accuracy,
                "paper_sensitivity_background_recall": self.macro_paper_sensitivity,
                "paper_specificity_exudate_recall": self.macro_paper_specificity,
                "undefined_sensitivity_images": self.undefined_sensitivity_images,
                "undefined_specificity_images": self.undefined_specificity_images,
            },
        }


def aggregate(items) -> AggregateReport:
    """Combine per-image matrices (or reports) into pooled and macro views."""
    if not items:
        raise ValueError("aggregate needs at least one confusion matrix")
    matrices = [it.matrix if isinstance(it, EvalReport) else it for it in items]
    reports = [report(m) for m in matrices]
    pooled = report(sum(matrices[1:], start=matrices[0]))
    sens = [r.paper_sensitivity for r in reports if r.paper_sensitivity is not None]
    spec = [r.paper_specificity for r in reports if r.paper_specificity is not None]
    return AggregateReport(
        pooled=pooled,
        macro_accuracy=float(np.mean([r.accuracy for r in reports])),
        macro_paper_sensitivity=float(np.mean(sens)) if sens else None,
        macro_paper_specificity=float(np.mean(spec)) if spec else None,
        images=len(reports),
        undefined_sensitivity_images=len(reports) - len(sens),
        undefined_specificity_images=len(reports) - len(spec),
    )


def _fmt(value: float | None) -> str:
    return "undefined" if value is None else f"{value:.5f}"


def format_table(cm: ConfusionMatrix) -> str:
    """Aligned predicted-by-actual table with marginal totals."""
    rows = [
        ("Predicted \\ Actual", "Background", "Exudates", "Total"),
        ("Background", str(int(cm.counts[0, 0])), str(int(cm.counts[0, 1])),
         str(int(cm.predicted_totals[0]))),
        ("Exudates", str(int(cm.counts[1, 0])), str(int(cm.counts[1, 1])),
         str(int(cm.predicted_totals[1]))),
        ("Total", str(int(cm.actual_totals[0])), str(int(cm.actual_totals[1])),
         str(cm.total)),
    ]
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    lines = []
    for r in rows:
        lines.append("  ".join(
            r[0].ljust(widths[0]) if c == 0 else r[c].rjust(widths[c])
            for c in range(4)
        ).rstrip())
    return "\n".join(lines)


def format_report(rep: EvalReport) -> str:
    lines = [format_table(rep.matrix), ""]
    lines.append(f"accuracy:                          {_fmt(rep.accuracy)}")
    lines.append(f"sensitivity (background recall):   {_fmt(rep.paper_sensitivity)}")
    lines.append(f"specificity (exudate recall):      {_fmt(rep.paper_specificity)}")
    lines.append(f"standard sensitivity (exudate):    {_fmt(rep.standard_sensitivity)}")
    lines.append(f"standard specificity (background): {_fmt(rep.standard_specificity)}")
    return "\n".join(lines)
