"""Dice evaluation and comparison reports.

Conventions: a label absent from both maps scores 1 (perfect absence);
absent from exactly one scores 0; the per-subject mean runs over non-
background labels present in the ground truth.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, ParameterError
from .volume import LabelMap


def dice_per_label(pred: LabelMap, gt: LabelMap, num_classes: int) -> np.ndarray:
    """Dice_c = 2|P∩G| / (|P|+|G|) for every label c in [0, C)."""
    if pred.dims != gt.dims:
        raise ParameterError(f"pred dims {pred.dims} != gt dims {gt.dims}")
    num_classes = int(num_classes)
    p = pred.data.ravel().astype(np.int64)
    g = gt.data.ravel().astype(np.int64)
    if p.max(initial=0) >= num_classes or g.max(initial=0) >= num_classes:
        raise ParameterError("labels exceed num_classes")
    np_c = np.bincount(p, minlength=num_classes).astype(np.float64)
    ng_c = np.bincount(g, minlength=num_classes).astype(np.float64)
    inter = np.bincount(p[p == g], minlength=num_classes).astype(np.float64)
    denom = np_c + ng_c
    out = np.empty(num_classes, dtype=np.float64)
    both_empty = denom == 0
    out[both_empty] = 1.0
    out[~both_empty] = 2.0 * inter[~both_empty] / denom[~both_empty]
    return out


def mean_dice(pred: LabelMap, gt: LabelMap, num_classes: int) -> float:
    """Mean Dice over non-background labels present in the ground truth."""
    scores = dice_per_label(pred, gt, num_classes)
    present = np.bincount(gt.data.ravel().astype(np.int64), minlength=num_classes) > 0
    present[0] = False
    if not present.any():
        raise DegenerateInputError("ground truth contains only background")
    return float(scores[present].mean())


@dataclass
class DiceReport:
    """Per-(method, subject) mean-Dice results with table/CSV renderings."""

    rows: list[tuple[str, str, float]]

    def __post_init__(self):
        if not self.rows:
            raise ParameterError("report needs at least one result row")

    def methods(self) -> list[str]:
        """Method names sorted by ascending global mean (best last)."""
        means = {}
        for method, _, value in self.rows:
            means.setdefault(method, []).append(value)
        return sorted(means, key=lambda m: (float(np.mean(means[m])), m))

    def global_mean(self, method: str) -> float:
        vals = [v for m, _, v in self.rows if m == method]
        return float(np.mean(vals))

    def table(self) -> str:
        subjects = sorted({s for _, s, _ in self.rows})
        name_w = max(len("method"), max(len(m) for m, _, _ in self.rows))
        header = ["method".ljust(name_w), "mean"] + subjects
        lines = ["  ".join(header)]
        for method in self.methods():
            by_subject = {s: v for m, s, v in self.rows if m == method}
            cells = [method.ljust(name_w), f"{100 * self.global_mean(method):.1f}".rjust(4)]
            for s in subjects:
                cell = f"{100 * by_subject[s]:.1f}" if s in by_subject else "-"
                cells.append(cell.rjust(len(s)))
            lines.append("  ".join(cells))
        return "\n".join(lines) + "\n"

    def csv(self) -> str:
        buf = io.StringIO()
        buf.write("method,subject,mean_dice\n")
        for method in self.methods():
            for m, s, v in self.rows:
                if m == method:
                    buf.write(f"{m},{s},{v:.6f}\n")
        return buf.getvalue()


def report(results: list[tuple[str, str, float]]) -> DiceReport:
    return DiceReport(list(results))
