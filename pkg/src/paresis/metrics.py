"""Confusion matrices and accuracy/precision/recall/F1 reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

AVERAGES = ("micro", "macro", "weighted")
REPORT_COLUMNS = ("metric", "micro", "macro", "weighted")
PER_CLASS_COLUMNS = ("class", "support", "tp", "fp", "fn", "tn", "precision", "recall", "f1")


@dataclass
class ConfusionMatrix:
    """Counts with rows = truth and columns = prediction."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        n = len(self.class_names)
        if self.counts.shape != (n, n) or np.any(self.counts < 0):
            raise ValueError(f"counts must be a nonnegative {n}x{n} matrix, got {self.counts.shape}")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_normalized(self) -> np.ndarray:
        """Percentages per truth row; empty rows stay all-zero."""
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(rows > 0, 100.0 * self.counts / np.maximum(rows, 1), 0.0)
        return out

    def one_vs_rest(self):
        """Per-class ``(tp, fp, fn, tn)`` arrays."""
        c = self.counts
        tp = np.diag(c).astype(np.int64)
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        tn = self.total - tp - fp - fn
        return tp, fp, fn, tn


def confusion(truth, pred, n_classes: int, class_names=None) -> ConfusionMatrix:
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise ValueError(f"truth and pred must be equal-length 1-D, got {truth.shape} and {pred.shape}")
    for name, arr in (("truth", truth), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise ValueError(f"{name} label outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (truth, pred), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(n_classes))
    return ConfusionMatrix(counts, names)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


@dataclass
class MetricReport:
    class_names: tuple[str, ...]
    support: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    balanced_accuracy: float
    averages: dict[str, dict[str, float]]
    zero_support: list[str] = field(default_factory=list)
    undefined_precision: list[str] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        return bool(self.zero_support or self.undefined_precision)


def report(cm: ConfusionMatrix, exclude_empty: bool = False) -> MetricReport:
    """One-vs-rest metrics per class plus micro, macro and support-weighted averages.

    A class with no true samples (or no predictions) scores 0 for the
    undefined ratio and is listed in ``zero_support`` / ``undefined_precision``.
    With ``exclude_empty`` the zero-support classes are left out of the macro
    averages and of balanced accuracy.
    """
    total = cm.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp, fp, fn, tn = cm.one_vs_rest()
    support = tp + fn
    precision = _safe_div(tp, tp + fp)
    recall = _safe_div(tp, tp + fn)
    f1 = _safe_div(2 * tp, 2 * tp + fp + fn)
    accuracy = float(tp.sum() / total)
    keep = support > 0 if exclude_empty else np.ones(len(tp), dtype=bool)
    weights = support / support.sum()
    micro_p = float(_safe_div(tp.sum(), tp.sum() + fp.sum()))
    micro_r = float(_safe_div(tp.sum(), tp.sum() + fn.sum()))
    averages = {
        "micro": {"precision": micro_p, "recall": micro_r, "accuracy": accuracy,
                  "f1": float(_safe_div(2 * tp.sum(), 2 * tp.sum() + fp.sum() + fn.sum()))},
        "macro": {"precision": float(precision[keep].mean()), "recall": float(recall[keep].mean()),
                  "f1": float(f1[keep].mean()),
                  "accuracy": float(((tp + tn) / total)[keep].mean())},
        "weighted": {"precision": float(weights @ precision), "recall": float(weights @ recall),
                     "f1": float(weights @ f1), "accuracy": float(weights @ ((tp + tn) / total))},
    }
    names = cm.class_names
    return MetricReport(
        class_names=names, support=support, tp=tp, fp=fp, fn=fn, tn=tn,
        precision=precision, recall=recall, f1=f1, accuracy=accuracy,
        balanced_accuracy=float(recall[keep].mean()), averages=averages,
        zero_support=[names[i] for i in np.flatnonzero(support == 0)],
        undefined_precision=[names[i] for i in np.flatnonzero(tp + fp == 0)],
    )


def balanced_accuracy_from_rates(rates) -> float:
    """Mean of per-class recall values (any consistent unit, e.g. percent)."""
    return float(np.mean(np.asarray(rates, dtype=np.float64)))


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def render_confusion(cm: ConfusionMatrix, normalize: str = "none", fmt: str = "csv") -> str:
    """CSV (or aligned text) with a ``truth\\pred`` header row.

    ``normalize='row'`` gives percentages with two decimals.
    """
    if normalize == "row":
        values = [[f"{v:.2f}" for v in row] for row in cm.row_normalized()]
    elif normalize == "none":
        values = [[str(int(v)) for v in row] for row in cm.counts]
    else:
        raise ValueError(f"normalize must be 'none' or 'row', got {normalize!r}")
    rows = [["truth\\pred", *cm.class_names]] + [[name, *vals] for name, vals in zip(cm.class_names, values)]
    if fmt == "csv":
        return _csv(rows)
    width = max(len(c) for r in rows for c in r)
    return "\n".join(" ".join(c.rjust(width) for c in r) for r in rows) + "\n"


def report_to_csv(rep: MetricReport) -> tuple[str, str]:
    """Return ``(summary_csv, per_class_csv)`` with fixed column orders."""
    summary = [list(REPORT_COLUMNS)]
    for metric in ("accuracy", "precision", "recall", "f1"):
        summary.append([metric] + [repr(rep.averages[a][metric]) for a in AVERAGES])
    summary.append(["balanced_accuracy", "", repr(rep.balanced_accuracy), ""])
    per_class = [list(PER_CLASS_COLUMNS)]
    for i, name in enumerate(rep.class_names):
        per_class.append([name, int(rep.support[i]), int(rep.tp[i]), int(rep.fp[i]), int(rep.fn[i]),
                          int(rep.tn[i]), repr(float(rep.precision[i])), repr(float(rep.recall[i])),
                          repr(float(rep.f1[i]))])
    return _csv(summary), _csv(per_class)


def format_report(rep: MetricReport) -> str:
    lines = [f"{'':>18}{'micro':>10}{'macro':>10}{'weighted':>10}"]
    for metric in ("accuracy", "precision", "recall", "f1"):
        vals = "".join(f"{100 * rep.averages[a][metric]:>10.2f}" for a in AVERAGES)
        lines.append(f"{metric:>18}{vals}")
    lines.append(f"{'balanced accuracy':>18}{100 * rep.balanced_accuracy:>10.2f}")
    if rep.zero_support:
        lines.append(f"warning: no samples for classes {rep.zero_support}")
    return "\n".join(lines)
