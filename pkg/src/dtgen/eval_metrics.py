"""Confusion matrices and classification metrics with paper-style tables.

Conventions: confusion rows are true classes, columns are predictions.
Precision = TP/(TP+FP), recall = TP/(TP+FN), F1 their harmonic mean,
accuracy = trace/total.  Division by zero yields 0.0 and sets a degenerate
flag instead of raising, so degenerate predictors (all one class) evaluate
cleanly.  Multi-class summaries use macro averaging; binary summaries report
the positive class, which for this domain is "dirty".

Prediction files are CSV with header ``sample_id,true_label,predicted_label``
and integer labels.  Comparison tables round half-up to two decimals
(0.925 -> 0.93).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Sequence

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ("sample_id", "true_label", "predicted_label")


class MetricsError(ValueError):
    """Raised for malformed labels or prediction files."""


def round_half_up(value: float, places: int = 2) -> float:
    """Decimal half-up rounding: 0.925 -> 0.93 at two places."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Square count matrix indexed [true][predicted] plus class names."""

    counts: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        n = len(self.class_names)
        if len(self.counts) != n or any(len(row) != n for row in self.counts):
            raise MetricsError(f"counts must be {n}x{n} to match class names")
        if any(c < 0 for row in self.counts for c in row):
            raise MetricsError("counts must be non-negative")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def row_sums(self) -> tuple[int, ...]:
        return tuple(sum(row) for row in self.counts)

    def col_sums(self) -> tuple[int, ...]:
        return tuple(sum(row[j] for row in self.counts) for j in range(self.num_classes))

    def to_dict(self) -> dict[str, Any]:
        return {
            "class_names": list(self.class_names),
            "counts": [list(row) for row in self.counts],
        }


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float
    recall: float
    f1: float
    support: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
        }


@dataclass(frozen=True)
class MetricsReport:
    """Per-class and aggregate metrics; ``positive`` set for binary tasks."""

    per_class: tuple[ClassMetrics, ...]
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    positive: ClassMetrics | None
    averaging: str
    degenerate_flags: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_class": [c.to_dict() for c in self.per_class],
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "positive": self.positive.to_dict() if self.positive else None,
            "averaging": self.averaging,
            "degenerate_flags": list(self.degenerate_flags),
        }

    def headline(self) -> tuple[float, float, float, float]:
        """(precision, recall, f1, accuracy): positive-class if binary, else macro."""
        source = self.positive
        if source is not None:
            return source.precision, source.recall, source.f1, self.accuracy
        return self.macro_precision, self.macro_recall, self.macro_f1, self.accuracy


def confusion(
    y_true: Sequence[int],
    y_pred: Sequence[int],
    num_classes: int,
    class_names: Sequence[str] | None = None,
) -> ConfusionMatrix:
    """Exact tally of (true, predicted) pairs."""
    if len(y_true) != len(y_pred):
        raise MetricsError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if num_classes < 1:
        raise MetricsError(f"num_classes must be >= 1, got {num_classes}")
    if class_names is None:
        class_names = tuple(f"class_{i}" for i in range(num_classes))
    elif len(class_names) != num_classes:
        raise MetricsError("class_names length must equal num_classes")
    counts = [[0] * num_classes for _ in range(num_classes)]
    for i, (t, p) in enumerate(zip(y_true, y_pred)):
        if not 0 <= t < num_classes:
            raise MetricsError(f"true label {t} at row {i} outside 0..{num_classes - 1}")
        if not 0 <= p < num_classes:
            raise MetricsError(f"predicted label {p} at row {i} outside 0..{num_classes - 1}")
        counts[t][p] += 1
    return ConfusionMatrix(tuple(tuple(row) for row in counts), tuple(class_names))


def _safe_div(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix, positive_class: int | None = None) -> MetricsReport:
    """Per-class precision/recall/F1, macro averages, and accuracy.

    ``positive_class`` selects the class reported as the binary headline;
    it defaults to class 1 for two-class matrices and to none otherwise.
    """
    n = cm.num_classes
    if positive_class is None and n == 2:
        positive_class = 1
    if positive_class is not None and not 0 <= positive_class < n:
        raise MetricsError(f"positive_class {positive_class} outside 0..{n - 1}")

    flags: list[str] = []
    row_sums = cm.row_sums()
    col_sums = cm.col_sums()
    per_class: list[ClassMetrics] = []
    for i in range(n):
        tp = cm.counts[i][i]
        precision = _safe_div(tp, col_sums[i], f"no predictions for {cm.class_names[i]}", flags)
        recall = _safe_div(tp, row_sums[i], f"no true samples of {cm.class_names[i]}", flags)
        f1 = _safe_div(
            2 * precision * recall, precision + recall, f"zero P+R for {cm.class_names[i]}", flags
        )
        per_class.append(ClassMetrics(cm.class_names[i], precision, recall, f1, row_sums[i]))

    total = cm.total
    accuracy = _safe_div(sum(cm.counts[i][i] for i in range(n)), total, "empty matrix", flags)
    macro_p = sum(c.precision for c in per_class) / n
    macro_r = sum(c.recall for c in per_class) / n
    macro_f1 = sum(c.f1 for c in per_class) / n
    return MetricsReport(
        per_class=tuple(per_class),
        accuracy=accuracy,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f1,
        positive=per_class[positive_class] if positive_class is not None else None,
        averaging="macro",
        degenerate_flags=tuple(flags),
    )


def table_report(reports: Sequence[tuple[str, MetricsReport]]) -> dict[str, Any]:
    """Fixed-width comparison table plus machine-readable rows.

    Each row shows the report's headline metrics (positive class for binary,
    macro for multi-class) rounded half-up to two decimals.  Returns
    {"text": str, "rows": [...]}.
    """
    header = ("Scheme", "Precision", "Recall", "F1", "Accuracy")
    rows: list[dict[str, Any]] = []
    for name, report in reports:
        p, r, f1, acc = report.headline()
        rows.append(
            {
                "scheme": name,
                "precision": round_half_up(p),
                "recall": round_half_up(r),
                "f1": round_half_up(f1),
                "accuracy": round_half_up(acc),
            }
        )
    name_width = max([len(header[0])] + [len(r["scheme"]) for r in rows])
    lines = [
        f"{header[0]:<{name_width}}  {header[1]:>9}  {header[2]:>6}  {header[3]:>4}  {header[4]:>8}"
    ]
    for row in rows:
        lines.append(
            f"{row['scheme']:<{name_width}}  {row['precision']:>9.2f}  "
            f"{row['recall']:>6.2f}  {row['f1']:>4.2f}  {row['accuracy']:>8.2f}"
        )
    return {"text": "\n".join(lines), "rows": rows}


def load_predictions(path: str) -> tuple[list[int], list[int], list[str]]:
    """Read a prediction CSV; returns (y_true, y_pred, sample_ids)."""
    y_true: list[int] = []
    y_pred: list[int] = []
    ids: list[str] = []
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(reader.fieldnames) != PREDICTION_COLUMNS:
                raise MetricsError(
                    f"prediction file must have columns {PREDICTION_COLUMNS}, "
                    f"got {reader.fieldnames}"
                )
            for line_no, row in enumerate(reader, start=2):
                try:
                    y_true.append(int(row["true_label"]))
                    y_pred.append(int(row["predicted_label"]))
                except (TypeError, ValueError) as exc:
                    raise MetricsError(f"line {line_no}: labels must be integers") from exc
                ids.append(row["sample_id"])
    except OSError as exc:
        raise MetricsError(f"cannot read predictions {path}: {exc}") from exc
    if not ids:
        raise MetricsError(f"prediction file {path} has no data rows")
    return y_true, y_pred, ids


def write_predictions(
    path: str, rows: Sequence[tuple[str, int, int]]
) -> None:
    """Write (sample_id, true_label, predicted_label) rows as prediction CSV."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PREDICTION_COLUMNS)
        for sample_id, true_label, predicted_label in rows:
            writer.writerow([sample_id, true_label, predicted_label])
