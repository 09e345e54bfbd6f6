"""Classification metrics: confusion matrix, accuracy, macro precision /
recall / F1, and percent-scale index-error statistics (MAE / MSE / RMSE).

Conventions, pinned so results are reproducible:
  - confusion rows are actual classes, columns are predicted classes;
  - per class c: TP = counts[c][c], FP = column sum - TP, FN = row sum - TP;
  - precision/recall/F1 are macro-averaged (unweighted mean over classes);
  - a class with a zero denominator scores 0 for that metric;
  - MAE/MSE/RMSE act on integer label indices and are scaled by 100, i.e.
    mae = 100 * mean|pred - actual|, mse = 100 * mean((pred - actual)^2),
    rmse = 100 * sqrt(mean((pred - actual)^2));
  - values stay unrounded in memory; 2-decimal half-away-from-zero rounding
    happens only when a report is serialized.

Note that distance between label indices is meaningful only as far as the
class ordering is; for more than two classes MAE/MSE/RMSE depend on that
arbitrary ordering and should be read accordingly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [K, K] int64, rows = actual, cols = predicted
    class_names: list[str]

    @property
    def k(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(predicted, actual, k: int, class_names: list[str] | None = None
                     ) -> ConfusionMatrix:
    predicted = np.asarray(predicted, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if predicted.shape != actual.shape or predicted.ndim != 1:
        raise DataError(
            f"label arrays must be equal-length vectors, got {predicted.shape} vs {actual.shape}"
        )
    for name, arr in (("predicted", predicted), ("actual", actual)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise DataError(f"{name} labels out of range [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (actual, predicted), 1)
    if class_names is None:
        class_names = [f"class_{i}" for i in range(k)]
    return ConfusionMatrix(counts, list(class_names))


def accuracy(cm: ConfusionMatrix) -> float:
    """100 * trace / total."""
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    return 100.0 * float(np.trace(cm.counts)) / cm.total


def precision_recall_f1(cm: ConfusionMatrix
                        ) -> tuple[float, float, float, list[tuple[float, float, float]]]:
    """Macro percents plus per-class (precision, recall, f1) percent triples."""
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    per_class = []
    for c in range(cm.k):
        tp = int(cm.counts[c, c])
        fp = int(cm.counts[:, c].sum()) - tp
        fn = int(cm.counts[c, :].sum()) - tp
        precision = tp / (tp + fp) if tp + fp > 0 else 0.0
        recall = tp / (tp + fn) if tp + fn > 0 else 0.0
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append((100.0 * precision, 100.0 * recall, 100.0 * f1))
    # Sequential Python sums keep macro values exactly reproducible by the
    # per-sample oracle in the tests.
    macro_p = sum(t[0] for t in per_class) / cm.k
    macro_r = sum(t[1] for t in per_class) / cm.k
    macro_f = sum(t[2] for t in per_class) / cm.k
    return macro_p, macro_r, macro_f, per_class


def index_error_metrics(predicted, actual) -> tuple[float, float, float]:
    """(mae, mse, rmse) on integer label indices, percent scale."""
    predicted = np.asarray(predicted, dtype=np.int64)
    actual = np.asarray(actual, dtype=np.int64)
    if predicted.shape != actual.shape or predicted.ndim != 1 or predicted.size == 0:
        raise DataError("index_error_metrics needs equal-length non-empty vectors")
    delta = predicted - actual
    n = delta.size
    abs_sum = int(np.sum(np.abs(delta)))
    sq_sum = int(np.sum(delta * delta))
    mae = 100.0 * abs_sum / n
    mse = 100.0 * sq_sum / n
    rmse = 100.0 * math.sqrt(sq_sum / n)
    return mae, mse, rmse


@dataclass
class MetricsReport:
    """One evaluation row: the seven headline percents plus backing data."""

    accuracy_pct: float
    precision_pct: float
    recall_pct: float
    f1_pct: float
    mae_pct: float
    mse_pct: float
    rmse_pct: float
    per_class: list[tuple[float, float, float]]
    confusion: ConfusionMatrix
    n: int
    prediction_seconds: float = 0.0


def build_report(predicted, actual, k: int, class_names: list[str] | None = None,
                 prediction_seconds: float = 0.0) -> MetricsReport:
    cm = confusion_matrix(predicted, actual, k, class_names)
    macro_p, macro_r, macro_f, per_class = precision_recall_f1(cm)
    mae, mse, rmse = index_error_metrics(predicted, actual)
    return MetricsReport(
        accuracy_pct=accuracy(cm),
        precision_pct=macro_p,
        recall_pct=macro_r,
        f1_pct=macro_f,
        mae_pct=mae,
        mse_pct=mse,
        rmse_pct=rmse,
        per_class=per_class,
        confusion=cm,
        n=cm.total,
        prediction_seconds=prediction_seconds,
    )


def round2(x: float) -> float:
    """Two decimals, ties away from zero (97.005 -> 97.01, -0.005 -> -0.01)."""
    return math.copysign(math.floor(abs(x) * 100.0 + 0.5) / 100.0, x)


def report_to_dict(r: MetricsReport) -> dict:
    return {
        "accuracy_pct": round2(r.accuracy_pct),
        "precision_pct": round2(r.precision_pct),
        "recall_pct": round2(r.recall_pct),
        "f1_pct": round2(r.f1_pct),
        "mae_pct": round2(r.mae_pct),
        "mse_pct": round2(r.mse_pct),
        "rmse_pct": round2(r.rmse_pct),
        "per_class": [
            {
                "class_name": r.confusion.class_names[i],
                "precision_pct": round2(p),
                "recall_pct": round2(rc),
                "f1_pct": round2(f),
            }
            for i, (p, rc, f) in enumerate(r.per_class)
        ],
        "confusion": r.confusion.counts.tolist(),
        "class_names": list(r.confusion.class_names),
        "n": r.n,
        "prediction_seconds": round2(r.prediction_seconds),
    }


def write_report(r: MetricsReport, path: str) -> None:
    """Serialize as JSON; rounding applies only here, and the byte output is
    stable under serialize -> parse -> serialize.
    """
    payload = json.dumps(report_to_dict(r), indent=2, sort_keys=True) + "\n"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(payload)


def write_confusion_csv(cm: ConfusionMatrix, path: str) -> None:
    """CSV with header `actual\\predicted,<class names>` and one row per actual class."""
    lines = ["actual\\predicted," + ",".join(cm.class_names)]
    for i, name in enumerate(cm.class_names):
        lines.append(name + "," + ",".join(str(int(v)) for v in cm.counts[i]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def read_confusion_csv(path: str) -> ConfusionMatrix:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln]
    header = lines[0].split(",")
    if header[0] != "actual\\predicted":
        raise DataError(f"bad confusion CSV header in {path}")
    names = header[1:]
    counts = np.zeros((len(names), len(names)), dtype=np.int64)
    for i, ln in enumerate(lines[1:]):
        cells = ln.split(",")
        counts[i] = [int(c) for c in cells[1:]]
    return ConfusionMatrix(counts, names)
