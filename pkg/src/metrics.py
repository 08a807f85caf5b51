"""
Metrics module for jamident.
Handles accuracy, confusion matrices and the evaluation report tables.
"""

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .siggen import JammingType

CLASS_NAMES = [t.name for t in JammingType]


def calculate_accuracy(predictions, labels):
    """
    Fraction of correct predictions.

    Args:
        predictions: predicted class indices
        labels: true class indices

    Returns:
        Accuracy in [0, 1], or None for an empty set
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size == 0:
        return None
    return float(np.mean(predictions == labels))


def confusion_matrix(predictions, labels, num_classes=8):
    """Counts with true class on rows and predicted class on columns."""
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return matrix


def grouped_accuracy(predictions, labels, keys, key_name):
    """
    Accuracy per distinct value of ``keys``.

    ``key_name`` may also be a list of names, with ``keys`` the matching
    list of arrays; rows are then the distinct key combinations.

    Returns:
        DataFrame with the key column(s), accuracy and count, sorted by key
    """
    if isinstance(key_name, str):
        key_name, keys = [key_name], [keys]
    frame = pd.DataFrame({name: np.asarray(column) for name, column in zip(key_name, keys)})
    frame["correct"] = np.asarray(predictions) == np.asarray(labels)
    grouped = frame.groupby(list(key_name), sort=True)["correct"].agg(["mean", "size"]).reset_index()
    return grouped.rename(columns={"mean": "accuracy", "size": "count"})


def isnr_trend(per_isnr):
    """Spearman correlation between ISNR and accuracy (NaN with fewer than two points)."""
    if len(per_isnr) < 2:
        return float("nan")
    rho, _ = stats.spearmanr(per_isnr["isnr_db"], per_isnr["accuracy"])
    return float(rho)


@dataclass
class EvalReport:
    """Clean accuracy overall, per ISNR, per class and per (class, ISNR), plus the confusion matrix."""
    accuracy: float
    count: int
    per_isnr: pd.DataFrame
    per_class: pd.DataFrame
    confusion: np.ndarray
    per_class_isnr: pd.DataFrame = None

    @classmethod
    def build(cls, predictions, labels, isnr_db, num_classes=8):
        labels = np.asarray(labels, dtype=np.int64)
        isnr_db = np.asarray(isnr_db, dtype=np.float64)
        per_class = grouped_accuracy(predictions, labels, labels, "class")
        per_class.insert(1, "name", [_class_name(c) for c in per_class["class"]])
        per_class_isnr = grouped_accuracy(predictions, labels, [labels, isnr_db], ["class", "isnr_db"])
        per_class_isnr.insert(1, "name", [_class_name(c) for c in per_class_isnr["class"]])
        return cls(calculate_accuracy(predictions, labels), int(labels.size),
                   grouped_accuracy(predictions, labels, isnr_db, "isnr_db"),
                   per_class, confusion_matrix(predictions, labels, num_classes), per_class_isnr)

    def to_frame(self):
        """Long table with columns scope, key, accuracy, count."""
        rows = [("overall", "all", self.accuracy, self.count)]
        rows += [("isnr", f"{r.isnr_db:g}", r.accuracy, r.count) for r in self.per_isnr.itertuples()]
        rows += [("class", r.name, r.accuracy, r.count) for r in self.per_class.itertuples()]
        return pd.DataFrame(rows, columns=["scope", "key", "accuracy", "count"])

    def confusion_frame(self):
        names = [_class_name(i) for i in range(self.confusion.shape[0])]
        return pd.DataFrame(self.confusion, index=pd.Index(names, name="true"), columns=names)


@dataclass
class AttackReport:
    """Adversarial accuracy per budget, per (budget, ISNR) and per (budget, class)."""
    summary: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=["epsilon", "accuracy", "count"]))
    per_isnr: pd.DataFrame = None
    per_class: pd.DataFrame = None

    @classmethod
    def build(cls, results, labels, isnr_db):
        """
        Args:
            results: list of (epsilon, predictions) in budget order
            labels: true classes
            isnr_db: ISNR of every sample
        """
        labels = np.asarray(labels, dtype=np.int64)
        summary, isnr_rows, class_rows = [], [], []
        for epsilon, predictions in results:
            summary.append((epsilon, calculate_accuracy(predictions, labels), int(labels.size)))
            by_isnr = grouped_accuracy(predictions, labels, np.asarray(isnr_db, dtype=np.float64), "isnr_db")
            by_isnr.insert(0, "epsilon", epsilon)
            isnr_rows.append(by_isnr)
            by_class = grouped_accuracy(predictions, labels, labels, "class")
            by_class.insert(0, "epsilon", epsilon)
            class_rows.append(by_class)
        return cls(pd.DataFrame(summary, columns=["epsilon", "accuracy", "count"]),
                   pd.concat(isnr_rows, ignore_index=True) if isnr_rows else None,
                   pd.concat(class_rows, ignore_index=True) if class_rows else None)


def _class_name(index):
    return CLASS_NAMES[index] if 0 <= index < len(CLASS_NAMES) else str(index)


class AccuracyFormatter:
    """Formats accuracies for display."""

    @staticmethod
    def format_accuracy(accuracy):
        """
        Format an accuracy as a percentage.

        Args:
            accuracy: value in [0, 1] or None

        Returns:
            Formatted string, "-" when undefined
        """
        if accuracy is None or np.isnan(accuracy):
            return "-"
        return f"{accuracy * 100:.2f}%"

    @staticmethod
    def format_epsilon(epsilon):
        """Budget as pixel levels, e.g. '8/255'."""
        return f"{epsilon * 255:g}/255"

    @staticmethod
    def accuracy_style(accuracy):
        """Color used for an accuracy cell."""
        if accuracy is None or np.isnan(accuracy):
            return "dim"
        if accuracy >= 0.85:
            return "green"
        return "yellow" if accuracy >= 0.5 else "red"
