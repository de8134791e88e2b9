"""Confusion matrices and macro-averaged precision/recall."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Sequence

import numpy as np

from .classifier import UNKNOWN


@dataclass(frozen=True)
class ConfusionMatrix:
    labels: tuple[str, ...]
    counts: np.ndarray  # rows = true label, columns = predicted label

    def index(self, label: str) -> int:
        return self.labels.index(label)

    @property
    def normalized(self) -> np.ndarray:
        """Row-normalized view; rows of absent true classes stay zero."""
        rows = self.counts.sum(axis=1, keepdims=True).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(rows > 0, self.counts / np.where(rows > 0, rows, 1), 0.0)
        return out

    def recall(self, label: str) -> float:
        i = self.index(label)
        row = self.counts[i].sum()
        return float(self.counts[i, i] / row) if row else 0.0

    def precision(self, label: str) -> float:
        i = self.index(label)
        col = self.counts[:, i].sum()
        return float(self.counts[i, i] / col) if col else 0.0

    def write_csv(self, path: str | Path, normalized: bool = False) -> None:
        data = self.normalized if normalized else self.counts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred", *self.labels])
            for lab, row in zip(self.labels, data):
                w.writerow([lab, *(f"{v:.6f}" if normalized else int(v) for v in row)])


def confusion(
    true_labels: Sequence[str],
    predicted_labels: Sequence[str],
    known: Collection[str] | None = None,
) -> ConfusionMatrix:
    """Tally (true, predicted) pairs.

    With ``known`` given (open-set), every true label outside it is folded
    into a single UNKNOWN class.
    """
    if len(true_labels) != len(predicted_labels):
        raise ValueError(f"length mismatch: {len(true_labels)} true vs {len(predicted_labels)} predicted")
    if known is not None:
        known = set(known)
        true_labels = [t if t in known else UNKNOWN for t in true_labels]
    names = set(true_labels) | set(predicted_labels)
    labels = sorted(names - {UNKNOWN})
    if UNKNOWN in names:
        labels.append(UNKNOWN)
    pos = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        counts[pos[t], pos[p]] += 1
    return ConfusionMatrix(tuple(labels), counts)


def macro_precision_recall(cm: ConfusionMatrix) -> tuple[float, float]:
    """Unweighted mean over classes that occur as true labels.

    A class never predicted contributes precision 0.
    """
    present = [lab for i, lab in enumerate(cm.labels) if cm.counts[i].sum() > 0]
    if not present:
        return 0.0, 0.0
    precision = float(np.mean([cm.precision(lab) for lab in present]))
    recall = float(np.mean([cm.recall(lab) for lab in present]))
    return precision, recall
