"""Binary-classification evaluation: confusion counts, rates, kappa, AUC.

Label 1 is the positive class throughout. Rates with an empty denominator
are reported as None, never coerced to 0 or 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

import numpy as np

FloatArray = np.ndarray

THRESHOLD = 0.5

# column order of the percentage report tables
TABLE_COLUMNS = ("accuracy", "sensitivity", "specificity", "kappa", "auc")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative count, got {v!r}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _validated(scores, labels) -> tuple[FloatArray, FloatArray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot evaluate an empty score set")
    if s.size != y.size:
        raise ValueError(f"got {s.size} scores but {y.size} labels")
    if not np.isfinite(s).all() or s.min() < 0.0 or s.max() > 1.0:
        raise ValueError("scores must lie in [0, 1]")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    return s, y


def confusion(scores, labels, threshold: float = THRESHOLD) -> ConfusionMatrix:
    """Counts at the given threshold; score >= threshold predicts positive."""
    s, y = _validated(scores, labels)
    pred = s >= threshold
    pos = y == 1.0
    return ConfusionMatrix(tp=int(np.sum(pred & pos)),
                           tn=int(np.sum(~pred & ~pos)),
                           fp=int(np.sum(pred & ~pos)),
                           fn=int(np.sum(~pred & pos)))


def basic_rates(cm: ConfusionMatrix) -> tuple[float | None, float | None,
                                              float | None]:
    """(accuracy, sensitivity, specificity); None where the denominator is 0."""
    accuracy = (cm.tp + cm.tn) / cm.total if cm.total else None
    sensitivity = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else None
    specificity = cm.tn / (cm.tn + cm.fp) if cm.tn + cm.fp else None
    return accuracy, sensitivity, specificity


def kappa(cm: ConfusionMatrix) -> float | None:
    """Chance-corrected agreement (P_o - P_e) / (1 - P_e); None if P_e = 1."""
    n = cm.total
    if n == 0:
        raise ValueError("kappa needs at least one sample")
    p_observed = (cm.tp + cm.tn) / n
    p_expected = ((cm.tp + cm.fp) * (cm.tp + cm.fn)
                  + (cm.tn + cm.fn) * (cm.tn + cm.fp)) / (n * n)
    if p_expected == 1.0:
        return None
    return (p_observed - p_expected) / (1.0 - p_expected)


def _midranks(values: FloatArray) -> FloatArray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sv = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties as 1/2."""
    s, y = _validated(scores, labels)
    n_pos = int(np.sum(y == 1.0))
    n_neg = s.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _midranks(s)
    pos_rank_sum = float(np.sum(ranks[y == 1.0]))
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    kappa: float | None
    auc: float | None
    threshold: float
    samples: int

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "kappa": self.kappa,
            "auc": self.auc,
            "threshold": self.threshold,
            "samples": self.samples,
        }, sort_keys=True, separators=(",", ":"))

    def table_row(self) -> tuple[str, ...]:
        """Percentage cells in report-table column order, 1 decimal."""
        def cell(v: float | None) -> str:
            return "n/a" if v is None else f"{100.0 * v:.1f}"
        return tuple(cell(getattr(self, name)) for name in TABLE_COLUMNS)


def report_from_scores(scores, labels,
                       threshold: float = THRESHOLD) -> MetricsReport:
    s, y = _validated(scores, labels)
    cm = confusion(s, y, threshold)
    accuracy, sensitivity, specificity = basic_rates(cm)
    both_classes = 0 < np.sum(y == 1.0) < y.size
    return MetricsReport(accuracy=accuracy,
                         sensitivity=sensitivity,
                         specificity=specificity,
                         kappa=kappa(cm),
                         auc=auc(s, y) if both_classes else None,
                         threshold=threshold,
                         samples=int(s.size))


def _batch_labels(batch) -> FloatArray:
    if isinstance(batch, Mapping):
        batch = next(iter(batch.values()))
    return batch.labels


def evaluate(score_fn: Callable, batches: Iterable,
             threshold: float = THRESHOLD) -> MetricsReport:
    """One pass over an (unaugmented) stream, then all five metrics.

    ``score_fn`` maps one stream item, a single batch or an aligned
    per-resolution group, to a 1-D array of scores in [0, 1].
    """
    all_scores: list[FloatArray] = []
    all_labels: list[FloatArray] = []
    for batch in batches:
        scores = np.asarray(score_fn(batch), dtype=np.float64).reshape(-1)
        labels = np.asarray(_batch_labels(batch), dtype=np.float64).reshape(-1)
        if scores.size != labels.size:
            raise ValueError(f"score_fn returned {scores.size} scores for a "
                             f"batch of {labels.size} samples")
        all_scores.append(scores)
        all_labels.append(labels)
    if not all_scores:
        raise ValueError("cannot evaluate an empty stream")
    return report_from_scores(np.concatenate(all_scores),
                              np.concatenate(all_labels), threshold)
