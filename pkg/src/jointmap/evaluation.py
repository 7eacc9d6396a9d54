"""Micro- and macro-averaged F1 for the intent and category tasks,
minority-class reporting, a comparison table writer, and a paired
bootstrap for method deltas.

Counting is per (record, class) membership, so single-label tasks are
handled by wrapping each label in a one-element set. Per-class F1 uses the
0/0 -> 0 convention.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

METRIC_COLUMNS = (
    "intent_macro_f1",
    "intent_micro_f1",
    "category_macro_f1",
    "category_micro_f1",
)


def _as_set(value):
    if isinstance(value, (set, frozenset, list, tuple)):
        return frozenset(value)
    return frozenset((value,))


@dataclass
class PerClassCounts:
    classes: tuple
    tp: dict
    fp: dict
    fn: dict

    def total(self, kind: str) -> int:
        return sum(getattr(self, kind).values())


def count_predictions(predicted, gold, classes) -> PerClassCounts:
    """Tally TP/FP/FN per class over aligned prediction and gold lists.

    Elements may be label sets (multi-label) or bare labels; classes
    outside the given class set are ignored.
    """
    predicted = list(predicted)
    gold = list(gold)
    if len(predicted) != len(gold):
        raise DataError(
            f"prediction/gold length mismatch: {len(predicted)} vs {len(gold)}"
        )
    classes = tuple(classes)
    class_set = set(classes)
    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for pred, true in zip(predicted, gold):
        pred = _as_set(pred) & class_set
        true = _as_set(true) & class_set
        for c in pred & true:
            tp[c] += 1
        for c in pred - true:
            fp[c] += 1
        for c in true - pred:
            fn[c] += 1
    return PerClassCounts(classes, tp, fp, fn)


def _f1(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def per_class_f1(counts: PerClassCounts) -> dict:
    return {c: _f1(counts.tp[c], counts.fp[c], counts.fn[c]) for c in counts.classes}


def f1_macro(counts: PerClassCounts) -> float:
    """Unweighted mean of per-class F1."""
    scores = per_class_f1(counts)
    return float(np.mean(list(scores.values()))) if scores else 0.0


def f1_micro(counts: PerClassCounts) -> float:
    """F1 from globally pooled TP/FP/FN."""
    return _f1(counts.total("tp"), counts.total("fp"), counts.total("fn"))


def minority_report(counts: PerClassCounts, minority_classes) -> float:
    """Macro F1 restricted to the given class list."""
    minority_classes = list(minority_classes)
    scores = per_class_f1(counts)
    for c in minority_classes:
        if c not in scores:
            raise DataError(f"unknown class {c!r} in minority list")
    return float(np.mean([scores[c] for c in minority_classes]))


def lowest_support_classes(category_sets, classes, k: int) -> list:
    """The k classes with the fewest memberships, ties by class order."""
    support = {c: 0 for c in classes}
    for s in category_sets:
        for c in _as_set(s):
            if c in support:
                support[c] += 1
    ranked = sorted(classes, key=lambda c: (support[c], classes.index(c)))
    return ranked[:k]


@dataclass
class MethodMetrics:
    method: str
    intent_macro_f1: float
    intent_micro_f1: float
    category_macro_f1: float
    category_micro_f1: float


def write_metrics_table(path, rows) -> None:
    """TSV with one row per method and the four F1 metric columns."""
    lines = ["method\t" + "\t".join(METRIC_COLUMNS)]
    for row in rows:
        values = [getattr(row, col) for col in METRIC_COLUMNS]
        lines.append(row.method + "\t" + "\t".join(f"{v:.6f}" for v in values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


@dataclass
class BootstrapResult:
    delta_mean: float
    ci_low: float
    ci_high: float
    prob_a_better: float


def paired_bootstrap(gold, preds_a, preds_b, classes, n_resamples: int = 1000,
                     seed: int = 0, statistic=f1_macro) -> BootstrapResult:
    """Bootstrap the statistic delta (method A minus B) over shared records."""
    gold = list(gold)
    preds_a = list(preds_a)
    preds_b = list(preds_b)
    if not (len(gold) == len(preds_a) == len(preds_b)):
        raise DataError("paired bootstrap needs aligned prediction lists")
    rng = np.random.default_rng(seed)
    n = len(gold)
    deltas = np.zeros(n_resamples)
    for i in range(n_resamples):
        idx = rng.integers(0, n, size=n)
        g = [gold[j] for j in idx]
        a = statistic(count_predictions([preds_a[j] for j in idx], g, classes))
        b = statistic(count_predictions([preds_b[j] for j in idx], g, classes))
        deltas[i] = a - b
    return BootstrapResult(
        delta_mean=float(deltas.mean()),
        ci_low=float(np.quantile(deltas, 0.025)),
        ci_high=float(np.quantile(deltas, 0.975)),
        prob_a_better=float(np.mean(deltas > 0)),
    )
