"""Clip-level tagging metrics and weighted-majority late fusion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import AllZeroScores, AllZeroWeights, EmptyResults, NoReferenceLabel, ShapeMismatch


@dataclass(frozen=True)
class TagResult:
    clip_id: str
    predicted: np.ndarray
    reference: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.reference)
        if len(self.predicted) != n or (self.scores is not None and len(self.scores) != n):
            raise ShapeMismatch(f"clip {self.clip_id!r}: predicted/reference/scores lengths differ")


def threshold_decisions(scores, threshold=0.5) -> np.ndarray:
    """Binary decisions with the ``score >= threshold`` convention."""
    return (np.asarray(scores) >= np.asarray(threshold)).astype(np.int8)


def _stack(results: Sequence[TagResult]):
    if not results:
        raise EmptyResults("no results to score")
    pred = np.array([r.predicted for r in results], dtype=bool)
    ref = np.array([r.reference for r in results], dtype=bool)
    return pred, ref


def _prf(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return {"precision": float(p), "recall": float(r), "f1": float(f)}


def micro_prf_arrays(pred, ref) -> dict:
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != reference shape {ref.shape}")
    if pred.size == 0:
        raise EmptyResults("no results to score")
    tp = int(np.sum(pred & ref))
    fp = int(np.sum(pred & ~ref))
    fn = int(np.sum(~pred & ref))
    return _prf(tp, fp, fn)


def micro_prf(results: Sequence[TagResult]) -> dict:
    """Precision, recall and F1 pooled over every (clip, class) decision."""
    pred, ref = _stack(results)
    return micro_prf_arrays(pred, ref)


def metrics_report(results: Sequence[TagResult], class_list: Sequence[str]) -> dict:
    pred, ref = _stack(results)
    report = micro_prf_arrays(pred, ref)
    per_class = {}
    for n, name in enumerate(class_list):
        p, r = pred[:, n], ref[:, n]
        per_class[name] = _prf(int(np.sum(p & r)), int(np.sum(p & ~r)), int(np.sum(~p & r)))
        per_class[name]["support"] = int(r.sum())
    report["per_class"] = per_class
    report["n_clips"] = len(results)
    return report


def confusion_matrix(results: Sequence[TagResult], n_classes: int | None = None) -> np.ndarray:
    """Rows are the first reference class of each clip, columns its top-scoring class."""
    if not results:
        raise EmptyResults("no results to score")
    n_classes = n_classes or len(results[0].reference)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for r in results:
        positives = np.flatnonzero(np.asarray(r.reference))
        if positives.size == 0:
            raise NoReferenceLabel(f"clip {r.clip_id!r} has no reference label")
        scores = r.scores if r.scores is not None else r.predicted
        cm[positives[0], int(np.argmax(scores))] += 1
    return cm


def confusion_csv(cm: np.ndarray, class_list: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["reference\\predicted", *class_list])
    for name, row in zip(class_list, cm):
        w.writerow([name, *(int(v) for v in row)])
    return buf.getvalue()


# float rounding of ~1e-16 per operation sits far below this
TIE_RTOL = Fraction(1, 2**40)


def _exact_weights(weights) -> list[Fraction]:
    weights = [float(w) for w in weights]
    if any(not np.isfinite(w) or w < 0 for w in weights):
        raise AllZeroWeights(f"weights must be finite and non-negative, got {weights}")
    if not any(weights):
        raise AllZeroWeights("all fusion weights are zero")
    return [Fraction(w) for w in weights]


def fuse(decisions: Sequence[np.ndarray], weights) -> np.ndarray:
    """Weighted majority vote over per-model binary decision matrices.

    A cell is positive when the weight voting for it is at least half the
    total. Sums are exact rationals of the given floats; a vote within
    ``TIE_RTOL`` of half the total counts as a tie (positive), so weights that
    tie in decimal, or that were rescaled in floating point, still tie.
    """
    if len(decisions) == 0:
        raise ShapeMismatch("no member decisions to fuse")
    mats = [np.asarray(d) for d in decisions]
    if mats[0].ndim != 2 or any(m.shape != mats[0].shape for m in mats):
        raise ShapeMismatch(f"member decision matrices differ in shape: {[m.shape for m in mats]}")
    stack = np.stack(mats)
    if len(weights) != stack.shape[0]:
        raise ShapeMismatch(f"{stack.shape[0]} members but {len(weights)} weights")
    exact = _exact_weights(weights)
    # common power-of-two denominator turns every weight into an integer
    denom = max(w.denominator for w in exact)
    ints = np.array([w.numerator * (denom // w.denominator) for w in exact], dtype=object)
    votes = np.tensordot(ints, (stack != 0).astype(object), axes=1)
    bar = sum(ints) * (1 - TIE_RTOL)
    return np.vectorize(lambda v: 2 * v >= bar, otypes=[bool])(votes).astype(np.int8)


def validation_weights(val_scores) -> np.ndarray:
    s = np.asarray(val_scores, dtype=np.float64)
    if s.size == 0 or np.any(s < 0) or not np.all(np.isfinite(s)):
        raise AllZeroScores(f"validation scores must be finite and non-negative, got {list(s)}")
    total = s.sum()
    if total <= 0:
        raise AllZeroScores("all validation scores are zero")
    return s / total
