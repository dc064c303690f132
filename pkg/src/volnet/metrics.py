"""Classification metrics: ROC, AUC, Youden threshold selection, F1.

The ROC curve keeps raw integer true/false-positive counts per distinct
score.  AUC is then a single integer trapezoid sum divided once at the
end, which makes it agree with the rank-statistic (Mann-Whitney)
formulation to the last bit instead of merely approximately.

The prediction rule everywhere is: positive when score >= threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLabelsError, NumericError, ShapeError


def _validated(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).ravel()
    if s.shape != l.shape:
        raise ShapeError(f"{s.size} scores vs {l.size} labels")
    if not np.all(np.isfinite(s)):
        bad = int(np.nonzero(~np.isfinite(s))[0][0])
        raise NumericError(f"score at index {bad} is not finite: {s[bad]}")
    lf = l.astype(np.float64)
    if not np.all((lf == 0.0) | (lf == 1.0)):
        bad = int(np.nonzero((lf != 0.0) & (lf != 1.0))[0][0])
        raise ValueError(f"label at index {bad} is {l[bad]!r}, expected 0 or 1")
    li = lf.astype(np.int64)
    n_pos = int(li.sum())
    n_neg = int(li.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError(
            f"need both classes, got {n_pos} positive and {n_neg} negative"
        )
    return s, li, n_pos, n_neg


@dataclass
class RocCurve:
    """Tie-collapsed ROC points, highest threshold first.

    Index 0 is the +inf sentinel where nothing is predicted positive.
    tp[i], fp[i] count predictions at thresholds[i]; rates are these
    counts over the class totals.
    """

    thresholds: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    n_pos: int
    n_neg: int

    @property
    def tpr(self) -> np.ndarray:
        return self.tp / float(self.n_pos)

    @property
    def fpr(self) -> np.ndarray:
        return self.fp / float(self.n_neg)


def roc_curve(scores, labels) -> RocCurve:
    s, li, n_pos, n_neg = _validated(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    l_sorted = li[order]
    tp_cum = np.cumsum(l_sorted == 1, dtype=np.int64)
    fp_cum = np.cumsum(l_sorted == 0, dtype=np.int64)
    # last index of every run of equal scores
    last = np.append(np.nonzero(np.diff(s_sorted) != 0)[0], s_sorted.size - 1)
    thresholds = np.concatenate(([np.inf], s_sorted[last]))
    tp = np.concatenate(([0], tp_cum[last]))
    fp = np.concatenate(([0], fp_cum[last]))
    return RocCurve(thresholds, tp, fp, n_pos, n_neg)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area as one exact integer sum over count deltas."""
    dfp = np.diff(curve.fp)
    heights = curve.tp[:-1] + curve.tp[1:]
    total = int(np.sum(dfp * heights, dtype=np.int64))
    return total / float(2 * curve.n_pos * curve.n_neg)


@dataclass
class YoudenResult:
    threshold: float
    j: float
    tpr: float
    fpr: float


def youden_threshold(curve: RocCurve) -> YoudenResult:
    """Threshold maximizing J = tpr - fpr over realized thresholds.

    The +inf sentinel is excluded.  Ties on J break toward the higher
    tpr, then toward the lower threshold.
    """
    best_key = None
    best = None
    for i in range(1, curve.thresholds.size):
        tpr = float(curve.tp[i] / curve.n_pos)
        fpr = float(curve.fp[i] / curve.n_neg)
        t = float(curve.thresholds[i])
        key = (tpr - fpr, tpr, -t)
        if best_key is None or key > best_key:
            best_key = key
            best = YoudenResult(t, tpr - fpr, tpr, fpr)
    if best is None:
        raise DegenerateLabelsError("curve has no realized thresholds")
    return best


def _binary(values, what):
    v = np.asarray(values).astype(np.float64).ravel()
    if not np.all((v == 0.0) | (v == 1.0)):
        bad = int(np.nonzero((v != 0.0) & (v != 1.0))[0][0])
        raise ValueError(f"{what} at index {bad} is {values[bad]!r}, expected 0 or 1")
    return v.astype(np.int64)


def predictions_at_threshold(scores, threshold: float) -> np.ndarray:
    """0/1 predictions under the score >= threshold rule."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    return (s >= threshold).astype(np.int64)


def confusion(predicted, labels):
    """(tp, fp, tn, fn) from 0/1 predictions against 0/1 labels."""
    p = _binary(predicted, "prediction")
    l = _binary(labels, "label")
    if p.shape != l.shape:
        raise ShapeError(f"{p.size} predictions vs {l.size} labels")
    tp = int(np.sum((p == 1) & (l == 1)))
    fp = int(np.sum((p == 1) & (l == 0)))
    tn = int(np.sum((p == 0) & (l == 0)))
    fn = int(np.sum((p == 0) & (l == 1)))
    return tp, fp, tn, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    """2*tp / (2*tp + fp + fn); the empty case (all three zero) is 1.0."""
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 1.0
    return 2 * tp / denom


def f1_score(predicted, labels) -> float:
    tp, fp, _, fn = confusion(predicted, labels)
    return f1_from_counts(tp, fp, fn)


@dataclass
class EvalReport:
    """Everything the eval path reports, in key=value text form."""

    n: int
    n_pos: int
    n_neg: int
    auc: float
    threshold: float
    threshold_source: str
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    precision: float
    recall: float
    f1: float
    accuracy: float
    notes: list[str] = field(default_factory=list)
    scores: np.ndarray | None = None  # per-sample, not part of the text block

    def as_text(self) -> str:
        lines = [
            f"n={self.n}",
            f"n_pos={self.n_pos}",
            f"n_neg={self.n_neg}",
            f"auc={self.auc!r}",
            f"threshold={self.threshold!r}",
            f"threshold_source={self.threshold_source}",
            f"tp={self.tp}",
            f"fp={self.fp}",
            f"tn={self.tn}",
            f"fn={self.fn}",
            f"tpr={self.tpr!r}",
            f"fpr={self.fpr!r}",
            f"precision={self.precision!r}",
            f"recall={self.recall!r}",
            f"f1={self.f1!r}",
            f"accuracy={self.accuracy!r}",
        ]
        lines.extend(f"note={n}" for n in self.notes)
        return "\n".join(lines) + "\n"


def evaluate(scores, labels, threshold: float | None = None) -> EvalReport:
    """Full evaluation; picks the Youden threshold when none is given.

    Precision with an empty positive-prediction set is 0.0 unless there
    are also no actual positives missed (then 1.0, matching the F1
    degenerate case).
    """
    s, li, n_pos, n_neg = _validated(scores, labels)
    curve = roc_curve(s, li)
    area = auc(curve)
    if threshold is None:
        picked = youden_threshold(curve)
        t, source = picked.threshold, "youden"
    else:
        t, source = float(threshold), "given"
    tp, fp, tn, fn = confusion(predictions_at_threshold(s, t), li)
    tpr = tp / n_pos
    fpr = fp / n_neg
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 1.0
    return EvalReport(
        n=int(li.size),
        n_pos=n_pos,
        n_neg=n_neg,
        auc=area,
        threshold=t,
        threshold_source=source,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        tpr=tpr,
        fpr=fpr,
        precision=precision,
        recall=recall,
        f1=f1_from_counts(tp, fp, fn),
        accuracy=(tp + tn) / li.size,
        scores=s,
    )


def write_roc_csv(path, curve: RocCurve) -> None:
    """threshold,fpr,tpr rows, sentinel first, round-trippable floats."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, fpr, tpr in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(fpr)), repr(float(tpr))])
