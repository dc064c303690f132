"""Probability-level model fusion: align prediction sets by sample id,
average, evaluate.

The mean is computed as p0 + (sum of (pi - p0)) / k in float64, summing
over sets in list order.  Anchoring on the first set makes fusing k
identical sets reproduce them bit for bit, which a plain sum/k does not
(e.g. (0.1+0.1+0.1)/3 != 0.1 in binary floating point).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, PredictionFormatError, ShapeError
from .metrics import EvalReport, evaluate

PREDICTIONS_HEADER = ("sample_id", "probability")


@dataclass
class PredictionSet:
    """One model's probabilities, ordered, keyed by unique sample ids."""

    model_id: str
    sample_ids: list[str]
    probabilities: np.ndarray  # float64, same length, all in [0,1]

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64).ravel()
        if len(self.sample_ids) != self.probabilities.size:
            raise ShapeError(
                f"{len(self.sample_ids)} ids vs {self.probabilities.size} probabilities"
            )
        seen = set()
        for sid in self.sample_ids:
            if sid in seen:
                raise PredictionFormatError(f"duplicate sample id {sid!r}")
            seen.add(sid)
        bad = np.nonzero(
            ~np.isfinite(self.probabilities)
            | (self.probabilities < 0.0)
            | (self.probabilities > 1.0)
        )[0]
        if bad.size:
            i = int(bad[0])
            raise PredictionFormatError(
                f"probability for {self.sample_ids[i]!r} is {self.probabilities[i]!r}, "
                "expected a value in [0,1]"
            )


def fuse(sets: list[PredictionSet]) -> PredictionSet:
    """Arithmetic mean per sample across >= 2 aligned prediction sets.

    Output rows follow the first set's order; output model id is
    "ensemble".  Sets whose id collections differ raise AlignmentError
    naming the offending ids.
    """
    if len(sets) < 2:
        raise AlignmentError(f"fusion needs at least 2 prediction sets, got {len(sets)}")
    first = sets[0]
    base_ids = set(first.sample_ids)
    for other in sets[1:]:
        other_ids = set(other.sample_ids)
        if other_ids != base_ids:
            missing = sorted(base_ids - other_ids)
            extra = sorted(other_ids - base_ids)
            parts = []
            if missing:
                parts.append(f"missing from {other.model_id!r}: {', '.join(missing)}")
            if extra:
                parts.append(f"unknown in {other.model_id!r}: {', '.join(extra)}")
            raise AlignmentError("sample ids disagree; " + "; ".join(parts))

    anchor = first.probabilities
    delta_sum = np.zeros_like(anchor)
    for other in sets[1:]:
        index = {sid: i for i, sid in enumerate(other.sample_ids)}
        aligned = other.probabilities[[index[sid] for sid in first.sample_ids]]
        delta_sum += aligned - anchor
    mean = anchor + delta_sum / float(len(sets))
    np.clip(mean, 0.0, 1.0, out=mean)
    return PredictionSet("ensemble", list(first.sample_ids), mean)


def fuse_and_evaluate(
    sets: list[PredictionSet], labels_by_id: dict[str, int], threshold: float | None = None
) -> tuple[PredictionSet, EvalReport]:
    """Fuse, then evaluate the fused probabilities against labeled ids."""
    fused = fuse(sets)
    missing = [sid for sid in fused.sample_ids if sid not in labels_by_id]
    if missing:
        raise AlignmentError(f"no label for sample ids: {', '.join(sorted(missing))}")
    labels = [labels_by_id[sid] for sid in fused.sample_ids]
    return fused, evaluate(fused.probabilities, labels, threshold=threshold)


def read_predictions_csv(path, model_id: str | None = None) -> PredictionSet:
    """Parse a `sample_id,probability` CSV; errors carry the line number."""
    ids: list[str] = []
    probs: list[float] = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if lineno == 1:
                if tuple(row) != PREDICTIONS_HEADER:
                    raise PredictionFormatError(
                        f"{path}: line 1: expected header "
                        f"{','.join(PREDICTIONS_HEADER)!r}, got {','.join(row)!r}"
                    )
                continue
            if not row:
                continue
            if len(row) != 2:
                raise PredictionFormatError(
                    f"{path}: line {lineno}: expected 2 fields, got {len(row)}"
                )
            try:
                p = float(row[1])
            except ValueError:
                raise PredictionFormatError(
                    f"{path}: line {lineno}: probability {row[1]!r} is not a number"
                ) from None
            ids.append(row[0])
            probs.append(p)
    try:
        return PredictionSet(model_id or str(path), ids, np.array(probs, dtype=np.float64))
    except PredictionFormatError as exc:
        raise PredictionFormatError(f"{path}: {exc}") from None


def write_predictions_csv(path, predictions: PredictionSet) -> None:
    """Round-trippable floats (repr), one row per sample, stable order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_HEADER)
        for sid, p in zip(predictions.sample_ids, predictions.probabilities):
            writer.writerow([sid, repr(float(p))])
