"""Exact verification-metrics engine: threshold sweep, EER, TPR@FPR, accuracy.

All metrics are rank statistics over a labeled score set (1 = genuine,
0 = impostor). The sweep enumerates every distinct observed score as a
threshold, descending, preceded by a +inf sentinel (reject everything); the
lowest observed score already plays the -inf role (accept everything). A pair
is accepted iff score >= threshold, so genuine pairs win ties.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


@dataclass
class ScoreSet:
    """Labeled verification scores; label 1 = genuine, 0 = impostor."""

    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.labels.shape != self.scores.shape or self.labels.ndim != 1:
            raise ValueError("labels and scores must be equal-length 1-d sequences")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 or 1")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")

    @classmethod
    def from_records(cls, records) -> "ScoreSet":
        labels, scores = zip(*records) if records else ((), ())
        return cls(np.asarray(labels), np.asarray(scores))

    @property
    def n_genuine(self) -> int:
        return int(np.sum(self.labels == 1))

    @property
    def n_impostor(self) -> int:
        return int(np.sum(self.labels == 0))


class RocPoint(NamedTuple):
    threshold: float
    tpr: float
    fpr: float
    tp: int  # integer counts keep downstream rate arithmetic exact
    fp: int


def roc_sweep(scores: ScoreSet) -> list[RocPoint]:
    """Exact (threshold, TPR, FPR) at every distinct score, descending.

    FPR is non-decreasing along the returned list; the leading +inf sentinel
    is the all-reject operating point.
    """
    pos, neg = scores.n_genuine, scores.n_impostor
    if pos == 0 or neg == 0:
        raise ValueError("score set needs at least one genuine and one impostor record")

    order = np.argsort(-scores.scores, kind="stable")
    sorted_scores = scores.scores[order]
    sorted_labels = scores.labels[order]
    cum_tp = np.cumsum(sorted_labels == 1)
    cum_fp = np.cumsum(sorted_labels == 0)
    # last index of each run of equal scores: counts there include the full tie group
    last_in_run = np.nonzero(np.append(np.diff(sorted_scores) != 0, True))[0]

    points = [RocPoint(math.inf, 0.0, 0.0, 0, 0)]
    for k in last_in_run:
        tp, fp = int(cum_tp[k]), int(cum_fp[k])
        points.append(
            RocPoint(float(sorted_scores[k]), tp / pos, fp / neg, tp, fp)
        )
    return points


def _totals(roc: list[RocPoint]) -> tuple[int, int]:
    # the lowest threshold accepts every record
    return roc[-1].tp, roc[-1].fp


def eer(roc: list[RocPoint]) -> tuple[float, float]:
    """Equal error rate: where FNR meets FPR, linearly interpolated.

    FNR - FPR is non-increasing along the sweep (from +1 at the sentinel to
    -1 at the all-accept point), so a bracketing pair always exists; an exact
    crossing point is returned as-is. Rates come from integer counts, so an
    exact rational crossing really compares equal.
    """
    pos, neg = _totals(roc)
    fnrs = [(pos - p.tp) / pos for p in roc]
    diffs = [fnr - p.fpr for fnr, p in zip(fnrs, roc)]
    k = next(i for i, d in enumerate(diffs) if d <= 0.0)
    if diffs[k] == 0.0:
        return (fnrs[k], roc[k].threshold)
    prev, cur = roc[k - 1], roc[k]
    t = diffs[k - 1] / (diffs[k - 1] - diffs[k])
    rate = fnrs[k - 1] + (fnrs[k] - fnrs[k - 1]) * t
    if math.isinf(prev.threshold):
        threshold = cur.threshold
    else:
        threshold = prev.threshold + (cur.threshold - prev.threshold) * t
    return (rate, threshold)


def tpr_at_fpr(roc: list[RocPoint], fpr_target: float) -> tuple[float, float]:
    """Largest TPR among points with exact FPR <= target; no interpolation.

    Returns the largest threshold achieving that TPR, so the reported
    operating point is the conservative one.
    """
    if not 0.0 <= fpr_target <= 1.0:
        raise ValueError(f"fpr_target must lie in [0, 1], got {fpr_target}")
    best = roc[0]
    for p in roc:
        if p.fpr > fpr_target:
            break
        if p.tpr > best.tpr:
            best = p
    return (best.tpr, best.threshold)


def accuracy_best_threshold(
    roc: list[RocPoint], scores: ScoreSet
) -> tuple[float, float]:
    """Maximum (TP + TN) / (P + N) over the sweep; ties go to the larger threshold."""
    pos, neg = scores.n_genuine, scores.n_impostor
    best_correct, best_thr = -1, math.inf
    for p in roc:  # descending thresholds, so the first maximum wins ties
        correct = p.tp + (neg - p.fp)
        if correct > best_correct:
            best_correct, best_thr = correct, p.threshold
    return (best_correct / (pos + neg), best_thr)


# ---------------------------------------------------------------------------
# report assembly and file formats
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    accuracy: float
    accuracy_threshold: float
    eer: float
    eer_threshold: float
    tpr_at_fpr: list[dict] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_threshold": _json_float(self.accuracy_threshold),
            "eer": self.eer,
            "eer_threshold": _json_float(self.eer_threshold),
            "tpr_at_fpr": [
                {
                    "fpr_target": e["fpr_target"],
                    "tpr": e["tpr"],
                    "threshold": _json_float(e["threshold"]),
                }
                for e in self.tpr_at_fpr
            ],
            "counts": dict(self.counts),
        }

    def human_lines(self) -> list[str]:
        lines = [
            f"accuracy {self.accuracy:.4f} at threshold {self.accuracy_threshold:.6g}",
            f"eer      {self.eer:.4f} at threshold {self.eer_threshold:.6g}",
        ]
        for e in self.tpr_at_fpr:
            lines.append(
                f"tpr@fpr={e['fpr_target']:g} {e['tpr']:.4f} "
                f"at threshold {e['threshold']:.6g}"
            )
        lines.append(
            f"counts   genuine={self.counts.get('genuine')} "
            f"impostor={self.counts.get('impostor')}"
        )
        return lines


def _json_float(v: float):
    # inf sentinels are not representable in strict JSON
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def compute_report(scores: ScoreSet, fpr_targets=(0.001,)) -> MetricsReport:
    roc = roc_sweep(scores)
    acc, acc_thr = accuracy_best_threshold(roc, scores)
    eer_rate, eer_thr = eer(roc)
    entries = []
    for target in fpr_targets:
        tpr, thr = tpr_at_fpr(roc, target)
        entries.append({"fpr_target": float(target), "tpr": tpr, "threshold": thr})
    return MetricsReport(
        accuracy=acc,
        accuracy_threshold=acc_thr,
        eer=eer_rate,
        eer_threshold=eer_thr,
        tpr_at_fpr=entries,
        counts={"genuine": scores.n_genuine, "impostor": scores.n_impostor},
    )


CSV_HEADER = "label,score"


def read_scores_csv(path) -> ScoreSet:
    """Parse the `label,score` CSV; errors carry 1-based line numbers."""
    labels, scores = [], []
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != CSV_HEADER:
        raise ValueError(f"line 1: expected header {CSV_HEADER!r}")
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise ValueError(f"line {i}: expected 'label,score', got {line!r}")
        try:
            label = int(parts[0])
            score = float(parts[1])
        except ValueError:
            raise ValueError(f"line {i}: could not parse {line!r}") from None
        if label not in (0, 1):
            raise ValueError(f"line {i}: label must be 0 or 1, got {label}")
        if not math.isfinite(score):
            raise ValueError(f"line {i}: score must be finite, got {score}")
        labels.append(label)
        scores.append(score)
    if not labels:
        raise ValueError("line 1: file contains a header but no records")
    return ScoreSet(np.asarray(labels), np.asarray(scores))


def write_scores_csv(path, scores: ScoreSet) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(CSV_HEADER + "\n")
        for label, score in zip(scores.labels, scores.scores):
            fh.write(f"{int(label)},{score!r}\n")
