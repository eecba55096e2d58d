"""Prediction quality, calibration error and worst-subgroup reporting."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True, eq=False)
class PredictionRecord:
    probs: np.ndarray
    predicted: int
    confidence: float
    label: int

    @property
    def correct(self) -> bool:
        return self.predicted == self.label


def _arrays(records: Sequence[PredictionRecord]):
    if len(records) == 0:
        raise ValueError("need at least one prediction record")
    conf = np.fromiter((r.confidence for r in records), dtype=np.float64, count=len(records))
    pred = np.fromiter((r.predicted for r in records), dtype=np.int64, count=len(records))
    label = np.fromiter((r.label for r in records), dtype=np.int64, count=len(records))
    return conf, pred, label


def accuracy(records) -> float:
    _, pred, label = _arrays(records)
    return float(np.mean(pred == label))


def _f1(pred, label, positive) -> float:
    tp = np.sum((pred == positive) & (label == positive))
    fp = np.sum((pred == positive) & (label != positive))
    fn = np.sum((pred != positive) & (label == positive))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else float(2 * tp / denom)


def f1(records, positive_class: int = 1) -> float:
    """Binary F1 of ``positive_class``; 0 when there are no positives at all."""
    _, pred, label = _arrays(records)
    return _f1(pred, label, positive_class)


def macro_f1(records, num_classes: int) -> float:
    _, pred, label = _arrays(records)
    return float(np.mean([_f1(pred, label, c) for c in range(num_classes)]))


def equal_mass_bins(n: int, num_bins: int) -> List[int]:
    """Bin sizes for ``n`` sorted items; larger bins first, ``min(n, num_bins)`` bins."""
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    b = min(n, num_bins)
    base, extra = divmod(n, b)
    return [base + 1] * extra + [base] * (b - extra)


@dataclass(frozen=True)
class ReliabilityBin:
    lower: float
    upper: float
    count: int
    mean_confidence: Optional[float]
    accuracy: Optional[float]

    @property
    def gap(self) -> float:
        if self.count == 0:
            return 0.0
        return abs(self.accuracy - self.mean_confidence)


@dataclass(frozen=True)
class ReliabilityDiagram:
    mode: str
    bins: Tuple[ReliabilityBin, ...]

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def ece(self) -> float:
        n = self.total
        return float(sum(b.count / n * b.gap for b in self.bins))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "bins": [b.__dict__.copy() for b in self.bins]}

    def to_csv(self, **extra) -> str:
        buf = io.StringIO()
        cols = list(extra) + ["bin", "lower", "upper", "count", "mean_confidence", "accuracy"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for i, b in enumerate(self.bins):
            w.writerow(list(extra.values()) + [i, repr(b.lower), repr(b.upper), b.count,
                                               "" if b.mean_confidence is None else repr(b.mean_confidence),
                                               "" if b.accuracy is None else repr(b.accuracy)])
        return buf.getvalue()


def reliability(records, num_bins: int = 10, mode: str = "equal_mass") -> ReliabilityDiagram:
    """Per-bin confidence/accuracy statistics.

    ``equal_mass`` sorts by confidence (stable) and cuts contiguous bins whose
    sizes differ by at most one; bounds are the extreme confidences inside each
    bin. ``equal_width`` uses the intervals ``((b-1)/B, b/B]``.
    """
    conf, pred, label = _arrays(records)
    correct = (pred == label).astype(np.float64)
    bins = []
    if mode == "equal_mass":
        order = np.argsort(conf, kind="stable")
        start = 0
        for size in equal_mass_bins(conf.size, num_bins):
            sel = order[start:start + size]
            start += size
            c = conf[sel]
            bins.append(ReliabilityBin(float(c.min()), float(c.max()), int(size),
                                       float(c.mean()), float(correct[sel].mean())))
    elif mode == "equal_width":
        if num_bins < 1:
            raise ValueError("num_bins must be at least 1")
        edges = np.linspace(0.0, 1.0, num_bins + 1)
        idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, num_bins - 1)
        for b in range(num_bins):
            mask = idx == b
            k = int(mask.sum())
            if k:
                bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), k,
                                           float(conf[mask].mean()), float(correct[mask].mean())))
            else:
                bins.append(ReliabilityBin(float(edges[b]), float(edges[b + 1]), 0, None, None))
    else:
        raise ValueError(f"unknown binning mode {mode!r}")
    return ReliabilityDiagram(mode, tuple(bins))


def qece(records, num_bins: int = 10) -> float:
    """Calibration error over equal-mass confidence bins."""
    conf, pred, label = _arrays(records)
    correct = (pred == label).astype(np.float64)
    order = np.argsort(conf, kind="stable")
    conf, correct = conf[order], correct[order]
    n = conf.size
    total, start = 0.0, 0
    for size in equal_mass_bins(n, num_bins):
        sl = slice(start, start + size)
        start += size
        total += size / n * abs(correct[sl].mean() - conf[sl].mean())
    return float(total)


def ece_equal_width(records, num_bins: int = 10) -> float:
    return reliability(records, num_bins, "equal_width").ece()


def worst_subgroup(values: Mapping, direction: str = "max_is_worst"):
    """``(group, value)`` with the worst value; ties go to the lowest group id."""
    if not values:
        raise ValueError("need at least one group")
    if direction not in ("max_is_worst", "min_is_worst"):
        raise ValueError(f"unknown direction {direction!r}")
    sign = -1.0 if direction == "max_is_worst" else 1.0
    group = min(values, key=lambda g: (sign * values[g], g))
    return group, values[group]


@dataclass
class GroupMetrics:
    group: Optional[int]
    count: int
    performance: float
    qece: float
    reliability: ReliabilityDiagram

    def to_dict(self) -> dict:
        return {"group": self.group, "count": self.count, "performance": self.performance,
                "qece": self.qece, "reliability": self.reliability.to_dict()}


@dataclass
class EvalReport:
    attribute: str
    metric: str
    num_bins: int
    groups: List[GroupMetrics]
    overall: GroupMetrics
    worst_performance: Tuple[int, float]
    worst_qece: Tuple[int, float]
    warnings: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "metric": self.metric,
            "num_bins": self.num_bins,
            "groups": [g.to_dict() for g in self.groups],
            "overall": self.overall.to_dict(),
            "worst_performance": {"group": self.worst_performance[0], "value": self.worst_performance[1]},
            "worst_qece": {"group": self.worst_qece[0], "value": self.worst_qece[1]},
            "warnings": list(self.warnings),
        }

    def summary(self) -> str:
        return (f"attr={self.attribute} worstF1={self.worst_performance[1]:.6f} "
                f"worstQECE={self.worst_qece[1]:.6f}")


def performance(records, num_classes: int) -> Tuple[str, float]:
    """Macro-F1 for multi-class problems, F1 of class 1 for binary ones."""
    if num_classes > 2:
        return "macro_f1", macro_f1(records, num_classes)
    return "f1", f1(records, 1)


def _group_metrics(group, records, num_classes, num_bins) -> GroupMetrics:
    return GroupMetrics(group, len(records), performance(records, num_classes)[1],
                        qece(records, num_bins), reliability(records, num_bins, "equal_mass"))


def evaluate(records, groups, attribute: str, num_classes: int, num_bins: int = 10,
             num_groups: Optional[int] = None) -> EvalReport:
    """Per-group and overall scores for one attribute.

    ``groups`` holds the attribute's group id for each record. Groups in
    ``range(num_groups)`` with no records are skipped with a warning.
    """
    groups = np.asarray(groups, dtype=np.int64)
    if len(records) == 0:
        raise ValueError("need at least one prediction record")
    if groups.shape != (len(records),):
        raise ValueError("groups must align with records")
    if num_groups is None:
        num_groups = int(groups.max()) + 1
    metric, _ = performance(records, num_classes)
    rows, warnings = [], []
    for g in range(num_groups):
        sel = np.flatnonzero(groups == g)
        if sel.size == 0:
            warnings.append(f"attribute {attribute!r}: group {g} has no evaluation samples; omitted")
            continue
        rows.append(_group_metrics(g, [records[i] for i in sel], num_classes, num_bins))
    overall = _group_metrics(None, list(records), num_classes, num_bins)
    worst_perf = worst_subgroup({r.group: r.performance for r in rows}, "min_is_worst")
    worst_q = worst_subgroup({r.group: r.qece for r in rows}, "max_is_worst")
    return EvalReport(attribute, metric, num_bins, rows, overall, worst_perf, worst_q, warnings)
