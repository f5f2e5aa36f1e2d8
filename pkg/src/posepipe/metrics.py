"""Keypoint-detection evaluation: OKS matching and ranked-list AP/mAP/AR.

Similarity between a predicted and a true skeleton is the mean over shared
joints of exp(-d^2 / (2 s^2 kappa^2)) with s the truth bounding-box
diagonal and kappa a fixed per-joint constant. AP is the literal rank sum
of precision times recall increments; AR is the mean recall over the
ranked list, averaged over classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .decoder import PoseSkeleton

DEFAULT_KAPPA = 0.1


def oks_similarity(pred: PoseSkeleton, truth: PoseSkeleton,
                   kappa: float = DEFAULT_KAPPA) -> float:
    """Gaussian keypoint similarity in [0, 1] over jointly present joints."""
    shared = [
        (p, t)
        for p, t in zip(pred.joints, truth.joints)
        if p is not None and t is not None
    ]
    if not shared:
        return 0.0
    truth_pts = [t for t in truth.joints if t is not None]
    xs = [t[0] for t in truth_pts]
    ys = [t[1] for t in truth_pts]
    scale = math.hypot(max(xs) - min(xs), max(ys) - min(ys))
    total = 0.0
    for p, t in shared:
        d_sq = (p[0] - t[0]) ** 2 + (p[1] - t[1]) ** 2
        if scale < 1e-9:
            total += 1.0 if d_sq < 1e-18 else 0.0
        else:
            total += math.exp(-d_sq / (2.0 * scale**2 * kappa**2))
    return total / len(shared)


@dataclass(frozen=True)
class MatchResult:
    """One ranked prediction's outcome against the truth set."""

    pred_index: int
    truth_index: int | None
    similarity: float
    score: float

    @property
    def is_tp(self) -> bool:
        return self.truth_index is not None


def match_detections(
    pred: Sequence[PoseSkeleton],
    truth: Sequence[PoseSkeleton],
    threshold: float,
    kappa: float = DEFAULT_KAPPA,
) -> list[MatchResult]:
    """Greedy score-ordered matching of predictions to truths.

    Predictions are ranked by descending score (ties by index); each takes
    the highest-similarity unmatched truth at or above the threshold. Every
    truth matches at most once. Results come back in rank order.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].total_score, i))
    taken: set[int] = set()
    results = []
    for idx in order:
        best_truth = None
        best_sim = 0.0
        for t_idx, t in enumerate(truth):
            if t_idx in taken:
                continue
            sim = oks_similarity(pred[idx], t, kappa)
            if best_truth is None or sim > best_sim:
                best_sim = sim
                best_truth = t_idx
        if best_truth is not None and best_sim >= threshold:
            taken.add(best_truth)
            results.append(
                MatchResult(
                    pred_index=idx,
                    truth_index=best_truth,
                    similarity=best_sim,
                    score=pred[idx].total_score,
                )
            )
        else:
            results.append(
                MatchResult(
                    pred_index=idx,
                    truth_index=None,
                    similarity=best_sim,
                    score=pred[idx].total_score,
                )
            )
    return results


@dataclass(frozen=True)
class RankedDetection:
    """A dataset-level detection: score, TP flag, and a stable tie-break id."""

    score: float
    is_tp: bool
    det_id: tuple


@dataclass
class ClassMatches:
    """All detections for one class at one threshold plus the truth count."""

    detections: list[RankedDetection] = field(default_factory=list)
    gt_count: int = 0

    def ranked(self) -> list[RankedDetection]:
        return sorted(self.detections, key=lambda d: (-d.score, d.det_id))


def average_precision(flags: Sequence[bool], gt_count: int) -> float:
    """Rank sum of precision times the recall increment.

    The recall increment is 1/gt_count at true-positive ranks and zero
    elsewhere, so the sum factors into (sum of precisions at TP ranks)
    divided by gt_count; the factored form makes a perfect ranking come
    out as exactly 1.0.
    """
    if gt_count <= 0:
        raise ValueError("average_precision needs gt_count > 0")
    tp = 0
    precision_sum = 0.0
    for i, is_tp in enumerate(flags, start=1):
        if is_tp:
            tp += 1
            precision_sum += tp / i
    return precision_sum / gt_count


def average_recall(flags: Sequence[bool], gt_count: int) -> float:
    """Mean recall over the ranked detection list."""
    if not flags or gt_count <= 0:
        return 0.0
    total = 0.0
    tp = 0
    for is_tp in flags:
        if is_tp:
            tp += 1
        total += tp / gt_count
    return total / len(flags)


@dataclass
class MetricsReport:
    """Per-class AP at each threshold plus mAP/AR and match counts."""

    ap: dict          # threshold -> {class -> AP}
    mean_ap: dict     # threshold -> mAP over defined classes
    overall_map: float
    ar: dict          # threshold -> AR averaged over classes
    matched: dict     # threshold -> TP detection count
    unmatched: dict   # threshold -> FP detection count
    skipped_classes: dict  # threshold -> classes with zero ground truth

    def to_dict(self) -> dict:
        def key(t):
            return repr(float(t))

        return {
            "ap": {key(t): dict(sorted(v.items())) for t, v in self.ap.items()},
            "mean_ap": {key(t): v for t, v in self.mean_ap.items()},
            "overall_map": self.overall_map,
            "ar": {key(t): v for t, v in self.ar.items()},
            "matched": {key(t): v for t, v in self.matched.items()},
            "unmatched": {key(t): v for t, v in self.unmatched.items()},
            "skipped_classes": {
                key(t): sorted(v) for t, v in self.skipped_classes.items()
            },
        }


def compute_metrics(
    matches: Mapping[float, Mapping[str, ClassMatches]],
    classes: Sequence[str],
) -> MetricsReport:
    """Aggregate ranked per-class matches into the metrics report.

    Classes with zero ground truth have undefined AP; they are excluded
    from mAP/AR and reported under ``skipped_classes``.
    """
    ap: dict = {}
    mean_ap: dict = {}
    ar: dict = {}
    matched: dict = {}
    unmatched: dict = {}
    skipped: dict = {}
    for threshold, per_class in matches.items():
        ap[threshold] = {}
        skipped[threshold] = []
        matched[threshold] = 0
        unmatched[threshold] = 0
        ar_values = []
        for cls in classes:
            cm = per_class.get(cls, ClassMatches())
            ranked = cm.ranked()
            flags = [d.is_tp for d in ranked]
            matched[threshold] += sum(flags)
            unmatched[threshold] += len(flags) - sum(flags)
            if cm.gt_count == 0:
                skipped[threshold].append(cls)
                continue
            ap[threshold][cls] = average_precision(flags, cm.gt_count)
            ar_values.append(average_recall(flags, cm.gt_count))
        defined = list(ap[threshold].values())
        mean_ap[threshold] = sum(defined) / len(defined) if defined else 0.0
        ar[threshold] = sum(ar_values) / len(ar_values) if ar_values else 0.0
    overall = sum(mean_ap.values()) / len(mean_ap) if mean_ap else 0.0
    for values in ap.values():
        for v in values.values():
            if not 0.0 <= v <= 1.0 + 1e-12:
                raise AssertionError(f"AP {v} outside [0, 1]")
    return MetricsReport(
        ap=ap,
        mean_ap=mean_ap,
        overall_map=overall,
        ar=ar,
        matched=matched,
        unmatched=unmatched,
        skipped_classes=skipped,
    )
