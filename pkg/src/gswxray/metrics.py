"""Detection and classification evaluation: matching, AP/mAP, recall, AR@1, reports, triage."""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from gswxray.core import AnnotatedImage, Detection, LabeledObject, iou

INTERPOLATION_MODES = ("101", "11", "area")
TP, FP, IGNORED = "TP", "FP", "IGNORED"
COCO_IOUS = tuple(0.5 + 0.05 * k for k in range(10))


class UndefinedMetricError(ValueError):
    """Raised when a metric has no defined value (e.g. no ground truth)."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "fn"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")

    @property
    def total_gt(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    total_gt: int

    def __post_init__(self) -> None:
        if np.any(np.diff(self.recall) < 0):
            raise ValueError("recall must be non-decreasing")
        if np.any((self.precision < 0) | (self.precision > 1)):
            raise ValueError("precision outside [0, 1]")

    def __len__(self) -> int:
        return len(self.recall)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))


@dataclass(frozen=True)
class Matching:
    """Detections in rank order with their outcome (TP, FP or IGNORED)."""

    detections: tuple[Detection, ...]
    outcomes: tuple[str, ...]
    counts: dict[str, ConfusionCounts]

    @property
    def total(self) -> ConfusionCounts:
        out = ConfusionCounts()
        for c in self.counts.values():
            out = out + c
        return out

    def ranked_flags(self, class_name: str) -> list[bool]:
        """TP flags for one class in rank order, ignored detections dropped."""
        return [o == TP for d, o in zip(self.detections, self.outcomes) if d.class_name == class_name and o != IGNORED]


def rank_key(d: Detection):
    b = d.box
    return (-d.score, d.image_id, b.xmin, b.ymin, b.xmax, b.ymax, d.class_name)


def _gt_index(gts) -> dict[str, list[LabeledObject]]:
    if isinstance(gts, Mapping):
        return {k: list(v) for k, v in gts.items()}
    out: dict[str, list[LabeledObject]] = {}
    for img in gts:
        if not isinstance(img, AnnotatedImage):
            raise TypeError("gts must be AnnotatedImages or a mapping image_id -> objects")
        if img.id in out:
            raise ValueError(f"duplicate image id {img.id!r}")
        out[img.id] = list(img.objects)
    return out


def _check_threshold(t: float) -> None:
    if not 0.0 < t < 1.0:
        raise ValueError("iou_threshold must be in (0, 1)")


def match_detections(dets: Sequence[Detection], gts, iou_threshold: float = 0.5) -> Matching:
    """Greedy matching in descending score order.

    A detection is TP when its best-IoU unmatched, non-difficult gt of the
    same class and image reaches the threshold; that gt is consumed.
    Otherwise, if it overlaps a difficult gt at the threshold it is IGNORED,
    else FP. Unconsumed non-difficult gts are FN; difficult gts never count.
    """
    _check_threshold(iou_threshold)
    index = _gt_index(gts)
    ranked = sorted(dets, key=rank_key)
    used: dict[tuple[str, int], bool] = {}
    outcomes = []
    tp: dict[str, int] = defaultdict(int)
    fp: dict[str, int] = defaultdict(int)
    for d in ranked:
        objs = index.get(d.image_id, [])
        best, best_i = -1.0, -1
        hard = False
        for i, o in enumerate(objs):
            if o.class_name != d.class_name:
                continue
            v = iou(d.box, o.box)
            if o.difficult:
                hard = hard or v >= iou_threshold
            elif not used.get((d.image_id, i)) and v > best:
                best, best_i = v, i
        if best >= iou_threshold:
            used[(d.image_id, best_i)] = True
            tp[d.class_name] += 1
            outcomes.append(TP)
        elif hard:
            outcomes.append(IGNORED)
        else:
            fp[d.class_name] += 1
            outcomes.append(FP)

    n_gt: dict[str, int] = defaultdict(int)
    for objs in index.values():
        for o in objs:
            if not o.difficult:
                n_gt[o.class_name] += 1
    classes = sorted(set(n_gt) | {d.class_name for d in ranked})
    counts = {c: ConfusionCounts(tp[c], fp[c], n_gt[c] - tp[c]) for c in classes}
    return Matching(tuple(ranked), tuple(outcomes), counts)


def pr_curve(is_tp: Sequence[bool], total_gt: int) -> PRCurve:
    """Precision/recall after each detection of a ranked TP/FP list."""
    if total_gt <= 0:
        raise UndefinedMetricError("no ground truth: precision/recall undefined")
    flags = np.asarray(is_tp, dtype=bool)
    tps = np.cumsum(flags)
    if tps[-1:].sum() > total_gt:
        raise ValueError("more true positives than ground-truth objects")
    ranks = np.arange(1, len(flags) + 1)
    return PRCurve(tps / total_gt, tps / ranks, total_gt)


def _envelope(precision: np.ndarray) -> np.ndarray:
    # max precision at this rank or any later (higher-recall) rank
    return np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision


def average_precision(is_tp: Sequence[bool], total_gt: int, mode: str = "101") -> float:
    """AP of a ranked TP/FP list.

    ``101`` and ``11`` average, over recall points k/(N-1), the best
    precision reached at recall >= that point (0 when never reached).
    ``area`` integrates the same interpolated precision exactly.
    """
    if mode not in INTERPOLATION_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    curve = pr_curve(is_tp, total_gt)
    flags = np.asarray(is_tp, dtype=bool)
    if not flags.any():
        return 0.0
    env = _envelope(curve.precision)
    if mode == "area":
        # each TP raises recall by exactly 1/total_gt
        return math.fsum(env[flags].tolist()) / total_gt
    n = 101 if mode == "101" else 11
    tps = np.cumsum(flags)
    samples = []
    for k in range(n):
        # recall tps/total_gt >= k/(n-1)  <=>  tps*(n-1) >= k*total_gt
        hit = np.flatnonzero(tps * (n - 1) >= k * total_gt)
        samples.append(float(env[hit[0]]) if len(hit) else 0.0)
    return math.fsum(samples) / n


def mean_average_precision(per_class_ap: Mapping[str, float | None]) -> float:
    """Arithmetic mean of the defined per-class APs; ``None`` entries are skipped with a warning."""
    if not per_class_ap:
        raise ValueError("no classes to average")
    defined = {c: v for c, v in per_class_ap.items() if v is not None}
    skipped = sorted(set(per_class_ap) - set(defined))
    if skipped:
        warnings.warn(f"classes without ground truth excluded from mAP: {skipped}", stacklevel=2)
    if not defined:
        raise UndefinedMetricError("no class has a defined AP")
    return math.fsum(defined.values()) / len(defined)


def recall(counts: ConfusionCounts) -> float:
    if counts.tp + counts.fn == 0:
        raise UndefinedMetricError("recall undefined: no ground-truth objects")
    return counts.tp / (counts.tp + counts.fn)


def average_recall(
    dets: Sequence[Detection],
    gts,
    iou_threshold: float = 0.5,
    max_dets: int | None = None,
    iou_thresholds: Sequence[float] | None = None,
) -> float:
    """Per-image recall using at most ``max_dets`` top detections per class,
    averaged over images holding gts of that class, then over classes.

    With ``iou_thresholds`` the result is further averaged over those IoUs.
    """
    if max_dets is not None and max_dets < 0:
        raise ValueError("max_dets must be non-negative")
    thresholds = list(iou_thresholds) if iou_thresholds is not None else [iou_threshold]
    if not thresholds:
        raise ValueError("need at least one IoU threshold")
    index = _gt_index(gts)
    by_key: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in dets:
        by_key[(d.image_id, d.class_name)].append(d)
    gt_keys: dict[str, list[str]] = defaultdict(list)
    for image_id in sorted(index):
        for c in sorted({o.class_name for o in index[image_id] if not o.difficult}):
            gt_keys[c].append(image_id)
    if not gt_keys:
        raise UndefinedMetricError("no image has ground-truth objects")

    results = []
    for t in thresholds:
        _check_threshold(t)
        per_class = []
        for c in sorted(gt_keys):
            per_image = []
            for image_id in gt_keys[c]:
                kept = sorted(by_key.get((image_id, c), []), key=rank_key)
                if max_dets is not None:
                    kept = kept[:max_dets]
                m = match_detections(kept, {image_id: index[image_id]}, t)
                per_image.append(recall(m.counts[c]))
            per_class.append(math.fsum(per_image) / len(per_image))
        results.append(math.fsum(per_class) / len(per_class))
    return math.fsum(results) / len(results)


def average_recall_at_1(dets, gts, iou_threshold: float = 0.5, coco_average: bool = False) -> float:
    """AR with at most one detection per image and class."""
    return average_recall(dets, gts, iou_threshold, max_dets=1, iou_thresholds=COCO_IOUS if coco_average else None)


@dataclass(frozen=True)
class ClassificationReport:
    accuracy: float
    confusion: dict[tuple[str, str], int]  # (true, predicted) -> count
    classes: tuple[str, ...]

    def table(self) -> str:
        width = max(len(c) for c in self.classes) + 2
        lines = ["true\\pred".ljust(width + 2) + "".join(c.rjust(width) for c in self.classes)]
        for t in self.classes:
            lines.append(t.ljust(width + 2) + "".join(str(self.confusion[(t, p)]).rjust(width) for p in self.classes))
        return "\n".join(lines) + "\n"


def classification_metrics(predicted: Sequence[str], true: Sequence[str], classes=("Normal", "GSW")) -> ClassificationReport:
    if len(predicted) != len(true):
        raise ValueError("predicted and true label lists differ in length")
    if not true:
        raise ValueError("no labels")
    classes = tuple(classes)
    for lab in (*predicted, *true):
        if lab not in classes:
            raise ValueError(f"label {lab!r} not in {classes}")
    confusion = {(t, p): 0 for t in classes for p in classes}
    for p, t in zip(predicted, true):
        confusion[(t, p)] += 1
    correct = sum(confusion[(c, c)] for c in classes)
    return ClassificationReport(correct / len(true), confusion, classes)


@dataclass(frozen=True)
class EvalReport:
    run_name: str
    per_class_ap: dict[str, float | None]
    map: float
    ar_at_1: float
    counts: ConfusionCounts
    iou_threshold: float = 0.5
    interpolation: str = "101"

    def to_dict(self) -> dict:
        return {
            "run_name": self.run_name,
            "per_class_ap": self.per_class_ap,
            "map": self.map,
            "ar_at_1": self.ar_at_1,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn},
            "iou_threshold": self.iou_threshold,
            "interpolation": self.interpolation,
        }

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")


def evaluate(
    dets: Sequence[Detection], gts, run_name: str = "model", iou_threshold: float = 0.5, mode: str = "101"
) -> EvalReport:
    """Match, then compute per-class AP, mAP and AR@1 in one pass."""
    m = match_detections(dets, gts, iou_threshold)
    per_class: dict[str, float | None] = {}
    for c, counts in m.counts.items():
        per_class[c] = average_precision(m.ranked_flags(c), counts.total_gt, mode) if counts.total_gt else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        mean = mean_average_precision(per_class) if any(v is not None for v in per_class.values()) else float("nan")
    try:
        ar = average_recall_at_1(dets, gts, iou_threshold)
    except UndefinedMetricError:
        ar = float("nan")
    return EvalReport(run_name, per_class, mean, ar, m.total, iou_threshold, mode)


def _fmt(v: float, style: str) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    if style == "percent":
        return str(math.floor(v * 100 + 0.5 + 1e-9))
    if style == "fraction":
        return f"{v:.3f}"
    raise ValueError(f"unknown style {style!r}")


def render_table(reports: Iterable[EvalReport], style: str = "fraction") -> str:
    """Plain-text ``Model / mAP / AR`` table, one row per report."""
    rows = [("Model", "mAP", "AR")]
    rows += [(r.run_name, _fmt(r.map, style), _fmt(r.ar_at_1, style)) for r in reports]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    w2 = max(len(r[2]) for r in rows)
    return "".join(f"{a.ljust(w0)}  {b.rjust(w1)}  {c.rjust(w2)}\n" for a, b, c in rows)


@dataclass(frozen=True)
class TriageEntry:
    study_id: str
    bullet_count: int
    total_score: float = 0.0


def triage_rank(detections: Mapping[str, Sequence[Detection]], score_threshold: float = 0.5) -> list[TriageEntry]:
    """Most bullets first; ties by summed confidence, then study id."""
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score_threshold must be in [0, 1]")
    entries = []
    for study, dets in detections.items():
        kept = [d.score for d in dets if d.score >= score_threshold]
        entries.append(TriageEntry(study, len(kept), math.fsum(kept)))
    return sorted(entries, key=lambda e: (-e.bullet_count, -e.total_score, e.study_id))


def render_triage(entries: Sequence[TriageEntry]) -> str:
    lines = ["rank\tstudy\tbullets\ttotal_score"]
    lines += [f"{i}\t{e.study_id}\t{e.bullet_count}\t{e.total_score:.6f}" for i, e in enumerate(entries, 1)]
    return "\n".join(lines) + "\n"
