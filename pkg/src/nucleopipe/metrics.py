"""Dice and panoptic-quality metrics for nuclei instance maps.

Matching uses the IoU > 0.5 rule, under which a ground-truth instance can
overlap at most one prediction that strongly, so the matching is unique and
needs no assignment solver. For a set of matches,

    DQ = TP / (TP + FP/2 + FN/2),  SQ = sum(IoU) / TP,  PQ = DQ * SQ.

bPQ treats all nuclei as one class; mPQ averages per-class PQ over the nuclei
classes present in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .maps import NUM_CLASSES

IOU_THRESHOLD = 0.5
ORACLE_MAX_SIDE = 64
ORACLE_MAX_INSTANCES = 12


class MatchingError(AssertionError):
    """An instance matched twice; impossible with IoU > 0.5."""


class OracleSizeError(ValueError):
    pass


def dice(pred, gt) -> float:
    """``2|A & B| / (|A| + |B|)``, 1.0 when both masks are empty."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"masks differ in shape: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int, float], ...]
    unmatched_gt: tuple[int, ...]
    unmatched_pred: tuple[int, ...]


@dataclass(frozen=True)
class PQScore:
    dq: float
    sq: float
    pq: float
    tp: int
    fp: int
    fn: int
    sum_iou: float

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, sum_iou: float) -> PQScore:
        if tp == fp == fn == 0:
            return cls(1.0, 1.0, 1.0, 0, 0, 0, 0.0)
        dq = tp / (tp + 0.5 * fp + 0.5 * fn)
        sq = sum_iou / tp if tp else 0.0
        return cls(dq, sq, dq * sq, tp, fp, fn, sum_iou)


def _ids(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    return ids[ids != 0]


def match_instances(gt: np.ndarray, pred: np.ndarray) -> MatchResult:
    """Pair gt and predicted instances whose IoU exceeds 0.5."""
    gt = np.asarray(gt, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if gt.shape != pred.shape:
        raise ValueError(f"label maps differ in shape: {gt.shape} vs {pred.shape}")
    gt_ids, pred_ids = _ids(gt), _ids(pred)
    n_pred = int(pred.max(initial=0)) + 1
    # joint histogram over (gt id, pred id) pixel pairs
    joint = np.bincount((gt * n_pred + pred).ravel(), minlength=(int(gt.max(initial=0)) + 1) * n_pred)
    joint = joint.reshape(-1, n_pred)
    gt_area = joint.sum(axis=1)
    pred_area = joint.sum(axis=0)

    pairs = []
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    g_idx, p_idx = np.nonzero(joint[1:, 1:])
    for g, p in zip((g_idx + 1).tolist(), (p_idx + 1).tolist()):
        inter = int(joint[g, p])
        iou = inter / (int(gt_area[g]) + int(pred_area[p]) - inter)
        if iou > IOU_THRESHOLD:
            if g in used_gt or p in used_pred:
                raise MatchingError(f"instance matched twice (gt {g}, pred {p})")
            used_gt.add(g)
            used_pred.add(p)
            pairs.append((g, p, iou))
    return MatchResult(
        tuple(pairs),
        tuple(int(g) for g in gt_ids if g not in used_gt),
        tuple(int(p) for p in pred_ids if p not in used_pred),
    )


def pq_counts(match: MatchResult) -> tuple[int, int, int, float]:
    return len(match.pairs), len(match.unmatched_pred), len(match.unmatched_gt), float(sum(p[2] for p in match.pairs))


def pq(gt: np.ndarray, pred: np.ndarray) -> PQScore:
    """Binary PQ: every nonzero id is a nucleus of one shared class."""
    return PQScore.from_counts(*pq_counts(match_instances(gt, pred)))


def oracle_pq(gt: np.ndarray, pred: np.ndarray) -> PQScore:
    """Exhaustive-enumeration PQ used to cross-check :func:`pq` on small maps.

    Walks every pixel once, counting areas and pairwise intersections in plain
    dictionaries, forms the IoU of every (gt, pred) pair, and accepts pairs
    greedily by decreasing IoU while IoU > 0.5.
    """
    gt_rows = np.asarray(gt).tolist()
    pred_rows = np.asarray(pred).tolist()
    if len(gt_rows) != len(pred_rows) or any(len(a) != len(b) for a, b in zip(gt_rows, pred_rows)):
        raise ValueError("label maps differ in shape")
    if len(gt_rows) > ORACLE_MAX_SIDE or (gt_rows and len(gt_rows[0]) > ORACLE_MAX_SIDE):
        raise OracleSizeError(f"oracle limited to {ORACLE_MAX_SIDE}x{ORACLE_MAX_SIDE} maps")

    gt_area: dict[int, int] = {}
    pred_area: dict[int, int] = {}
    inter: dict[tuple[int, int], int] = {}
    for row_g, row_p in zip(gt_rows, pred_rows):
        for g, p in zip(row_g, row_p):
            if g:
                gt_area[g] = gt_area.get(g, 0) + 1
            if p:
                pred_area[p] = pred_area.get(p, 0) + 1
            if g and p:
                inter[(g, p)] = inter.get((g, p), 0) + 1
    if len(gt_area) > ORACLE_MAX_INSTANCES or len(pred_area) > ORACLE_MAX_INSTANCES:
        raise OracleSizeError(f"oracle limited to {ORACLE_MAX_INSTANCES} instances per map")

    candidates = []
    for g in sorted(gt_area):
        for p in sorted(pred_area):
            i = inter.get((g, p), 0)
            candidates.append((i / (gt_area[g] + pred_area[p] - i), g, p))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    matched_g: set[int] = set()
    matched_p: set[int] = set()
    ious = []
    for iou, g, p in candidates:
        if iou <= IOU_THRESHOLD:
            break
        if g in matched_g or p in matched_p:
            continue
        matched_g.add(g)
        matched_p.add(p)
        ious.append((g, iou))
    ious.sort()
    tp = len(ious)
    return PQScore.from_counts(tp, len(pred_area) - tp, len(gt_area) - tp, float(sum(i for _, i in ious)))


# --------------------------------------------------------------------------
# multi-class


@dataclass(frozen=True)
class Sample:
    """One image: gt/pred label maps and ``{instance id: class}`` for each side."""

    gt_labels: np.ndarray
    gt_classes: Mapping[int, int]
    pred_labels: np.ndarray
    pred_classes: Mapping[int, int]


@dataclass
class Tally:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    sum_iou: float = 0.0

    def add(self, tp: int, fp: int, fn: int, sum_iou: float) -> None:
        self.tp += tp
        self.fp += fp
        self.fn += fn
        self.sum_iou += sum_iou

    def merge(self, other: Tally) -> None:
        self.add(other.tp, other.fp, other.fn, other.sum_iou)

    def score(self) -> PQScore:
        return PQScore.from_counts(self.tp, self.fp, self.fn, self.sum_iou)


def _restrict(labels: np.ndarray, classes: Mapping[int, int], cls: int) -> np.ndarray:
    keep = np.zeros(int(np.max(labels, initial=0)) + 1, dtype=bool)
    for idx, c in classes.items():
        if c == cls and idx < keep.size:
            keep[idx] = True
    return np.where(keep[labels], labels, 0)


def class_counts(sample: Sample, cls: int) -> tuple[int, int, int, float]:
    gt = _restrict(np.asarray(sample.gt_labels, dtype=np.int64), sample.gt_classes, cls)
    pred = _restrict(np.asarray(sample.pred_labels, dtype=np.int64), sample.pred_classes, cls)
    return pq_counts(match_instances(gt, pred))


@dataclass
class MPQResult:
    per_class: dict[int, float]
    mpq: float
    present: tuple[int, ...] = ()
    scores: dict[int, PQScore] = field(default_factory=dict)


def _present_classes(samples: Sequence[Sample], nuclei_classes: Iterable[int]) -> tuple[int, ...]:
    seen = set()
    for s in samples:
        ids = set(_ids(np.asarray(s.gt_labels)).tolist())
        seen.update(c for idx, c in s.gt_classes.items() if idx in ids)
    return tuple(c for c in nuclei_classes if c in seen)


def mpq_dataset(
    samples: Sequence[Sample],
    n_classes: int = NUM_CLASSES,
    per_image: bool = False,
) -> MPQResult:
    """Per-class PQ and their mean over the classes present in any gt.

    By default tp/fp/fn/IoU are summed over the whole dataset per class before
    dividing. With ``per_image`` each image gets its own mPQ (over classes in
    that image's gt or prediction) and the dataset value is the image mean;
    per-class scores are then image means as well.
    """
    nuclei_classes = range(1, n_classes)
    if not per_image:
        tallies = {c: Tally() for c in nuclei_classes}
        for s in samples:
            for c in nuclei_classes:
                tallies[c].add(*class_counts(s, c))
        present = _present_classes(samples, nuclei_classes)
        scores = {c: tallies[c].score() for c in nuclei_classes}
        mpq = mean_class_pq([scores[c].pq for c in present]) if present else 0.0
        return MPQResult({c: s.pq for c, s in scores.items()}, mpq, present, scores)

    image_values = []
    class_values: dict[int, list[float]] = {c: [] for c in nuclei_classes}
    for s in samples:
        scores = []
        for c in nuclei_classes:
            tp, fp, fn, iou = class_counts(s, c)
            if tp == fp == fn == 0:
                continue
            value = PQScore.from_counts(tp, fp, fn, iou).pq
            scores.append(value)
            class_values[c].append(value)
        if scores:
            image_values.append(float(np.mean(scores)))
    per_class = {c: float(np.mean(v)) if v else 0.0 for c, v in class_values.items()}
    present = tuple(c for c in nuclei_classes if class_values[c])
    return MPQResult(per_class, float(np.mean(image_values)) if image_values else 0.0, present)


def bpq_dataset(samples: Sequence[Sample], per_image: bool = False) -> float:
    """Binary PQ over a collection: pooled counts, or the mean of per-image PQ."""
    if per_image:
        return float(np.mean([pq(s.gt_labels, s.pred_labels).pq for s in samples])) if samples else 0.0
    tally = Tally()
    for s in samples:
        tally.add(*pq_counts(match_instances(s.gt_labels, s.pred_labels)))
    return tally.score().pq


def mean_class_pq(values: Sequence[float]) -> float:
    """Average of per-class PQ values (the mPQ reduction)."""
    return float(np.mean(values))
