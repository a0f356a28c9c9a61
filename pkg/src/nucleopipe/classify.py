"""Pixel grouping: one class per nucleus by majority vote over its pixels."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .maps import BACKGROUND, CLASS_NAMES, NUM_CLASSES, PathLike


@dataclass(frozen=True)
class InstanceRecord:
    instance_id: int
    area: int
    histogram: tuple[int, ...]
    class_id: int
    background_only: bool = False


def _check_shapes(instances: np.ndarray, classes: np.ndarray) -> None:
    if instances.shape != classes.shape[: instances.ndim]:
        raise ValueError(f"instance map {instances.shape} and class map {classes.shape} differ in shape")


def class_histograms(instances: np.ndarray, classes: np.ndarray, n_classes: int = NUM_CLASSES) -> np.ndarray:
    """Pixel counts per (instance id, class), shape ``(K + 1, n_classes)``; row 0 is background."""
    _check_shapes(instances, classes)
    ids = np.asarray(instances, dtype=np.int64).ravel()
    cls = np.asarray(classes, dtype=np.int64).ravel()
    k = int(ids.max(initial=0))
    return np.bincount(ids * n_classes + cls, minlength=(k + 1) * n_classes).reshape(k + 1, n_classes)


def class_histogram(instance_id: int, instances: np.ndarray, classes: np.ndarray, n_classes: int = NUM_CLASSES):
    """Per-class pixel counts over one instance's region."""
    _check_shapes(instances, classes)
    region = np.asarray(instances) == instance_id
    if instance_id <= 0 or not region.any():
        raise KeyError(f"no instance with id {instance_id}")
    return np.bincount(np.asarray(classes)[region].astype(np.int64), minlength=n_classes)


def vote(histogram: Sequence[float]) -> tuple[int, bool]:
    """Winning class of one histogram and whether it fell back to background.

    Background is left out of the vote unless nothing else was counted;
    ties go to the lowest class id.
    """
    hist = np.asarray(histogram)
    nuclei = hist[1:]
    if nuclei.sum() <= 0:
        return BACKGROUND, True
    return int(np.argmax(nuclei)) + 1, False


def _records(hists: np.ndarray, areas: np.ndarray) -> list[InstanceRecord]:
    records = []
    for idx in range(1, hists.shape[0]):
        if areas[idx] == 0:
            continue
        cls, bg_only = vote(hists[idx])
        records.append(InstanceRecord(idx, int(areas[idx]), tuple(hists[idx].tolist()), cls, bg_only))
    return records


def _paint(instances: np.ndarray, records: list[InstanceRecord]) -> np.ndarray:
    lut = np.zeros(int(np.max(instances, initial=0)) + 1, dtype=np.uint16)
    for rec in records:
        lut[rec.instance_id] = rec.class_id
    return lut[np.asarray(instances, dtype=np.int64)]


def classify_instances(
    instances: np.ndarray, classes: np.ndarray, n_classes: int = NUM_CLASSES
) -> tuple[list[InstanceRecord], np.ndarray]:
    """Majority-vote class per instance over a hard ClassMap.

    Returns the per-instance records and a ClassMap where every pixel of an
    instance carries that instance's class (0 elsewhere).
    """
    hists = class_histograms(instances, classes, n_classes)
    areas = hists.sum(axis=1)
    records = _records(hists, areas)
    return records, _paint(instances, records)


def classify_instances_soft(
    instances: np.ndarray, class_probs: np.ndarray
) -> tuple[list[InstanceRecord], np.ndarray]:
    """Variant voting with summed class probabilities instead of argmax counts.

    Record histograms hold the summed probabilities rounded to integers and
    are informational only; the vote itself uses the unrounded sums.
    """
    _check_shapes(instances, class_probs)
    ids = np.asarray(instances, dtype=np.int64)
    n_classes = class_probs.shape[-1]
    k = int(ids.max(initial=0))
    sums = np.zeros((k + 1, n_classes))
    for c in range(n_classes):
        sums[:, c] = np.bincount(ids.ravel(), weights=class_probs[..., c].ravel().astype(np.float64), minlength=k + 1)
    areas = np.bincount(ids.ravel(), minlength=k + 1)
    records = []
    for idx in range(1, k + 1):
        if areas[idx] == 0:
            continue
        cls, bg_only = vote(sums[idx])
        records.append(InstanceRecord(idx, int(areas[idx]), tuple(np.rint(sums[idx]).astype(int).tolist()), cls, bg_only))
    return records, _paint(instances, records)


def instance_classes(instances: np.ndarray, classes: np.ndarray, n_classes: int = NUM_CLASSES) -> dict[int, int]:
    """``{instance id: voted class}`` for every instance present."""
    records, _ = classify_instances(instances, classes, n_classes)
    return {r.instance_id: r.class_id for r in records}


def write_records_csv(path: PathLike, records: Sequence[InstanceRecord]) -> None:
    n_classes = len(records[0].histogram) if records else NUM_CLASSES
    names = [CLASS_NAMES[c] if c < len(CLASS_NAMES) else f"class_{c}" for c in range(n_classes)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "area", "class", "background_only", *[f"n_{name}" for name in names]])
        for r in records:
            writer.writerow([r.instance_id, r.area, r.class_id, int(r.background_only), *r.histogram])


def read_records_csv(path: PathLike) -> list[InstanceRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return [
        InstanceRecord(int(row[0]), int(row[1]), tuple(int(x) for x in row[4:]), int(row[2]), bool(int(row[3])))
        for row in rows[1:]
    ]
