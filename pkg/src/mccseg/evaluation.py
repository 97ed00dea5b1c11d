"""IoU metrics with per-image averaging, and Table-style CSV reports."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .taxonomy import CANONICAL, ClassTaxonomy

logger = logging.getLogger(__name__)

REPORT_CLASSES = ("urban", "open_area", "water", "forest")
REPORT_HEADER = (
    ["source_dataset", "transfer_method", "miou"]
    + [f"iou_{c}" for c in REPORT_CLASSES]
    + ["iou_building"]
)
URBAN_SPLIT = "urban_test"


class NoDefinedClassError(ValueError):
    """No non-unknown class has a defined IoU in this image."""


@dataclass
class ClassCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    def __add__(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int, unknown_index: int = 0) -> ClassCounts:
    """Per-class TP/FP/FN, ignoring every pixel whose ground truth is unknown."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    keep = gt != unknown_index
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    # joint histogram: rows = gt, cols = pred
    joint = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    joint = joint.reshape(num_classes, num_classes)
    tp = np.diag(joint).copy()
    return ClassCounts(tp=tp, fp=joint.sum(axis=0) - tp, fn=joint.sum(axis=1) - tp)


def iou_per_class(counts: ClassCounts) -> np.ndarray:
    """TP / (TP + FP + FN) per class; NaN marks a class with empty union."""
    union = counts.tp + counts.fp + counts.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, counts.tp / np.maximum(union, 1), np.nan)


def image_mean_iou(per_class: np.ndarray, unknown_index: int = 0) -> float:
    values = [v for c, v in enumerate(per_class) if c != unknown_index and not math.isnan(v)]
    if not values:
        raise NoDefinedClassError("no class other than unknown has a defined IoU")
    return float(np.mean(values))


@dataclass
class ImageResult:
    id: str
    per_class: list  # float or None per class index
    miou: float


@dataclass
class EvalReport:
    images: list[ImageResult]
    miou: float
    per_class: list  # dataset mean per class, None where never defined
    taxonomy: tuple[str, ...] = CANONICAL.names
    unknown_index: int = 0
    metadata: dict = field(default_factory=dict)
    excluded: list[str] = field(default_factory=list)

    def class_iou(self, name: str) -> Optional[float]:
        if name not in self.taxonomy:
            return None
        return self.per_class[self.taxonomy.index(name)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["images"] = [ImageResult(**r) for r in d["images"]]
        d["taxonomy"] = tuple(d["taxonomy"])
        return cls(**d)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _nan_to_none(values) -> list:
    return [None if math.isnan(v) else float(v) for v in values]


def evaluate_dataset(
    predictions: Sequence[tuple[str, np.ndarray]],
    ground_truth: Sequence[tuple[str, np.ndarray]],
    taxonomy: ClassTaxonomy = CANONICAL,
    metadata: Optional[dict] = None,
) -> EvalReport:
    """Score every image, then average image mIoUs (not pooled pixels) over the set."""
    preds = dict(predictions)
    missing = [i for i, _ in ground_truth if i not in preds]
    if missing:
        raise KeyError(f"missing prediction for image(s) {missing}")
    extra = sorted(set(preds) - {i for i, _ in ground_truth})
    if extra:
        raise KeyError(f"prediction(s) without ground truth: {extra}")

    c = len(taxonomy)
    images, excluded = [], []
    for image_id, gt in ground_truth:
        ious = iou_per_class(confusion_counts(preds[image_id], gt, c, taxonomy.unknown_index))
        try:
            miou = image_mean_iou(ious, taxonomy.unknown_index)
        except NoDefinedClassError:
            logger.info("image %s excluded: no defined class", image_id)
            excluded.append(image_id)
            continue
        images.append(ImageResult(image_id, _nan_to_none(ious), miou))

    per_class = []
    for k in range(c):
        vals = [r.per_class[k] for r in images if r.per_class[k] is not None]
        per_class.append(float(np.mean(vals)) if vals and k != taxonomy.unknown_index else None)
    miou = float(np.mean([r.miou for r in images])) if images else float("nan")
    return EvalReport(images, miou, per_class, taxonomy.names, taxonomy.unknown_index,
                      dict(metadata or {}), excluded)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None or math.isnan(v) else f"{v:.4f}"


def emit_report(reports: Sequence[EvalReport], path: Union[str, Path]) -> Path:
    """Write one CSV row per (source dataset, transfer method).

    A report whose ``metadata["split"]`` is ``urban_test`` fills the
    ``iou_building`` column (its urban-class IoU) of the row it shares a key
    with; any other report fills the remaining columns.
    """
    if not reports:
        raise ValueError("no reports to emit")
    rows: dict[tuple, dict] = {}
    for rep in reports:
        key = (str(rep.metadata.get("source", "none")), str(rep.metadata.get("regime", "")))
        split = rep.metadata.get("split", "test")
        slot = "urban" if split == URBAN_SPLIT else "main"
        row = rows.setdefault(key, {})
        if slot in row:
            raise ValueError(f"duplicate row key {key} for split {split!r}")
        row[slot] = rep

    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for (source, regime), row in rows.items():
            main = row.get("main")
            urban = row.get("urban")
            cells = [source, regime, _fmt(main.miou if main else None)]
            cells += [_fmt(main.class_iou(c) if main else None) for c in REPORT_CLASSES]
            cells.append(_fmt(urban.class_iou("urban") if urban else None))
            writer.writerow(cells)
    return path
