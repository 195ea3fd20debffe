"""Average precision at fixed IoU thresholds and the mAP50 / mAP75 / mAP50:95 aggregates."""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from groundkit.errors import MetricError
from groundkit.geometry import PixelBox, iou_matrix

logger = logging.getLogger(__name__)

INTERPOLATIONS = ("101pt", "cont")
THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


def threshold_key(thr: float) -> str:
    return f"{thr:.2f}"


@dataclass(frozen=True)
class Detection:
    image_id: str
    label: str
    box: PixelBox
    confidence: float = 1.0

    def __post_init__(self):
        if math.isnan(self.confidence) or not 0.0 <= self.confidence <= 1.0:
            raise MetricError(f"confidence {self.confidence} outside [0, 1] ({self.image_id}/{self.label})")
        if self.box.has_nan() or self.box.x0 > self.box.x1 or self.box.y0 > self.box.y1:
            raise MetricError(f"invalid box {self.box.as_tuple()} ({self.image_id}/{self.label})")

    def rank_key(self) -> Tuple:
        return (-self.confidence, self.box.as_tuple(), self.image_id)


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    label: str
    box: PixelBox


@dataclass
class APResult:
    per_class_ap: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    map_by_threshold: Dict[str, float] = field(default_factory=dict)
    map50: float = 0.0
    map75: float = 0.0
    map50_95: float = 0.0
    metadata: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "per_class_ap": {c: dict(v) for c, v in sorted(self.per_class_ap.items())},
            "map_by_threshold": dict(self.map_by_threshold),
            "map50": self.map50,
            "map75": self.map75,
            "map50_95": self.map50_95,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "APResult":
        return cls(
            per_class_ap={c: dict(v) for c, v in data.get("per_class_ap", {}).items()},
            map_by_threshold=dict(data.get("map_by_threshold", {})),
            map50=float(data["map50"]),
            map75=float(data["map75"]),
            map50_95=float(data["map50_95"]),
            metadata=dict(data.get("metadata", {})),
        )


def sort_detections(dets: Iterable[Detection]) -> List[Detection]:
    """Descending confidence; ties broken by box coordinates, then image id."""
    return sorted(dets, key=Detection.rank_key)


def match_greedy(dets: Sequence[Detection], gts: Sequence[PixelBox], iou_thr: float,
                 ious: Optional[np.ndarray] = None) -> List[bool]:
    """TP/FP flags for one image and class; dets must already be in rank order.

    Each detection takes the highest-IoU ground truth still unmatched, provided
    the IoU reaches iou_thr.
    """
    if ious is None:
        ious = iou_matrix([d.box for d in dets], gts)
    taken = np.zeros(len(gts), dtype=bool)
    flags = []
    for i in range(len(dets)):
        if len(gts) == 0:
            flags.append(False)
            continue
        candidates = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(candidates))
        if candidates[j] >= iou_thr:
            taken[j] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int, interpolation: str = "101pt") -> Optional[float]:
    """AP from rank-ordered TP flags. None means the class takes no part in averaging."""
    if interpolation not in INTERPOLATIONS:
        raise MetricError(f"unknown interpolation {interpolation!r}")
    if num_gt < 0:
        raise MetricError("num_gt must be nonnegative")
    if num_gt == 0:
        return 0.0 if len(flags) else None
    if len(flags) == 0:
        return 0.0

    tp = np.cumsum(np.asarray(flags, dtype=np.int64))
    ranks = np.arange(1, len(flags) + 1)
    precision = tp / ranks
    # envelope: best precision at this rank or any later one
    envelope = np.maximum.accumulate(precision[::-1])[::-1]

    if interpolation == "cont":
        recall = tp / num_gt
        steps = np.diff(np.concatenate(([0.0], recall)))
        return float(np.sum(steps * envelope))

    # 101-point grid r = k/100, compared in integers: tp/num_gt >= k/100
    total = 0.0
    for k in range(101):
        reached = np.nonzero(100 * tp >= k * num_gt)[0]
        if len(reached):
            total += envelope[reached[0]]
    return float(total / 101)


def _group(items, key) -> Dict:
    out: Dict = {}
    for item in items:
        out.setdefault(key(item), []).append(item)
    return out


def class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], thresholds: Sequence[float] = THRESHOLDS,
             interpolation: str = "101pt") -> Dict[str, Optional[float]]:
    """AP of one class at each threshold."""
    ranked = sort_detections(dets)
    gts_by_image = _group(gts, lambda g: g.image_id)
    # positions in the class-wide ranking, grouped per image
    positions_by_image = _group(range(len(ranked)), lambda i: ranked[i].image_id)

    ious_by_image = {
        image_id: iou_matrix([ranked[i].box for i in positions], [g.box for g in gts_by_image.get(image_id, [])])
        for image_id, positions in positions_by_image.items()
    }

    out = {}
    for thr in thresholds:
        flags = [False] * len(ranked)
        for image_id, positions in positions_by_image.items():
            image_dets = [ranked[i] for i in positions]
            gt_boxes = [g.box for g in gts_by_image.get(image_id, [])]
            image_flags = match_greedy(image_dets, gt_boxes, thr, ious_by_image[image_id])
            for i, flag in zip(positions, image_flags):
                flags[i] = flag
        out[threshold_key(thr)] = average_precision(flags, len(gts), interpolation)
    return out


def map_suite(dets: Sequence[Detection], gts: Sequence[GroundTruth], interpolation: str = "101pt",
              thresholds: Sequence[float] = THRESHOLDS) -> APResult:
    """Per-class AP at every threshold and the unweighted class means."""
    if not gts:
        raise MetricError("no ground truth to evaluate against")

    gts_by_class = _group(gts, lambda g: g.label)
    dets_by_class = _group(dets, lambda d: d.label)
    extra = sorted(set(dets_by_class) - set(gts_by_class))
    if extra:
        logger.warning("Detections for classes absent from ground truth are ignored in the mean: %s", ", ".join(extra))

    result = APResult()
    for label in sorted(set(gts_by_class) | set(dets_by_class)):
        result.per_class_ap[label] = class_ap(
            dets_by_class.get(label, []), gts_by_class.get(label, []), thresholds, interpolation,
        )

    evaluated = sorted(gts_by_class)
    for thr in thresholds:
        key = threshold_key(thr)
        values = [result.per_class_ap[label][key] for label in evaluated]
        result.map_by_threshold[key] = float(np.mean(values))

    result.map50 = result.map_by_threshold.get("0.50", 0.0)
    result.map75 = result.map_by_threshold.get("0.75", 0.0)
    result.map50_95 = float(np.mean([result.map_by_threshold[threshold_key(t)] for t in thresholds]))
    result.metadata = {
        "interpolation": interpolation,
        "thresholds": [threshold_key(t) for t in thresholds],
        "tie_break": "confidence desc, box lexicographic, image id",
        "class_mean": "unweighted over classes present in ground truth",
        "classes_evaluated": evaluated,
        "classes_ignored": extra,
    }
    return result
