"""RoDeO-style scoring: localization, shape and classification sub-scores plus a total.

Predictions and ground truth of an image are paired by a minimum-cost
assignment on spatial affinity alone. For every matched pair three
affinities in [0, 1] are measured:

    loc    exp(-d / sigma), d = center distance / ground-truth diagonal
    shape  IoU after moving the prediction's center onto the ground truth's
    cls    1 if the labels agree else 0

A sub-score is sum(affinity) * 2 / (|preds| + |gts|), i.e. the mean pair
affinity times the matching rate, scaled to [0, 100]. The total is the
harmonic mean of the three sub-scores.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import hmean

from groundkit.errors import MetricError, ValidationError
from groundkit.geometry import PixelBox, center, diagonal, generalized_iou
from groundkit.metrics_map import Detection, GroundTruth

logger = logging.getLogger(__name__)

AGGREGATIONS = ("micro", "macro")


@dataclass(frozen=True)
class RodeoConfig:
    sigma: float = 1.0
    affinity_floor: float = 0.0
    aggregation: str = "micro"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"rodeo.sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.affinity_floor < 1.0:
            raise ValidationError(f"rodeo.affinity_floor must be in [0, 1), got {self.affinity_floor}")
        if self.aggregation not in AGGREGATIONS:
            raise ValidationError(f"rodeo.aggregation must be one of {AGGREGATIONS}, got {self.aggregation!r}")

    def describe(self) -> Dict:
        return {
            "matching_affinity": "max(0, generalized IoU), labels ignored",
            "loc": "exp(-center_distance / gt_diagonal / sigma)",
            "shape": "IoU after aligning centers",
            "cls": "label agreement of matched pairs",
            "matching_rate": "2 * pairs / (preds + gts)",
            "total": "harmonic mean of loc, shape, cls",
            "sigma": self.sigma,
            "affinity_floor": self.affinity_floor,
            "aggregation": self.aggregation,
        }


@dataclass
class RodeoScores:
    r_loc: float = 0.0
    r_shape: float = 0.0
    r_cls: float = 0.0
    r_total: float = 0.0
    matched_pairs: int = 0
    unmatched_preds: int = 0
    unmatched_gts: int = 0
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "r_loc": self.r_loc,
            "r_shape": self.r_shape,
            "r_cls": self.r_cls,
            "r_total": self.r_total,
            "matched_pairs": self.matched_pairs,
            "unmatched_preds": self.unmatched_preds,
            "unmatched_gts": self.unmatched_gts,
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RodeoScores":
        return cls(
            r_loc=float(data["r_loc"]),
            r_shape=float(data["r_shape"]),
            r_cls=float(data["r_cls"]),
            r_total=float(data["r_total"]),
            matched_pairs=int(data.get("matched_pairs", 0)),
            unmatched_preds=int(data.get("unmatched_preds", 0)),
            unmatched_gts=int(data.get("unmatched_gts", 0)),
            notes=list(data.get("notes", [])),
        )


@dataclass
class RodeoAccumulator:
    """Pooled pair affinities and counts; merge is commutative and associative."""
    loc: float = 0.0
    shape: float = 0.0
    cls: float = 0.0
    pairs: int = 0
    preds: int = 0
    gts: int = 0

    def merge(self, other: "RodeoAccumulator") -> "RodeoAccumulator":
        return RodeoAccumulator(
            self.loc + other.loc, self.shape + other.shape, self.cls + other.cls,
            self.pairs + other.pairs, self.preds + other.preds, self.gts + other.gts,
        )

    def scores(self) -> RodeoScores:
        denominator = self.preds + self.gts
        if denominator == 0:
            return RodeoScores()
        r_loc = 100.0 * 2.0 * self.loc / denominator
        r_shape = 100.0 * 2.0 * self.shape / denominator
        r_cls = 100.0 * 2.0 * self.cls / denominator
        return RodeoScores(
            r_loc=min(100.0, r_loc),
            r_shape=min(100.0, r_shape),
            r_cls=min(100.0, r_cls),
            r_total=harmonic_total(min(100.0, r_loc), min(100.0, r_shape), min(100.0, r_cls)),
            matched_pairs=self.pairs,
            unmatched_preds=self.preds - self.pairs,
            unmatched_gts=self.gts - self.pairs,
        )


def harmonic_total(*values: float) -> float:
    if any(v <= 0.0 for v in values):
        return 0.0
    if min(values) == max(values):
        return values[0]
    return float(hmean(values))


def matching_affinity(pred: PixelBox, gt: PixelBox) -> float:
    return max(0.0, generalized_iou(pred, gt))


def loc_affinity(pred: PixelBox, gt: PixelBox, sigma: float = 1.0) -> float:
    (px, py), (gx, gy) = center(pred), center(gt)
    distance = math.hypot(px - gx, py - gy)
    diag = diagonal(gt)
    if diag <= 0.0:
        return 1.0 if distance == 0.0 else 0.0
    return math.exp(-(distance / diag) / sigma)


def shape_affinity(pred: PixelBox, gt: PixelBox) -> float:
    pw, ph = max(0.0, pred.width), max(0.0, pred.height)
    gw, gh = max(0.0, gt.width), max(0.0, gt.height)
    inter = min(pw, gw) * min(ph, gh)
    union = pw * ph + gw * gh - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def match_hungarian(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                    affinity_floor: float = 0.0) -> List[Tuple[int, int]]:
    """Minimum-cost pairing of one image's predictions and ground truths.

    The cost matrix is padded to a square with dummy rows/columns of cost 1
    (affinity 0); pairs whose affinity does not exceed the floor are dropped.
    """
    if not preds or not gts:
        return []
    n = max(len(preds), len(gts))
    affinity = np.zeros((n, n), dtype=np.float64)
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            affinity[i, j] = matching_affinity(p.box, g.box)

    rows, cols = linear_sum_assignment(1.0 - affinity)
    pairs = [
        (int(i), int(j)) for i, j in zip(rows, cols)
        if i < len(preds) and j < len(gts) and affinity[i, j] > affinity_floor
    ]
    return sorted(pairs)


def _accumulate_image(preds: Sequence[Detection], gts: Sequence[GroundTruth], cfg: RodeoConfig) -> RodeoAccumulator:
    pairs = match_hungarian(preds, gts, cfg.affinity_floor)
    acc = RodeoAccumulator(preds=len(preds), gts=len(gts), pairs=len(pairs))
    for i, j in pairs:
        acc.loc += loc_affinity(preds[i].box, gts[j].box, cfg.sigma)
        acc.shape += shape_affinity(preds[i].box, gts[j].box)
        acc.cls += 1.0 if preds[i].label == gts[j].label else 0.0
    return acc


def _by_image(items) -> Dict[str, list]:
    out: Dict[str, list] = {}
    for item in items:
        out.setdefault(item.image_id, []).append(item)
    return out


def rodeo(preds: Sequence[Detection], gts: Sequence[GroundTruth], cfg: RodeoConfig = RodeoConfig()) -> RodeoScores:
    """Score predictions against ground truth, pooled over images (micro) or averaged (macro)."""
    if not gts:
        raise MetricError("no ground truth to evaluate against")

    preds_by_image = _by_image(preds)
    gts_by_image = _by_image(gts)
    image_ids = sorted(set(preds_by_image) | set(gts_by_image))
    accumulators = [
        _accumulate_image(preds_by_image.get(i, []), gts_by_image.get(i, []), cfg) for i in image_ids
    ]

    if cfg.aggregation == "micro":
        pooled = RodeoAccumulator()
        for acc in accumulators:
            pooled = pooled.merge(acc)
        return pooled.scores()

    per_image = [acc.scores() for acc in accumulators]
    totals = RodeoAccumulator()
    for acc in accumulators:
        totals = totals.merge(acc)
    r_loc = float(np.mean([s.r_loc for s in per_image]))
    r_shape = float(np.mean([s.r_shape for s in per_image]))
    r_cls = float(np.mean([s.r_cls for s in per_image]))
    return RodeoScores(
        r_loc=r_loc,
        r_shape=r_shape,
        r_cls=r_cls,
        r_total=harmonic_total(r_loc, r_shape, r_cls),
        matched_pairs=totals.pairs,
        unmatched_preds=totals.preds - totals.pairs,
        unmatched_gts=totals.gts - totals.pairs,
        notes=["macro-averaged over images"],
    )


def rodeo_per_class(preds: Sequence[Detection], gts: Sequence[GroundTruth],
                    cfg: RodeoConfig = RodeoConfig()) -> Dict[str, RodeoScores]:
    """Score each ground-truth class on its own boxes."""
    if not gts:
        raise MetricError("no ground truth to evaluate against")

    gt_classes = sorted({g.label for g in gts})
    skipped = sorted({p.label for p in preds} - set(gt_classes))
    for label in skipped:
        logger.info("rodeo_per_class: skipping %s (no ground truth)", label)

    out: Dict[str, RodeoScores] = {}
    for label in gt_classes:
        scores = rodeo([p for p in preds if p.label == label], [g for g in gts if g.label == label], cfg)
        scores.notes.append("r_cls equals the matching rate within a single class")
        if skipped:
            scores.notes.append(f"skipped prediction classes without ground truth: {', '.join(skipped)}")
        out[label] = scores
    return out
