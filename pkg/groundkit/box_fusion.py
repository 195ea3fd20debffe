"""Weighted box fusion for consolidating multi-annotator boxes.

Per label, boxes are visited by descending score and join the first cluster
whose running fused box overlaps them by at least iou_threshold. A cluster's
box is the score-weighted mean of its members.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple
import logging
import math

import numpy as np

from groundkit.errors import FusionError, ValidationError
from groundkit.geometry import PixelBox, area, iou

logger = logging.getLogger(__name__)

SCORE_MODES = ("mean", "max")


@dataclass(frozen=True)
class ScoredBox:
    box: PixelBox
    label: str
    score: float = 1.0
    source: Optional[str] = None

    def __post_init__(self):
        if not self.label:
            raise FusionError("box label must be nonempty")
        if math.isnan(self.score) or self.box.has_nan():
            raise FusionError(f"NaN in box {self.box.as_tuple()} score {self.score} ({self.label})")
        if not 0.0 <= self.score <= 1.0:
            raise FusionError(f"score {self.score} outside [0, 1] for {self.label}")

    def sort_key(self) -> Tuple:
        return (-self.score, self.label, self.box.as_tuple(), self.source or "")


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.55
    score_mode: str = "mean"
    skip_degenerate: bool = True

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValidationError(f"fusion.iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.score_mode not in SCORE_MODES:
            raise ValidationError(f"fusion.score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")


@dataclass
class _Cluster:
    members: List[ScoredBox] = field(default_factory=list)
    fused: Optional[PixelBox] = None

    def add(self, member: ScoredBox):
        self.members.append(member)
        coords = np.array([m.box.as_tuple() for m in self.members], dtype=np.float64)
        weights = np.array([m.score for m in self.members], dtype=np.float64)
        if weights.sum() <= 0.0:
            weights = np.ones_like(weights)
        fused = np.average(coords, axis=0, weights=weights)
        # the weighted mean must stay inside the members' span
        fused = np.clip(fused, coords.min(axis=0), coords.max(axis=0))
        self.fused = PixelBox(*(float(v) for v in fused))

    def score(self, mode: str) -> float:
        scores = [m.score for m in self.members]
        if mode == "max":
            return max(scores)
        return float(np.mean(scores))


def _fuse_label(boxes: List[ScoredBox], cfg: FusionConfig) -> List[ScoredBox]:
    clusters: List[_Cluster] = []
    for candidate in sorted(boxes, key=ScoredBox.sort_key):
        for cluster in clusters:
            if iou(cluster.fused, candidate.box) >= cfg.iou_threshold:
                cluster.add(candidate)
                break
        else:
            cluster = _Cluster()
            cluster.add(candidate)
            clusters.append(cluster)

    label = boxes[0].label
    return [ScoredBox(c.fused, label, c.score(cfg.score_mode)) for c in clusters]


def is_degenerate(box: PixelBox) -> bool:
    return area(box) == 0.0


def fuse(boxes: Sequence[ScoredBox], cfg: FusionConfig = FusionConfig()) -> List[ScoredBox]:
    """Fuse overlapping same-label boxes; output sorted by score, label, coordinates."""
    by_label: Dict[str, List[ScoredBox]] = {}
    dropped = 0
    for b in boxes:
        if cfg.skip_degenerate and is_degenerate(b.box):
            dropped += 1
            continue
        by_label.setdefault(b.label, []).append(b)

    if dropped:
        logger.warning("Dropped %d degenerate (zero-area) boxes before fusion", dropped)

    fused: List[ScoredBox] = []
    for label in sorted(by_label):
        fused.extend(_fuse_label(by_label[label], cfg))
    return sorted(fused, key=ScoredBox.sort_key)


def fuse_annotations(groups: Mapping[str, Sequence[ScoredBox]], cfg: FusionConfig = FusionConfig(),
                     workers: int = 1) -> Dict[str, List[ScoredBox]]:
    """Fuse each image's boxes independently; keys are image ids."""

    def fuse_image(image_id: str) -> List[ScoredBox]:
        try:
            return fuse(groups[image_id], cfg)
        except FusionError as e:
            raise FusionError(f"image {image_id}: {e}")

    image_ids = sorted(groups)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fuse_image, image_ids))
    else:
        results = [fuse_image(image_id) for image_id in image_ids]
    return dict(zip(image_ids, results))
