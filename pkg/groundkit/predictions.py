"""Prediction and ground-truth files shared by both metric suites.

Predictions are JSON lines, one record per line, with image_id, label, an
optional confidence (default 1.0) and the geometry in one of these forms:

    "box": [x0, y0, x1, y1]               pixel corners
    "x0": .., "y0": .., "x1": .., "y1": ..  pixel corners as fields
    "tokens": ["<loc_a>", .. 4 tokens]     location tokens (or one string)
    "boxes": [[x0, y0, x1, y1], ..]        several boxes (a samples file)

Token geometry is decoded with the image size taken from the ground truth.
"""
from typing import Dict, List, Optional, Sequence, Tuple
import json
import logging
from pathlib import Path

from groundkit.dataset_ingest import GroundingSample
from groundkit.errors import InputFileError, MetricError, TokenParseError
from groundkit.geometry import ImageDims, PixelBox
from groundkit.metrics_map import Detection, GroundTruth
from groundkit.token_codec import DEFAULT_CODEC, CodecConfig, parse_sequence, split_tokens

logger = logging.getLogger(__name__)


def ground_truth_from_samples(samples: Sequence[GroundingSample]) -> Tuple[List[GroundTruth], Dict[str, ImageDims]]:
    gts = [GroundTruth(s.image_id, s.label, b) for s in samples for b in s.gt_boxes]
    dims = {s.image_id: s.dims for s in samples}
    return gts, dims


def _record_boxes(record: Dict, dims: Optional[ImageDims], codec: CodecConfig, policy: str, ref: str) -> List[PixelBox]:
    if "boxes" in record:
        return [PixelBox(*map(float, b)) for b in record["boxes"]]
    if "box" in record:
        return [PixelBox(*map(float, record["box"]))]
    if all(k in record for k in ("x0", "y0", "x1", "y1")):
        return [PixelBox(float(record["x0"]), float(record["y0"]), float(record["x1"]), float(record["y1"]))]
    if "tokens" in record:
        if dims is None:
            raise MetricError(f"{ref}: token geometry needs image dimensions for {record.get('image_id')}")
        tokens = record["tokens"]
        if isinstance(tokens, str):
            tokens = split_tokens(tokens)
        parsed = parse_sequence(tokens, dims, policy, codec)
        for diagnostic in parsed.diagnostics:
            logger.warning("%s: %s", ref, diagnostic)
        return parsed.boxes
    raise MetricError(f"{ref}: no box, coordinates or tokens")


def load_predictions(path, dims_by_image: Dict[str, ImageDims], codec: CodecConfig = DEFAULT_CODEC,
                     policy: Optional[str] = None) -> List[Detection]:
    """Read a predictions file into detections; lines for unknown images are skipped."""
    path = Path(path)
    policy = policy or codec.policy
    detections: List[Detection] = []
    skipped = 0
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                ref = f"{path.name} line {line_no}"
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise InputFileError(f"{ref}: {e}")

                if not isinstance(record, dict):
                    raise InputFileError(f"{ref}: expected a JSON object, got {type(record).__name__}")

                image_id = str(record.get("image_id", ""))
                if image_id not in dims_by_image:
                    skipped += 1
                    continue
                if record.get("label") is None:
                    raise MetricError(f"{ref}: missing label")
                try:
                    confidence = float(record.get("confidence", 1.0))
                    boxes = _record_boxes(record, dims_by_image[image_id], codec, policy, ref)
                except TokenParseError as e:
                    raise TokenParseError(f"{ref}: {e}")
                except (TypeError, ValueError) as e:
                    raise MetricError(f"{ref}: {e}")
                for box in boxes:
                    detections.append(Detection(image_id, str(record["label"]), box, confidence))
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e}")

    if skipped:
        logger.warning("Skipped %d prediction lines for images absent from the ground truth", skipped)
    return detections


def vocabulary_gap(detections: Sequence[Detection], gts: Sequence[GroundTruth]) -> Tuple[List[str], List[str]]:
    """Labels only in predictions, and labels only in ground truth."""
    predicted = {d.label for d in detections}
    expected = {g.label for g in gts}
    return sorted(predicted - expected), sorted(expected - predicted)
