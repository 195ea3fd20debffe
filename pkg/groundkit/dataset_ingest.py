"""Annotation loading, grounding-pair construction, splits and zero-shot partitions."""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
import csv
import json
import logging
import math

import numpy as np

from groundkit.box_fusion import FusionConfig, ScoredBox, fuse
from groundkit.errors import DatasetError, InputFileError, ValidationError
from groundkit.geometry import ImageDims, PixelBox, validate_box
from groundkit.knowledge_prompts import (
    DEFAULT_KNOWLEDGE_TEMPLATE, DEFAULT_LABEL_TEMPLATE, KNOWLEDGE, LABEL_ONLY,
    KnowledgeDescription, build_grounding_prompt,
)
from groundkit.token_codec import DEFAULT_CODEC, CodecConfig, TokenQuad, encode_box, parse_token

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("image_id", "width", "height", "label", "x0", "y0", "x1", "y1", "annotator")
FORMATS = ("csv", "coco_json")
SPLITS = ("train", "test")
PARTITIONS = ("in_domain", "known", "unknown")
DEFAULT_NO_FINDING = ("No finding",)


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    dims: ImageDims
    label: str
    box: Optional[PixelBox] = None  # None marks an image-level record such as "No finding"
    annotator: Optional[str] = None
    score: Optional[float] = None

    def __post_init__(self):
        if not self.image_id or not self.label:
            raise DatasetError("annotation needs an image id and a label")
        if self.box is not None:
            report = validate_box(self.box, self.dims)
            if not report.valid:
                raise DatasetError(f"invalid box {self.box.as_tuple()} for {self.dims}: {', '.join(report.violations)}")


@dataclass(frozen=True)
class GroundingSample:
    image_id: str
    dims: ImageDims
    prompt: str
    label: str
    gt_boxes: Tuple[PixelBox, ...]
    gt_quads: Tuple[TokenQuad, ...]
    split: Optional[str] = None
    partition: str = "in_domain"

    def __post_init__(self):
        if not self.gt_boxes:
            raise DatasetError(f"sample {self.image_id}/{self.label} has no boxes")
        if len(self.gt_boxes) != len(self.gt_quads):
            raise DatasetError(f"sample {self.image_id}/{self.label}: {len(self.gt_boxes)} boxes but {len(self.gt_quads)} quads")
        if self.split is not None and self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        if self.partition not in PARTITIONS:
            raise DatasetError(f"unknown partition {self.partition!r}")

    @property
    def key(self) -> Tuple[str, str]:
        return (self.image_id, self.label)

    def to_dict(self) -> Dict:
        return {
            "image_id": self.image_id,
            "width": self.dims.width,
            "height": self.dims.height,
            "label": self.label,
            "prompt": self.prompt,
            "boxes": [list(b.as_tuple()) for b in self.gt_boxes],
            "tokens": [str(q) for q in self.gt_quads],
            "split": self.split,
            "partition": self.partition,
        }

    @classmethod
    def from_dict(cls, data: Mapping, codec: CodecConfig = DEFAULT_CODEC) -> "GroundingSample":
        quads = []
        for text in data["tokens"]:
            bins = [parse_token(t, codec).bin for t in text.split()]
            quads.append(TokenQuad.of(*bins))
        return cls(
            image_id=str(data["image_id"]),
            dims=ImageDims(int(data["width"]), int(data["height"])),
            prompt=data["prompt"],
            label=data["label"],
            gt_boxes=tuple(PixelBox(*map(float, b)) for b in data["boxes"]),
            gt_quads=tuple(quads),
            split=data.get("split"),
            partition=data.get("partition", "in_domain"),
        )


@dataclass(frozen=True)
class Reject:
    ref: str
    reason: str

    def __str__(self):
        return f"{self.ref}: {self.reason}"


@dataclass
class LoadResult:
    records: List[AnnotationRecord] = field(default_factory=list)
    rejects: List[Reject] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.records) + len(self.rejects)

    @property
    def reject_ratio(self) -> float:
        return len(self.rejects) / self.total if self.total else 0.0


# Loading

def _read_csv(path: Path) -> LoadResult:
    result = LoadResult()
    dims_seen: Dict[str, ImageDims] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise InputFileError(f"{path}: missing header row")
        missing = [c for c in CSV_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise InputFileError(f"{path}: header lacks columns {missing}")

        for row in reader:
            ref = f"line {reader.line_num}"
            try:
                dims = ImageDims(int(row["width"]), int(row["height"]))
            except (TypeError, ValueError, ValidationError):
                result.rejects.append(Reject(ref, f"bad image dimensions {row['width']!r}x{row['height']!r}"))
                continue
            image_id = (row["image_id"] or "").strip()
            if image_id in dims_seen and dims_seen[image_id] != dims:
                result.rejects.append(Reject(ref, f"dimensions {dims} disagree with {dims_seen[image_id]} for {image_id}"))
                continue
            dims_seen[image_id] = dims

            cells = [(row[c] or "").strip() for c in ("x0", "y0", "x1", "y1")]
            box = None
            if any(cells):
                try:
                    box = PixelBox(*(float(c) for c in cells))
                except ValueError:
                    result.rejects.append(Reject(ref, f"non-numeric box {cells}"))
                    continue
            score = (row.get("score") or "").strip()
            try:
                result.records.append(AnnotationRecord(
                    image_id=image_id,
                    dims=dims,
                    label=(row["label"] or "").strip(),
                    box=box,
                    annotator=(row["annotator"] or "").strip() or None,
                    score=float(score) if score else None,
                ))
            except (DatasetError, ValueError) as e:
                result.rejects.append(Reject(ref, str(e)))
    return result


def _read_coco(path: Path) -> LoadResult:
    with open(path, encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise InputFileError(f"{path}: {e}")

    images: Dict[str, ImageDims] = {}
    for entry in data.get("images", []):
        if "width" not in entry or "height" not in entry:
            raise InputFileError(f"{path}: image {entry.get('id')} has no width/height")
        images[str(entry["id"])] = ImageDims(int(entry["width"]), int(entry["height"]))
    categories = {c["id"]: c["name"] for c in data.get("categories", [])}

    result = LoadResult()
    for index, ann in enumerate(data.get("annotations", [])):
        ref = f"annotation {ann.get('id', index)}"
        image_id = str(ann.get("image_id"))
        if image_id not in images:
            result.rejects.append(Reject(ref, f"unknown image {image_id}"))
            continue
        if ann.get("category_id") not in categories:
            result.rejects.append(Reject(ref, f"unknown category {ann.get('category_id')}"))
            continue
        bbox = ann.get("bbox")
        try:
            box = PixelBox.from_xywh(*(float(v) for v in bbox)) if bbox else None
            annotator = ann.get("annotator")
            result.records.append(AnnotationRecord(
                image_id=image_id,
                dims=images[image_id],
                label=categories[ann["category_id"]],
                box=box,
                annotator=str(annotator) if annotator is not None else None,
                score=float(ann["score"]) if "score" in ann else None,
            ))
        except (TypeError, ValueError, DatasetError) as e:
            result.rejects.append(Reject(ref, str(e)))
    return result


def load_annotations(path, fmt: Optional[str] = None) -> LoadResult:
    """Read a CSV or COCO-style annotation file; malformed entries become rejects."""
    path = Path(path)
    if fmt is None:
        fmt = "coco_json" if path.suffix.lower() == ".json" else "csv"
    if fmt not in FORMATS:
        raise InputFileError(f"unknown annotation format {fmt!r}; expected one of {FORMATS}")
    if not path.is_file():
        raise InputFileError(f"annotation file not found: {path}")

    try:
        result = _read_csv(path) if fmt == "csv" else _read_coco(path)
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e}")

    logger.info("Loaded %d records from %s (%d rejects)", len(result.records), path, len(result.rejects))
    for reject in result.rejects:
        logger.warning("Rejected %s", reject)
    return result


# Pair construction

def _lookup_description(label: str, descriptions: Mapping[str, KnowledgeDescription]) -> Optional[KnowledgeDescription]:
    return descriptions.get(label.casefold())


def build_pairs(records: Sequence[AnnotationRecord], fusion: FusionConfig = FusionConfig(),
                mode: str = LABEL_ONLY, descriptions: Optional[Mapping[str, KnowledgeDescription]] = None,
                codec: CodecConfig = DEFAULT_CODEC, no_finding_labels: Iterable[str] = DEFAULT_NO_FINDING,
                label_template: str = DEFAULT_LABEL_TEMPLATE,
                knowledge_template: str = DEFAULT_KNOWLEDGE_TEMPLATE,
                workers: int = 1) -> List[GroundingSample]:
    """One sample per (image, label) that keeps at least one fused box."""
    skip = {label.casefold() for label in no_finding_labels}
    descriptions = {k.casefold(): v for k, v in (descriptions or {}).items()}

    by_image: Dict[str, List[AnnotationRecord]] = {}
    for record in records:
        if record.box is None or record.label.casefold() in skip:
            continue
        by_image.setdefault(record.image_id, []).append(record)

    if mode == KNOWLEDGE:
        labels = {r.label for group in by_image.values() for r in group}
        lacking = sorted(l for l in labels if _lookup_description(l, descriptions) is None)
        if lacking:
            raise DatasetError(f"no knowledge description for labels: {', '.join(lacking)}")

    def build_image(image_id: str) -> List[GroundingSample]:
        group = by_image[image_id]
        dims = group[0].dims
        scored = [ScoredBox(r.box, r.label, 1.0 if r.score is None else r.score, r.annotator) for r in group]
        try:
            fused = fuse(scored, fusion)
        except ValidationError as e:
            raise DatasetError(f"image {image_id}: {e}")

        per_label: Dict[str, List[PixelBox]] = {}
        for box in fused:
            per_label.setdefault(box.label, []).append(box.box)

        samples = []
        for label in sorted(per_label):
            boxes = sorted(per_label[label], key=PixelBox.as_tuple)
            prompt = build_grounding_prompt(
                label, _lookup_description(label, descriptions), mode, label_template, knowledge_template,
            )
            samples.append(GroundingSample(
                image_id=image_id,
                dims=dims,
                prompt=prompt,
                label=label,
                gt_boxes=tuple(boxes),
                gt_quads=tuple(encode_box(b, dims, codec) for b in boxes),
            ))
        return samples

    image_ids = sorted(by_image)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(build_image, image_ids))
    else:
        chunks = [build_image(image_id) for image_id in image_ids]

    samples = sorted((s for chunk in chunks for s in chunk), key=lambda s: s.key)
    logger.info("Built %d grounding pairs from %d images", len(samples), len(image_ids))
    return samples


# Splits and partitions

def split_samples(samples: Sequence[GroundingSample], ratio: float = 0.8, seed: int = 0,
                  train_ids: Optional[Iterable[str]] = None,
                  test_ids: Optional[Iterable[str]] = None) -> Tuple[List[GroundingSample], List[GroundingSample]]:
    """Split by image so all pairs of an image land on the same side."""
    image_ids = sorted({s.image_id for s in samples})
    known = set(image_ids)

    if train_ids is not None or test_ids is not None:
        train_set = set(train_ids or ())
        test_set = set(test_ids or ())
        unknown = sorted((train_set | test_set) - known)
        if unknown:
            raise DatasetError(f"split lists reference unknown images: {', '.join(unknown)}")
        overlap = sorted(train_set & test_set)
        if overlap:
            raise DatasetError(f"images listed in both splits: {', '.join(overlap)}")
        if train_ids is None:
            train_set = known - test_set
        elif test_ids is None:
            test_set = known - train_set
        unassigned = sorted(known - train_set - test_set)
        if unassigned:
            raise DatasetError(f"images missing from split lists: {', '.join(unassigned)}")
    else:
        if not 0.0 <= ratio <= 1.0:
            raise DatasetError(f"split ratio must be in [0, 1], got {ratio}")
        order = np.random.default_rng(seed).permutation(len(image_ids))
        n_train = int(math.floor(ratio * len(image_ids) + 0.5))
        train_set = {image_ids[i] for i in order[:n_train]}
        test_set = known - train_set

    train = [replace(s, split="train") for s in samples if s.image_id in train_set]
    test = [replace(s, split="test") for s in samples if s.image_id in test_set]
    logger.info("Split %d images: %d train / %d test", len(image_ids), len(train_set), len(test_set))
    return sorted(train, key=lambda s: s.key), sorted(test, key=lambda s: s.key)


def normalize_label(label: str, aliases: Optional[Mapping[str, str]] = None) -> str:
    folded = label.strip().casefold()
    if aliases:
        table = {k.strip().casefold(): v.strip().casefold() for k, v in aliases.items()}
        folded = table.get(folded, folded)
    return folded


def partition_zero_shot(samples: Sequence[GroundingSample], known_classes: Sequence[str],
                        aliases: Optional[Mapping[str, str]] = None) -> Tuple[List[GroundingSample], List[GroundingSample]]:
    """Tag samples whose label overlaps the training vocabulary as known, the rest as unknown."""
    if not known_classes:
        raise DatasetError("known_classes must be nonempty")
    vocabulary = {normalize_label(c, aliases) for c in known_classes}

    known, unknown = [], []
    for s in samples:
        if normalize_label(s.label, aliases) in vocabulary:
            known.append(replace(s, partition="known"))
        else:
            unknown.append(replace(s, partition="unknown"))
    logger.info("Zero-shot partition: %d known / %d unknown", len(known), len(unknown))
    return known, unknown


# Files and statistics

def write_samples(path, samples: Sequence[GroundingSample]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for s in sorted(samples, key=lambda s: s.key):
            f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    return path


def read_samples(path, codec: CodecConfig = DEFAULT_CODEC) -> List[GroundingSample]:
    """Read a samples file; tokens are checked against the codec that wrote them."""
    path = Path(path)
    samples = []
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    samples.append(GroundingSample.from_dict(json.loads(line), codec))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise InputFileError(f"{path} line {line_no}: {e}")
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e}")
    return samples


def dataset_stats(samples: Sequence[GroundingSample]) -> Dict:
    per_class: Dict[str, Dict[str, int]] = {}
    per_split: Dict[str, Dict[str, int]] = {}
    for s in samples:
        entry = per_class.setdefault(s.label, {"samples": 0, "boxes": 0})
        entry["samples"] += 1
        entry["boxes"] += len(s.gt_boxes)
        split = per_split.setdefault(s.split or "unsplit", {"samples": 0, "images": 0})
        split["samples"] += 1

    for split_name in per_split:
        per_split[split_name]["images"] = len({s.image_id for s in samples if (s.split or "unsplit") == split_name})

    partitions: Dict[str, int] = {}
    for s in samples:
        partitions[s.partition] = partitions.get(s.partition, 0) + 1

    return {
        "samples": len(samples),
        "images": len({s.image_id for s in samples}),
        "boxes": sum(len(s.gt_boxes) for s in samples),
        "per_class": dict(sorted(per_class.items())),
        "per_split": dict(sorted(per_split.items())),
        "partitions": dict(sorted(partitions.items())),
    }
