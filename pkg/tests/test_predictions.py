import json

import pytest

from groundkit.errors import InputFileError, MetricError, TokenParseError
from groundkit.geometry import ImageDims, PixelBox
from groundkit.metrics_map import Detection, GroundTruth
from groundkit.predictions import load_predictions, vocabulary_gap
from groundkit.token_codec import STRICT

DIMS = {"i1": ImageDims(512, 512), "i2": ImageDims(1000, 500)}


def write_lines(tmp_path, records):
    path = tmp_path / "preds.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def test_geometry_forms(tmp_path):
    path = write_lines(tmp_path, [
        {"image_id": "i1", "label": "a", "box": [0, 0, 10, 10], "confidence": 0.4},
        {"image_id": "i1", "label": "a", "x0": 1, "y0": 2, "x1": 3, "y1": 4},
        {"image_id": "i1", "label": "b", "tokens": ["<loc_250>", "<loc_250>", "<loc_750>", "<loc_750>"]},
        {"image_id": "i2", "label": "b", "tokens": "b<loc_0><loc_0><loc_500><loc_1000>"},
        {"image_id": "i2", "label": "c", "boxes": [[0, 0, 5, 5], [10, 10, 20, 20]]},
    ])
    dets = load_predictions(path, DIMS)
    assert dets[0] == Detection("i1", "a", PixelBox(0, 0, 10, 10), 0.4)
    assert dets[1].box == PixelBox(1, 2, 3, 4) and dets[1].confidence == 1.0
    assert dets[2].box == PixelBox(128, 128, 384, 384)
    assert dets[3].box == PixelBox(0, 0, 500, 500)
    assert [d.label for d in dets[4:]] == ["c", "c"]


def test_unknown_images_skipped(tmp_path):
    path = write_lines(tmp_path, [{"image_id": "zzz", "label": "a", "box": [0, 0, 1, 1]}])
    assert load_predictions(path, DIMS) == []


def test_strict_token_failure(tmp_path):
    path = write_lines(tmp_path, [{"image_id": "i1", "label": "a", "tokens": ["<loc_0>", "<loc_0>", "<loc_9>"]}])
    with pytest.raises(TokenParseError, match="line 1"):
        load_predictions(path, DIMS, policy=STRICT)
    assert load_predictions(path, DIMS) == []


def test_bad_lines(tmp_path):
    path = tmp_path / "broken.jsonl"
    path.write_text("{not json\n", encoding="utf-8")
    with pytest.raises(InputFileError):
        load_predictions(path, DIMS)
    with pytest.raises(MetricError):
        load_predictions(write_lines(tmp_path, [{"image_id": "i1", "label": "a"}]), DIMS)
    with pytest.raises(MetricError):
        load_predictions(write_lines(tmp_path, [{"image_id": "i1", "label": "a", "box": [0, 0, 1, 1],
                                                 "confidence": 3}]), DIMS)
    with pytest.raises(InputFileError):
        load_predictions(tmp_path / "absent.jsonl", DIMS)


@pytest.mark.parametrize("record, error", [
    ({"image_id": "i1", "label": "a", "box": [0, 0, 1, 1], "confidence": None}, MetricError),
    ({"image_id": "i1", "label": "a", "box": [0, 0, 1, 1], "confidence": "high"}, MetricError),
    ({"image_id": "i1", "box": [0, 0, 1, 1]}, MetricError),
    ({"image_id": "i1", "label": "a", "box": [0, 0, 1]}, MetricError),
    ({"image_id": "i1", "label": "a", "tokens": 250}, MetricError),
    ([1, 2, 3], InputFileError),
    ("i1", InputFileError),
])
def test_malformed_records_name_the_line(tmp_path, record, error):
    path = write_lines(tmp_path, [{"image_id": "i1", "label": "a", "box": [0, 0, 1, 1]}, record])
    with pytest.raises(error, match="line 2"):
        load_predictions(path, DIMS)


def test_integer_tokens(tmp_path):
    path = write_lines(tmp_path, [{"image_id": "i1", "label": "a", "tokens": [250, 250, 750, 750]},
                                  {"image_id": "i1", "label": "a", "tokens": [250, None, 250, 750, 750]}])
    dets = load_predictions(path, DIMS)
    assert [d.box for d in dets] == [PixelBox(128, 128, 384, 384)] * 2


def test_vocabulary_gap():
    dets = [Detection("i", "a", PixelBox(0, 0, 1, 1)), Detection("i", "z", PixelBox(0, 0, 1, 1))]
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 1, 1)), GroundTruth("i", "b", PixelBox(0, 0, 1, 1))]
    assert vocabulary_gap(dets, gts) == (["z"], ["b"])
