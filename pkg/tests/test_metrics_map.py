from fractions import Fraction

import numpy as np
import pytest

from groundkit.errors import MetricError
from groundkit.geometry import PixelBox
from groundkit.metrics_map import (
    THRESHOLDS,
    Detection,
    GroundTruth,
    average_precision,
    map_suite,
    match_greedy,
    sort_detections,
    threshold_key,
)


# Brute-force reference, written without the library's helpers

def oracle_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def oracle_class_ap(dets, gts, thr, interpolation):
    num_gt = len(gts)
    if num_gt == 0:
        return 0.0 if dets else None
    ordered = sorted(dets, key=lambda d: (-d.confidence, d.box.as_tuple(), d.image_id))
    used = set()
    tp = 0
    points = []  # (recall as a fraction, precision)
    for rank, d in enumerate(ordered, 1):
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if g.image_id != d.image_id or j in used:
                continue
            value = oracle_iou(d.box.as_tuple(), g.box.as_tuple())
            if value > best:
                best, best_j = value, j
        if best_j is not None and best >= thr:
            used.add(best_j)
            tp += 1
        points.append((Fraction(tp, num_gt), tp / rank))

    def best_precision_from(recall):
        candidates = [p for r, p in points if r >= recall]
        return max(candidates) if candidates else 0.0

    if interpolation == "101pt":
        return sum(best_precision_from(Fraction(k, 100)) for k in range(101)) / 101
    total, previous = 0.0, Fraction(0)
    for r, _ in points:
        if r > previous:
            total += float(r - previous) * best_precision_from(r)
            previous = r
    return total


def oracle_map(dets, gts, interpolation):
    classes = sorted({g.label for g in gts})
    out = {}
    for thr in THRESHOLDS:
        aps = [
            oracle_class_ap([d for d in dets if d.label == c], [g for g in gts if g.label == c], thr, interpolation)
            for c in classes
        ]
        out[threshold_key(thr)] = sum(aps) / len(aps)
    return out


def random_instance(rng):
    labels = ["a", "b", "c"][: int(rng.integers(1, 4))]
    gts, dets = [], []
    for i in range(int(rng.integers(1, 11))):
        image_id = f"img{i}"
        for _ in range(int(rng.integers(0, 6))):
            x0, y0 = rng.uniform(0, 60, 2)
            w, h = rng.uniform(5, 40, 2)
            gts.append(GroundTruth(image_id, str(rng.choice(labels)), PixelBox(x0, y0, x0 + w, y0 + h)))
        for _ in range(int(rng.integers(0, 6))):
            x0, y0 = rng.uniform(0, 60, 2)
            w, h = rng.uniform(5, 40, 2)
            conf = round(float(rng.uniform(0, 1)), 1)
            dets.append(Detection(image_id, str(rng.choice(labels)), PixelBox(x0, y0, x0 + w, y0 + h), conf))
    if not gts:
        gts.append(GroundTruth("img0", labels[0], PixelBox(0, 0, 10, 10)))
    # near-duplicates of ground truth so that high thresholds see matches too
    for g in gts[: len(gts) // 2]:
        jitter = rng.uniform(-1, 1, 4)
        x0, y0, x1, y1 = (np.array(g.box.as_tuple()) + jitter).tolist()
        dets.append(Detection(g.image_id, g.label, PixelBox(min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)),
                              round(float(rng.uniform(0, 1)), 1)))
    return dets, gts


def test_hand_case():
    assert average_precision([True, False], 2, "101pt") == pytest.approx(51 / 101, abs=1e-12)
    assert average_precision([True, False], 2, "cont") == pytest.approx(0.5, abs=1e-12)


def test_average_precision_edge_cases():
    assert average_precision([], 0) is None
    assert average_precision([False], 0) == 0.0
    assert average_precision([], 3) == 0.0
    assert average_precision([True, True, True], 3) == 1.0
    with pytest.raises(MetricError):
        average_precision([True], 1, "11pt")


def test_matches_bruteforce_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        dets, gts = random_instance(rng)
        for interpolation in ("101pt", "cont"):
            result = map_suite(dets, gts, interpolation)
            expected = oracle_map(dets, gts, interpolation)
            for key, value in expected.items():
                assert result.map_by_threshold[key] == pytest.approx(value, abs=1e-9)
            assert result.map50_95 == np.mean([result.map_by_threshold[threshold_key(t)] for t in THRESHOLDS])


def test_perfect_predictions():
    gts = [
        GroundTruth("i1", "a", PixelBox(0, 0, 10, 10)),
        GroundTruth("i1", "b", PixelBox(5, 5, 30, 30)),
        GroundTruth("i2", "a", PixelBox(20, 20, 40, 50)),
    ]
    dets = [Detection(g.image_id, g.label, g.box) for g in gts]
    result = map_suite(dets, gts)
    assert result.map50 == 1.0 and result.map75 == 1.0 and result.map50_95 == 1.0


def test_empty_predictions_score_zero():
    gts = [GroundTruth("i1", "a", PixelBox(0, 0, 10, 10))]
    result = map_suite([], gts)
    assert result.map50_95 == 0.0
    assert result.per_class_ap["a"]["0.50"] == 0.0


def test_empty_ground_truth_rejected():
    with pytest.raises(MetricError):
        map_suite([Detection("i1", "a", PixelBox(0, 0, 1, 1))], [])


def test_extra_prediction_classes_ignored_in_mean():
    gts = [GroundTruth("i1", "a", PixelBox(0, 0, 10, 10))]
    dets = [Detection("i1", "a", PixelBox(0, 0, 10, 10)), Detection("i1", "z", PixelBox(0, 0, 10, 10))]
    result = map_suite(dets, gts)
    assert result.map50 == 1.0
    assert result.per_class_ap["z"]["0.50"] == 0.0
    assert result.metadata["classes_ignored"] == ["z"]


def test_monotone_in_threshold_with_one_box_per_image():
    rng = np.random.default_rng(9)
    for _ in range(200):
        gts, dets = [], []
        for i in range(int(rng.integers(1, 8))):
            x0, y0 = rng.uniform(0, 50, 2)
            box = PixelBox(x0, y0, x0 + 20, y0 + 20)
            gts.append(GroundTruth(f"i{i}", "a", box))
            dx, dy = rng.uniform(-8, 8, 2)
            dets.append(Detection(f"i{i}", "a", box.translate(dx, dy), round(float(rng.uniform()), 2)))
        values = [map_suite(dets, gts).map_by_threshold[threshold_key(t)] for t in THRESHOLDS]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))


def test_greedy_takes_best_unmatched():
    gts = [PixelBox(0, 0, 10, 10), PixelBox(0, 0, 9, 10)]
    dets = sort_detections([
        Detection("i", "a", PixelBox(0, 0, 10, 10), 0.9),
        Detection("i", "a", PixelBox(0, 0, 9, 10), 0.8),
    ])
    assert match_greedy(dets, gts, 0.5) == [True, True]
    assert match_greedy(dets, [], 0.5) == [False, False]


def test_sort_tie_break():
    a = Detection("i2", "x", PixelBox(0, 0, 1, 1), 0.5)
    b = Detection("i1", "x", PixelBox(0, 0, 1, 1), 0.5)
    c = Detection("i1", "x", PixelBox(0, 0, 2, 2), 0.5)
    assert sort_detections([c, a, b]) == [b, a, c]


def test_detection_validation():
    with pytest.raises(MetricError):
        Detection("i", "a", PixelBox(0, 0, 1, 1), 1.5)
    with pytest.raises(MetricError):
        Detection("i", "a", PixelBox(2, 0, 1, 1))


def scaled(dets, gts, factor):
    return (
        [Detection(d.image_id, d.label, d.box.scale(factor), d.confidence) for d in dets],
        [GroundTruth(g.image_id, g.label, g.box.scale(factor)) for g in gts],
    )


def test_scale_invariance():
    rng = np.random.default_rng(31)
    for _ in range(200):
        dets, gts = random_instance(rng)
        base = map_suite(dets, gts)
        for factor in (0.5, 2.0, 8.0):
            result = map_suite(*scaled(dets, gts, factor))
            assert result.map_by_threshold == base.map_by_threshold
            assert result.per_class_ap == base.per_class_ap


def test_permutation_invariance_at_distinct_confidences():
    rng = np.random.default_rng(37)
    for _ in range(200):
        dets, gts = random_instance(rng)
        confidences = rng.permutation(len(dets))
        dets = [Detection(d.image_id, d.label, d.box, (float(c) + 1) / (len(dets) + 1))
                for d, c in zip(dets, confidences)]
        base = map_suite(dets, gts)
        for _ in range(3):
            shuffled = [dets[i] for i in rng.permutation(len(dets))]
            result = map_suite(shuffled, gts)
            assert result.map_by_threshold == base.map_by_threshold
            assert result.per_class_ap == base.per_class_ap
