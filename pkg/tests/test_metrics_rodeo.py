import itertools
import math

import numpy as np
import pytest

from groundkit.errors import MetricError, ValidationError
from groundkit.geometry import PixelBox
from groundkit.metrics_map import Detection, GroundTruth
from groundkit.metrics_rodeo import (
    RodeoAccumulator,
    RodeoConfig,
    RodeoScores,
    harmonic_total,
    loc_affinity,
    match_hungarian,
    rodeo,
    rodeo_per_class,
    shape_affinity,
)


def oracle_giou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    hull = (max(a[2], b[2]) - min(a[0], b[0])) * (max(a[3], b[3]) - min(a[1], b[1]))
    return inter / union - (hull - union) / hull


def best_total_affinity(preds, gts):
    """Exhaustive search over all injective pairings."""
    affinity = [[max(0.0, oracle_giou(p.box.as_tuple(), g.box.as_tuple())) for g in gts] for p in preds]
    best = 0.0
    if len(preds) <= len(gts):
        for cols in itertools.permutations(range(len(gts)), len(preds)):
            best = max(best, sum(affinity[i][j] for i, j in enumerate(cols)))
    else:
        for rows in itertools.permutations(range(len(preds)), len(gts)):
            best = max(best, sum(affinity[i][j] for j, i in enumerate(rows)))
    return best


def random_box(rng, origin=0.0):
    x0, y0 = rng.uniform(origin, origin + 60, 2)
    w, h = rng.uniform(5, 40, 2)
    return PixelBox(x0, y0, x0 + w, y0 + h)


def test_hand_case():
    gts = [GroundTruth("i", "mass", PixelBox(0, 0, 100, 100))]
    preds = [Detection("i", "mass", PixelBox(10, 10, 110, 110))]
    scores = rodeo(preds, gts)
    r_loc = 100 * math.exp(-0.1)
    assert scores.r_shape == 100.0
    assert scores.r_cls == 100.0
    assert scores.r_loc == pytest.approx(r_loc, abs=1e-9)
    assert scores.r_total == pytest.approx(3 / (1 / r_loc + 1 / 100 + 1 / 100), abs=1e-9)
    assert scores.matched_pairs == 1


def test_perfect_predictions_are_exactly_100():
    gts = [
        GroundTruth("i1", "a", PixelBox(0, 0, 10, 10)),
        GroundTruth("i1", "b", PixelBox(30, 30, 60, 70)),
        GroundTruth("i2", "a", PixelBox(5, 5, 25, 45)),
    ]
    preds = [Detection(g.image_id, g.label, g.box) for g in gts]
    scores = rodeo(preds, gts)
    assert (scores.r_loc, scores.r_shape, scores.r_cls, scores.r_total) == (100.0, 100.0, 100.0, 100.0)
    assert scores.unmatched_preds == 0 and scores.unmatched_gts == 0


def test_empty_predictions():
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 10, 10)), GroundTruth("i", "a", PixelBox(20, 20, 30, 30))]
    scores = rodeo([], gts)
    assert (scores.r_loc, scores.r_shape, scores.r_cls, scores.r_total) == (0.0, 0.0, 0.0, 0.0)
    assert scores.matched_pairs == 0 and scores.unmatched_gts == 2


def test_empty_ground_truth_rejected():
    with pytest.raises(MetricError):
        rodeo([Detection("i", "a", PixelBox(0, 0, 1, 1))], [])


def test_wrong_label_only_hurts_classification():
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 10, 10))]
    scores = rodeo([Detection("i", "b", PixelBox(0, 0, 10, 10))], gts)
    assert scores.r_loc == 100.0 and scores.r_shape == 100.0
    assert scores.r_cls == 0.0 and scores.r_total == 0.0


def test_crossed_pairs():
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 10, 10)), GroundTruth("i", "a", PixelBox(50, 50, 60, 60))]
    preds = [Detection("i", "a", PixelBox(51, 51, 61, 61)), Detection("i", "a", PixelBox(1, 1, 11, 11))]
    assert match_hungarian(preds, gts) == [(0, 1), (1, 0)]


def test_no_overlap_is_unmatched():
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 10, 10))]
    preds = [Detection("i", "a", PixelBox(100, 100, 110, 110))]
    assert match_hungarian(preds, gts) == []
    scores = rodeo(preds, gts)
    assert scores.unmatched_preds == 1 and scores.unmatched_gts == 1


def test_hungarian_matches_exhaustive_search():
    rng = np.random.default_rng(17)
    for _ in range(500):
        preds = [Detection("i", "a", random_box(rng)) for _ in range(int(rng.integers(1, 5)))]
        gts = [GroundTruth("i", "a", random_box(rng)) for _ in range(int(rng.integers(1, 5)))]
        pairs = match_hungarian(preds, gts)
        assert len({i for i, _ in pairs}) == len(pairs) == len({j for _, j in pairs})
        total = sum(max(0.0, oracle_giou(preds[i].box.as_tuple(), gts[j].box.as_tuple())) for i, j in pairs)
        assert total == pytest.approx(best_total_affinity(preds, gts), abs=1e-9)


def test_total_is_harmonic_mean_and_bounded():
    rng = np.random.default_rng(23)
    for _ in range(300):
        gts = [GroundTruth("i", "a", random_box(rng)) for _ in range(3)]
        preds = [Detection("i", str(rng.choice(["a", "b"])), random_box(rng)) for _ in range(3)]
        s = rodeo(preds, gts)
        for value in (s.r_loc, s.r_shape, s.r_cls, s.r_total):
            assert 0.0 <= value <= 100.0
        if min(s.r_loc, s.r_shape, s.r_cls) > 0:
            expected = 3 / (1 / s.r_loc + 1 / s.r_shape + 1 / s.r_cls)
            assert s.r_total == pytest.approx(expected, abs=1e-12)
            assert min(s.r_loc, s.r_shape, s.r_cls) - 1e-12 <= s.r_total <= max(s.r_loc, s.r_shape, s.r_cls) + 1e-12
        else:
            assert s.r_total == 0.0


def test_scene_translation_invariance():
    rng = np.random.default_rng(29)
    for _ in range(100):
        gts = [GroundTruth("i", "a", random_box(rng)) for _ in range(3)]
        preds = [Detection("i", "a", random_box(rng)) for _ in range(3)]
        dx, dy = rng.uniform(-200, 200, 2)
        moved = rodeo(
            [Detection(p.image_id, p.label, p.box.translate(dx, dy)) for p in preds],
            [GroundTruth(g.image_id, g.label, g.box.translate(dx, dy)) for g in gts],
        )
        base = rodeo(preds, gts)
        assert moved.r_total == pytest.approx(base.r_total, abs=1e-6)
        assert moved.r_loc == pytest.approx(base.r_loc, abs=1e-6)


def test_duplicated_predictions_score_lower():
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 10, 10)), GroundTruth("i", "a", PixelBox(20, 20, 40, 40))]
    preds = [Detection("i", "a", PixelBox(1, 1, 11, 12)), Detection("i", "a", PixelBox(21, 19, 40, 41))]
    base = rodeo(preds, gts)
    doubled = rodeo(preds + preds, gts)
    for attr in ("r_loc", "r_shape", "r_cls", "r_total"):
        assert getattr(doubled, attr) < getattr(base, attr)


def test_per_class_perfect_and_empty():
    gts = [GroundTruth("i", "a", PixelBox(0, 0, 10, 10)), GroundTruth("i", "b", PixelBox(50, 50, 70, 70))]
    preds = [Detection("i", "a", PixelBox(0, 0, 10, 10)), Detection("i", "z", PixelBox(80, 80, 90, 90))]
    per_class = rodeo_per_class(preds, gts)
    assert sorted(per_class) == ["a", "b"]
    assert per_class["a"].r_total == 100.0
    assert per_class["b"].r_total == 0.0
    assert any("matching rate" in note for note in per_class["a"].notes)
    assert any("without ground truth: z" in note for note in per_class["b"].notes)


def test_per_class_consistent_with_whole_set():
    rng = np.random.default_rng(31)
    for _ in range(50):
        gts, preds = [], []
        for label, origin in (("a", 0.0), ("b", 500.0)):
            gts += [GroundTruth("i", label, random_box(rng, origin)) for _ in range(int(rng.integers(1, 4)))]
            preds += [Detection("i", label, random_box(rng, origin)) for _ in range(int(rng.integers(0, 4)))]
        whole = rodeo(preds, gts)
        per_class = rodeo_per_class(preds, gts)
        weights = {
            label: sum(1 for p in preds if p.label == label) + sum(1 for g in gts if g.label == label)
            for label in per_class
        }
        pooled = sum(weights[c] * per_class[c].r_loc for c in per_class) / (len(preds) + len(gts))
        assert whole.r_loc == pytest.approx(pooled, abs=1e-9)


def test_macro_aggregation():
    gts = [GroundTruth("i1", "a", PixelBox(0, 0, 10, 10)), GroundTruth("i2", "a", PixelBox(0, 0, 10, 10)),
           GroundTruth("i2", "a", PixelBox(50, 50, 60, 60)), GroundTruth("i2", "a", PixelBox(80, 80, 90, 90))]
    preds = [Detection("i1", "a", PixelBox(0, 0, 10, 10))]
    micro = rodeo(preds, gts)
    macro = rodeo(preds, gts, RodeoConfig(aggregation="macro"))
    assert micro.r_cls == pytest.approx(100 * 2 / 5)
    assert macro.r_cls == pytest.approx(50.0)
    assert "macro-averaged over images" in macro.notes


def test_accumulator_merge_is_order_free():
    a = RodeoAccumulator(1.0, 0.5, 1.0, 1, 2, 1)
    b = RodeoAccumulator(0.25, 0.75, 0.0, 1, 1, 3)
    assert a.merge(b) == b.merge(a)
    assert a.merge(b).scores() == b.merge(a).scores()


def test_affinities():
    assert loc_affinity(PixelBox(0, 0, 10, 10), PixelBox(0, 0, 10, 10)) == 1.0
    assert shape_affinity(PixelBox(0, 0, 10, 10), PixelBox(40, 40, 50, 50)) == 1.0
    assert shape_affinity(PixelBox(0, 0, 10, 20), PixelBox(0, 0, 20, 10)) == pytest.approx(100 / 300)
    assert harmonic_total(100.0, 100.0, 100.0) == 100.0
    assert harmonic_total(50.0, 0.0, 100.0) == 0.0


def test_scores_round_trip():
    scores = RodeoScores(10.0, 20.0, 30.0, 16.36, 3, 1, 2, ["n"])
    assert RodeoScores.from_dict(scores.to_dict()) == scores


def test_config_validation():
    with pytest.raises(ValidationError):
        RodeoConfig(sigma=0.0)
    with pytest.raises(ValidationError):
        RodeoConfig(aggregation="weighted")
