import numpy as np
import pytest

from groundkit.errors import ValidationError
from groundkit.geometry import (
    ImageDims,
    PixelBox,
    area,
    center,
    generalized_iou,
    iou,
    iou_matrix,
    validate_box,
)


def random_box(rng, extent=100.0):
    x = np.sort(rng.uniform(0, extent, 2))
    y = np.sort(rng.uniform(0, extent, 2))
    return PixelBox(float(x[0]), float(y[0]), float(x[1]), float(y[1]))


def test_iou_examples():
    assert iou(PixelBox(0, 0, 10, 10), PixelBox(0, 0, 10, 10)) == 1.0
    assert iou(PixelBox(0, 0, 10, 10), PixelBox(20, 20, 30, 30)) == 0.0
    assert iou(PixelBox(0, 0, 2, 2), PixelBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


def test_iou_zero_union():
    point = PixelBox(5, 5, 5, 5)
    assert iou(point, point) == 0.0
    assert iou(point, PixelBox(0, 0, 10, 10)) == 0.0


def test_iou_properties():
    rng = np.random.default_rng(7)
    for _ in range(2000):
        a, b = random_box(rng), random_box(rng)
        value = iou(a, b)
        assert 0.0 <= value <= 1.0
        assert value == iou(b, a)
        if area(a) > 0:
            assert iou(a, a) == 1.0
        dx, dy = rng.uniform(-50, 50, 2)
        assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(value, abs=1e-9)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(11)
    a = [random_box(rng) for _ in range(6)]
    b = [random_box(rng) for _ in range(4)]
    matrix = iou_matrix(a, b)
    assert matrix.shape == (6, 4)
    for i, box_a in enumerate(a):
        for j, box_b in enumerate(b):
            assert np.isclose(matrix[i, j], iou(box_a, box_b), atol=1e-12)
    assert iou_matrix([], b).shape == (0, 4)


def test_generalized_iou_range():
    assert generalized_iou(PixelBox(0, 0, 10, 10), PixelBox(0, 0, 10, 10)) == 1.0
    # disjoint boxes are penalized by the empty part of the enclosing box
    value = generalized_iou(PixelBox(0, 0, 1, 1), PixelBox(2, 0, 3, 1))
    assert value == pytest.approx(0 - (3 - 2) / 3)


def test_center():
    assert center(PixelBox(0, 0, 10, 20)) == (5.0, 10.0)


def test_validate_box():
    dims = ImageDims(512, 512)
    assert validate_box(PixelBox(0, 0, 10, 10), dims).valid
    assert validate_box(PixelBox(10, 0, 0, 10), dims).violations == ("inverted-x",)
    assert validate_box(PixelBox(0, 0, 600, 10), dims).violations == ("out-of-bounds-x",)
    assert "nan-coordinate" in validate_box(PixelBox(float("nan"), 0, 1, 1), dims).violations


def test_validate_box_does_not_mutate():
    box = PixelBox(10, 20, 5, 700)
    report = validate_box(box, ImageDims(512, 512))
    assert set(report.violations) == {"inverted-x", "out-of-bounds-y"}
    assert box == PixelBox(10, 20, 5, 700)


def test_image_dims():
    assert ImageDims.parse("640x480") == ImageDims(640, 480)
    assert str(ImageDims(640, 480)) == "640x480"
    with pytest.raises(ValidationError):
        ImageDims(0, 10)
    with pytest.raises(ValidationError):
        ImageDims.parse("640")
