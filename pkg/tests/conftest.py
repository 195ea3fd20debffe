from pathlib import Path

import pytest

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def data_dir():
    return DATA_DIR


@pytest.fixture
def annotations_csv():
    return DATA_DIR / "annotations.csv"


@pytest.fixture
def annotations_coco():
    return DATA_DIR / "annotations_coco.json"
