import json

import numpy as np
import pytest

from hpmseg.config import ConfigError, DataConfig
from hpmseg.dataset import (
    check_divisible,
    generate_dataset,
    load_index,
    load_split,
    report_classes,
    split_counts,
)


def test_split_counts():
    assert split_counts(52, [0.885, 0.0, 0.115]) == (46, 0, 6)
    assert split_counts(40, [0.6, 0.2, 0.2]) == (24, 8, 8)
    assert split_counts(10, [1.0, 0.0, 0.0]) == (10, 0, 0)
    with pytest.raises(ConfigError):
        split_counts(10, [0.9, 0.2, 0.0])


def test_generate_and_load(tmp_path):
    data = DataConfig(grid_size=16, num_cases=4, num_organs=1, split=[0.5, 0.25, 0.25], crop=16)
    index = generate_dataset(tmp_path / "d", data)
    assert index["cases"] == ["case_000", "case_001", "case_002", "case_003"]
    assert load_index(tmp_path / "d") == index
    train = load_split(tmp_path / "d", "train", data)
    assert len(train) == 2
    x, y = train[0]
    assert x.shape == (16, 16, 16) and 0.0 <= x.min() and x.max() <= 1.0
    assert y.dtype == np.uint8


def test_refuses_non_empty(tmp_path):
    (tmp_path / "f").write_text("x")
    with pytest.raises(FileExistsError):
        generate_dataset(tmp_path, DataConfig(grid_size=16, num_cases=1, num_organs=1))
    generate_dataset(tmp_path, DataConfig(grid_size=16, num_cases=1, num_organs=1), force=True)


def test_missing_index(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_index(tmp_path)


def test_report_classes():
    idx = {"class_names": ["bg", "a", "b", "c"], "report_classes": ["c", "a"]}
    assert report_classes(idx) == ([3, 1], idx["class_names"])
    assert report_classes({"class_names": ["bg", "a"]})[0] == [1]
    with pytest.raises(ValueError):
        report_classes({"class_names": ["bg", "a"], "report_classes": ["z"]})


def test_check_divisible():
    with pytest.raises(ValueError):
        check_divisible([(np.zeros((32, 32, 32)), None)], 24, 16)
    with pytest.raises(ValueError):
        check_divisible([(np.zeros((16, 32, 32)), None)], 32, 16)
