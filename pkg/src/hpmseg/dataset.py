"""Dataset directories: volume containers plus an ``index.json`` manifest."""

from __future__ import annotations

import json
import os

import numpy as np

from .config import ConfigError, DataConfig
from .volume_io import PhantomSpec, generate_phantom, preprocess, read_meta, read_volume, write_volume

INDEX = "index.json"


def split_counts(n, fractions):
    f_train, f_val, f_test = fractions
    if sum(fractions) > 1.0 + 1e-9 or min(fractions) < 0:
        raise ConfigError(f"invalid split fractions {fractions}")
    n_test = int(round(f_test * n))
    n_val = int(round(f_val * n))
    n_train = min(int(round(f_train * n)), n - n_test - n_val)
    return n_train, n_val, n_test


def generate_dataset(out_dir, data: DataConfig, force=False):
    """Write ``data.num_cases`` phantoms and a seeded train/val/test split."""
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise FileExistsError(f"{out_dir} exists and is not empty (use --force)")
    n_train, n_val, n_test = split_counts(data.num_cases, data.split)
    os.makedirs(out_dir, exist_ok=True)
    names = None
    cases = []
    for i in range(data.num_cases):
        spec = PhantomSpec(
            grid_size=data.grid_size, num_organs=data.num_organs,
            noise_sigma=data.noise_sigma, seed=data.seed * 100003 + i, jitter=data.jitter, body=data.body,
            spacing=tuple(data.spacing), class_names=data.class_names,
        )
        names = spec.names()
        case = f"case_{i:03d}"
        write_volume(os.path.join(out_dir, case), generate_phantom(spec), names)
        cases.append(case)
    order = np.random.default_rng([data.seed, 7]).permutation(data.num_cases)
    split = {
        "train": sorted(cases[i] for i in order[:n_train]),
        "val": sorted(cases[i] for i in order[n_train:n_train + n_val]),
        "test": sorted(cases[i] for i in order[n_train + n_val:n_train + n_val + n_test]),
    }
    index = {
        "cases": cases,
        "split": split,
        "seed": data.seed,
        "class_names": names,
        "report_classes": data.report_classes,
    }
    with open(os.path.join(out_dir, INDEX), "w") as fh:
        json.dump(index, fh, indent=2)
    return index


def load_index(data_dir):
    path = os.path.join(data_dir, INDEX)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {INDEX} in {data_dir}")
    with open(path) as fh:
        return json.load(fh)


def load_split(data_dir, split, data: DataConfig, with_labels=True):
    """Preprocessed ``[(data, labels), ...]`` for one split."""
    index = load_index(data_dir)
    out = []
    for case in index["split"][split]:
        v = preprocess(read_volume(os.path.join(data_dir, case)), data.clip_lo, data.clip_hi)
        if with_labels and v.labels is None:
            raise ValueError(f"{case} has no labels")
        out.append((v.data, v.labels))
    return out


def case_spacing(data_dir, case):
    return tuple(read_meta(os.path.join(data_dir, case))["spacing"])


def report_classes(index):
    """Class ids to report: the declared report classes, else every organ."""
    names = index.get("class_names")
    wanted = index.get("report_classes")
    if names is None:
        return None, None
    if wanted:
        missing = [w for w in wanted if w not in names]
        if missing:
            raise ValueError(f"report classes {missing} not among dataset classes")
        return [names.index(w) for w in wanted], names
    return list(range(1, len(names))), names


def check_divisible(samples, crop, patch_size):
    if crop % patch_size:
        raise ValueError(f"crop {crop} is not divisible by patch size {patch_size}")
    for data, _ in samples:
        for axis, n in enumerate(data.shape):
            if n < crop:
                raise ValueError(f"volume axis {axis} of size {n} smaller than crop {crop}")
