"""Dice similarity coefficient, 95th-percentile Hausdorff distance, reports."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

UNDEFINED = "undefined"

# 6-connectivity
_STRUCT = ndimage.generate_binary_structure(3, 1)


def dsc(pred_mask, gt_mask) -> float:
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch {a.shape} vs {b.shape}")
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return 2.0 * int(np.logical_and(a, b).sum()) / (na + nb)


def boundary(mask):
    """Voxels of ``mask`` with at least one 6-neighbour outside it (the grid
    exterior counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=_STRUCT, border_value=0)
    return m & ~inner


def nearest_rank(values, q=95.0):
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty distance set")
    k = int(math.ceil(q / 100.0 * v.size))
    return float(v[max(k, 1) - 1])


def surface_distances(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)):
    """Pooled directed distances between the two boundaries, in mm."""
    sp = np.asarray(spacing, dtype=np.float64)
    pa = np.argwhere(boundary(pred_mask)) * sp
    pb = np.argwhere(boundary(gt_mask)) * sp
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return np.concatenate([d_ab, d_ba])


def hd95(pred_mask, gt_mask, spacing=(1.0, 1.0, 1.0)) -> float:
    """Nearest-rank 95th percentile of the pooled surface distances.

    Returns ``nan`` (reported as undefined) when either mask is empty.
    """
    a = np.asarray(pred_mask, dtype=bool)
    b = np.asarray(gt_mask, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid mismatch {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        return float("nan")
    return nearest_rank(surface_distances(a, b, spacing), 95.0)


@dataclass
class MetricsReport:
    per_class: Dict[str, Dict[str, float]]
    case_id: str = "mean"
    averages: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.averages:
            self.averages = _average(self.per_class)

    def to_dict(self):
        def enc(x):
            return UNDEFINED if isinstance(x, float) and math.isnan(x) else x

        return {
            "case_id": self.case_id,
            "per_class": {
                k: {m: enc(v) for m, v in d.items()} for k, d in self.per_class.items()
            },
            "averages": {k: enc(v) for k, v in self.averages.items()},
        }

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _average(per_class):
    dscs = [d["dsc"] for d in per_class.values()]
    hds = [d["hd95"] for d in per_class.values() if not math.isnan(d["hd95"])]
    if len(hds) < len(dscs):
        warnings.warn("hd95 undefined for some classes; excluded from the average")
    return {
        "dsc": float(np.mean(dscs)) if dscs else float("nan"),
        "hd95": float(np.mean(hds)) if hds else float("nan"),
    }


def evaluate_case(pred_labels, gt_labels, classes, class_names=None,
                  spacing=(1.0, 1.0, 1.0), case_id="case") -> MetricsReport:
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    per_class = {}
    for k in classes:
        name = class_names[k] if class_names is not None else str(k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            per_class[name] = {
                "dsc": dsc(pred == k, gt == k),
                "hd95": hd95(pred == k, gt == k, spacing),
            }
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return MetricsReport(per_class, case_id=case_id)


def aggregate(reports: Sequence[MetricsReport], case_id="mean") -> MetricsReport:
    """Per-class means across cases (undefined hd95 entries skipped)."""
    names = list(reports[0].per_class)
    per_class = {}
    for name in names:
        d = [r.per_class[name]["dsc"] for r in reports]
        h = [r.per_class[name]["hd95"] for r in reports
             if not math.isnan(r.per_class[name]["hd95"])]
        per_class[name] = {
            "dsc": float(np.mean(d)),
            "hd95": float(np.mean(h)) if h else float("nan"),
        }
    return MetricsReport(per_class, case_id=case_id)


def render_table(rows: Dict[str, MetricsReport]) -> str:
    """Aligned text table: Avg DSC/HD95 first, then per-class DSC, in percent."""
    if not rows:
        return ""
    classes = list(next(iter(rows.values())).per_class)
    header = ["Framework", "Avg DSC/HD95"] + classes
    body = []
    for label, rep in rows.items():
        avg_h = rep.averages["hd95"]
        h = UNDEFINED if math.isnan(avg_h) else f"{avg_h:.2f}"
        line = [label, f"{100 * rep.averages['dsc']:.2f}/{h}"]
        line += [f"{100 * rep.per_class[c]['dsc']:.2f}" for c in classes]
        body.append(line)
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
    sep = "-" * len(fmt(header))
    return "\n".join([fmt(header), sep] + [fmt(r) for r in body])
