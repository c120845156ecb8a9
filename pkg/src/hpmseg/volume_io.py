"""Synthetic phantoms, the on-disk volume container, and intensity preprocessing."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class PhantomError(ValueError):
    """Raised when a phantom cannot be generated for the requested spec."""


@dataclass
class Volume:
    """A single-channel 3D intensity grid with an optional label map."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if len(self.spacing) != 3:
            raise ValueError("spacing must have three entries")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != self.data.shape:
                raise ValueError(
                    f"labels shape {self.labels.shape} != data shape {self.data.shape}"
                )

    @property
    def shape(self):
        return self.data.shape


def _default_ranges(num_organs):
    # background sits at the bottom, organs get disjoint bands above it
    ranges = [(0.0, 0.1)]
    width = 0.9 / num_organs
    for k in range(num_organs):
        lo = 0.1 + k * width
        ranges.append((lo + 0.15 * width, lo + 0.85 * width))
    return ranges


@dataclass
class PhantomSpec:
    """Phantom generation parameters.

    ``intensity_ranges`` lists the background interval first, then one per
    organ. With ``jitter`` set, every organ class has a canonical center and
    size drawn from ``layout_seed`` (shared by all cases) and each case
    perturbs them by up to ``jitter * grid_size`` voxels; ``jitter=None``
    places organs uniformly at random. ``body`` adds a background-class body
    ellipsoid with a smooth radial intensity profile around the organs.
    """

    grid_size: int = 64
    num_organs: int = 4
    intensity_ranges: Optional[Sequence[Sequence[float]]] = None
    noise_sigma: float = 0.0
    seed: int = 0
    body: bool = True
    jitter: Optional[float] = 0.1
    layout_seed: int = 0
    radius_range: tuple = (0.12, 0.2)
    spacing: tuple = (1.0, 1.0, 1.0)
    max_tries: int = 200
    class_names: Optional[Sequence[str]] = field(default=None)

    def validate(self):
        if self.num_organs < 1:
            raise PhantomError("num_organs must be >= 1 (class 0 is background)")
        if self.num_organs > 255:
            raise PhantomError("at most 255 organ classes fit in uint8 labels")
        if self.grid_size < 1:
            raise PhantomError("grid_size must be positive")
        if self.noise_sigma < 0:
            raise PhantomError("noise_sigma must be non-negative")
        if self.jitter is not None and self.jitter < 0:
            raise PhantomError("jitter must be non-negative")
        ranges = self.ranges()
        if len(ranges) != self.num_organs + 1:
            raise PhantomError(
                f"need {self.num_organs + 1} intensity ranges (background first), "
                f"got {len(ranges)}"
            )
        for k, (lo, hi) in enumerate(ranges):
            if lo > hi:
                raise PhantomError(f"intensity range for class {k} is inverted")

    def ranges(self):
        if self.intensity_ranges is None:
            return _default_ranges(self.num_organs)
        return [tuple(map(float, r)) for r in self.intensity_ranges]

    def names(self):
        if self.class_names is not None:
            names = list(self.class_names)
            if len(names) != self.num_organs + 1:
                raise PhantomError("class_names must list background plus every organ")
            return names
        return ["background"] + [f"organ{k}" for k in range(1, self.num_organs + 1)]


def _ellipsoid_rho2(coords, center, radii):
    return sum(((coords[a] - center[a]) / radii[a]) ** 2 for a in range(3))


def _canonical_layout(spec, r_lo, r_hi):
    """Per-class (center, radii), shared by every case with the same layout seed."""
    g = spec.grid_size
    rng = np.random.default_rng([spec.layout_seed, spec.num_organs, g])
    layout = []
    for k in range(1, spec.num_organs + 1):
        best = None
        for _ in range(spec.max_tries):
            radii = rng.uniform(r_lo, r_hi, size=3)
            center = rng.uniform(0.3 * g, 0.7 * g, size=3)
            # separation in units of the summed mean radii
            sep = min(
                (np.linalg.norm(center - c) / (radii.mean() + r.mean()) for c, r in layout),
                default=np.inf,
            )
            if best is None or sep > best[0]:
                best = (sep, center, radii)
            if sep >= 0.9:
                break
        layout.append((best[1], best[2]))
    return layout


def generate_phantom(spec: PhantomSpec) -> Volume:
    """Draw a labeled phantom of ellipsoidal organs.

    Inside each organ the intensity falls smoothly from a center value to a
    rim value, both drawn from the organ's range. Organs drawn later
    overwrite earlier ones; a placement is redrawn if more than a quarter of
    it is already occupied or it would hide more than half of an earlier
    organ.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    g = spec.grid_size
    ranges = spec.ranges()
    r_lo = max(2.0, spec.radius_range[0] * g)
    r_hi = max(r_lo, spec.radius_range[1] * g)
    coords = np.indices((g, g, g), dtype=np.float64)

    lo, hi = ranges[0]
    labels = np.zeros((g, g, g), dtype=np.uint8)
    if spec.body:
        radii = np.array([0.46, 0.40, 0.48]) * g * (1.0 + rng.uniform(-0.03, 0.03, 3))
        center = np.full(3, (g - 1) / 2.0) + rng.uniform(-1.0, 1.0, 3)
        rho2 = _ellipsoid_rho2(coords, center, radii)
        inside = rho2 <= 1.0
        air = rng.uniform(lo, lo + 0.1 * (hi - lo))
        rim = rng.uniform(lo + 0.3 * (hi - lo), lo + 0.5 * (hi - lo))
        core = rng.uniform(lo + 0.8 * (hi - lo), hi)
        data = np.full((g, g, g), air, dtype=np.float64)
        data[inside] = rim + (core - rim) * (1.0 - rho2[inside])
    else:
        data = np.full((g, g, g), rng.uniform(lo, hi), dtype=np.float64)

    layout = _canonical_layout(spec, r_lo, r_hi) if spec.jitter is not None else None

    for k in range(1, spec.num_organs + 1):
        if 2 * np.ceil(r_lo) + 1 > g:
            raise PhantomError(f"grid {g} too small to place class {k}")
        placed = False
        for _ in range(spec.max_tries):
            if layout is None:
                radii = rng.uniform(r_lo, r_hi, size=3)
            else:
                radii = layout[k - 1][1] * rng.uniform(0.85, 1.15, size=3)
            radii = np.minimum(radii, (g - 1) / 2.0)
            if layout is None:
                center = np.array([rng.uniform(r, g - 1 - r) for r in radii])
            else:
                center = layout[k - 1][0] + rng.uniform(-1.0, 1.0, 3) * spec.jitter * g
                center = np.clip(center, radii, g - 1 - radii)
            rho2 = _ellipsoid_rho2(coords, center, radii)
            inside = rho2 <= 1.0
            n_in = int(inside.sum())
            if n_in == 0:
                continue
            if np.count_nonzero(labels[inside]) > 0.25 * n_in:
                continue
            counts = np.bincount(labels.ravel(), minlength=k)
            hidden = np.bincount(labels[inside], minlength=k)
            if any(counts[j] and hidden[j] > 0.5 * counts[j] for j in range(1, k)):
                continue
            lo, hi = ranges[k]
            mid = 0.5 * (lo + hi)
            core = rng.uniform(mid, hi)
            rim = rng.uniform(lo, mid)
            data[inside] = rim + (core - rim) * (1.0 - rho2[inside])
            labels[inside] = k
            placed = True
            break
        if not placed:
            raise PhantomError(f"could not place class {k} in a {g}^3 grid")

    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return Volume(data.astype(np.float32), spacing=spec.spacing, labels=labels)


def preprocess(v: Volume, clip_lo: float, clip_hi: float) -> Volume:
    """Clip intensities to ``[clip_lo, clip_hi]`` and rescale them to [0, 1]."""
    if not clip_lo < clip_hi:
        raise ValueError(f"clip_lo ({clip_lo}) must be < clip_hi ({clip_hi})")
    d = np.clip(v.data.astype(np.float64), clip_lo, clip_hi)
    d = (d - clip_lo) / (clip_hi - clip_lo)
    return Volume(d.astype(np.float32), spacing=v.spacing, labels=v.labels)


def augment_crop(v: Volume, crop: int, flip_prob: float = 0.5, seed=None) -> Volume:
    """Random ``crop``-cubed sub-volume, each axis flipped with ``flip_prob``."""
    dims = v.shape
    for axis, n in enumerate(dims):
        if crop > n:
            raise ValueError(f"crop {crop} larger than axis {axis} of size {n}")
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    offsets = [int(rng.integers(0, n - crop + 1)) for n in dims]
    flips = rng.random(3) < flip_prob
    sl = tuple(slice(o, o + crop) for o in offsets)
    data = v.data[sl]
    labels = None if v.labels is None else v.labels[sl]
    axes = tuple(int(a) for a in np.flatnonzero(flips))
    if axes:
        data = np.flip(data, axis=axes)
        if labels is not None:
            labels = np.flip(labels, axis=axes)
    data = np.ascontiguousarray(data)
    if labels is not None:
        labels = np.ascontiguousarray(labels)
    return Volume(data, spacing=v.spacing, labels=labels)


# -- container format -------------------------------------------------------
#
# <dir>/meta.json   {"dims", "spacing", "dtype", "class_names", "has_labels"}
# <dir>/data.f32    little-endian float32, C-order
# <dir>/labels.u8   uint8, C-order (optional)


def write_volume(path, v: Volume, class_names=None):
    os.makedirs(path, exist_ok=True)
    meta = {
        "dims": [int(n) for n in v.shape],
        "spacing": list(v.spacing),
        "dtype": "float32",
        "class_names": list(class_names) if class_names is not None else None,
        "has_labels": v.labels is not None,
    }
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)
    np.ascontiguousarray(v.data, dtype="<f4").tofile(os.path.join(path, "data.f32"))
    if v.labels is not None:
        if v.labels.min() < 0 or v.labels.max() > 255:
            raise ValueError("labels must fit in uint8")
        np.ascontiguousarray(v.labels, dtype=np.uint8).tofile(
            os.path.join(path, "labels.u8")
        )


def read_meta(path):
    with open(os.path.join(path, "meta.json")) as fh:
        return json.load(fh)


def read_volume(path) -> Volume:
    meta = read_meta(path)
    dims = tuple(meta["dims"])
    if meta.get("dtype", "float32") != "float32":
        raise ValueError(f"unsupported dtype {meta['dtype']!r}")
    data = np.fromfile(os.path.join(path, "data.f32"), dtype="<f4")
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: data.f32 has {data.size} values, expected {dims}")
    labels = None
    lpath = os.path.join(path, "labels.u8")
    if os.path.exists(lpath):
        labels = np.fromfile(lpath, dtype=np.uint8)
        if labels.size != data.size:
            raise ValueError(f"{path}: labels.u8 size mismatch")
        labels = labels.reshape(dims)
    return Volume(
        data.reshape(dims).astype(np.float32), spacing=meta["spacing"], labels=labels
    )
