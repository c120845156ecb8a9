"""Cubic non-overlapping patches: volume <-> patch sequence, per-patch targets.

Patches are ordered row-major over the patch grid ``(H/P, W/P, D/P)``; the
voxels of one patch are laid out C-order over ``(p1, p2, p3, channel)``.
The array helpers accept numpy arrays and torch tensors alike, with any
number of leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .volume_io import Volume

AXES = ("H", "W", "D")


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int
    grid_dims: Tuple[int, int, int]
    channels: int = 1

    @property
    def N(self) -> int:
        g = self.grid_dims
        return g[0] * g[1] * g[2]

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 3 * self.channels

    @property
    def spatial_shape(self):
        return tuple(n * self.patch_size for n in self.grid_dims)

    @classmethod
    def for_shape(cls, shape, patch_size, channels=1):
        if patch_size < 1:
            raise ValueError("patch size must be >= 1")
        grid = []
        for axis, n in zip(AXES, shape):
            if n % patch_size:
                raise ValueError(
                    f"axis {axis} of size {n} is not divisible by patch size {patch_size}"
                )
            grid.append(n // patch_size)
        return cls(patch_size, tuple(grid), channels)


@dataclass
class PatchSequence:
    patches: np.ndarray  # (N, P^3 * C)
    config: PatchConfig
    normalization_stats: Optional[Tuple[np.ndarray, np.ndarray]] = None


def _permute(x, axes):
    if isinstance(x, np.ndarray):
        return x.transpose(axes)
    return x.permute(*axes)


def patchify_array(x, P: int):
    """``(..., C, H, W, D)`` -> ``(..., N, P^3 * C)``."""
    *lead, C, H, W, D = x.shape
    PatchConfig.for_shape((H, W, D), P)
    gh, gw, gd = H // P, W // P, D // P
    k = len(lead)
    x = x.reshape(*lead, C, gh, P, gw, P, gd, P)
    # (..., gh, gw, gd, p1, p2, p3, C)
    axes = list(range(k)) + [k + 1, k + 3, k + 5, k + 2, k + 4, k + 6, k]
    x = _permute(x, axes)
    return x.reshape(*lead, gh * gw * gd, P ** 3 * C)


def unpatchify_array(x, config: PatchConfig):
    """Inverse of :func:`patchify_array`."""
    *lead, N, L = x.shape
    P, C = config.patch_size, config.channels
    gh, gw, gd = config.grid_dims
    if N != config.N or L != config.patch_dim:
        raise ValueError(f"patch array {tuple(x.shape)} does not match {config}")
    k = len(lead)
    x = x.reshape(*lead, gh, gw, gd, P, P, P, C)
    axes = list(range(k)) + [k + 6, k, k + 3, k + 1, k + 4, k + 2, k + 5]
    x = _permute(x, axes)
    return x.reshape(*lead, C, gh * P, gw * P, gd * P)


def patchify(v: Volume, P: int) -> PatchSequence:
    config = PatchConfig.for_shape(v.shape, P)
    patches = patchify_array(v.data[None], P)
    return PatchSequence(np.ascontiguousarray(patches), config)


def unpatchify(ps: PatchSequence, spacing=(1.0, 1.0, 1.0)) -> Volume:
    data = unpatchify_array(np.asarray(ps.patches), ps.config)[0]
    return Volume(np.ascontiguousarray(data), spacing=spacing)


def normalize_array(x, eps: float = 1e-6):
    """Per-patch standardization over the last axis with population variance.

    Returns ``(normalized, mean, std)`` where ``std = sqrt(var + eps)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if isinstance(x, np.ndarray):
        mean = x.mean(-1, keepdims=True)
        var = ((x - mean) ** 2).mean(-1, keepdims=True)
    else:
        mean = x.mean(-1, keepdim=True)
        var = ((x - mean) ** 2).mean(-1, keepdim=True)
    std = (var + eps) ** 0.5
    return (x - mean) / std, mean, std


def normalize_targets(ps: PatchSequence, eps: float = 1e-6) -> PatchSequence:
    x = np.asarray(ps.patches, dtype=np.float64)
    normed, mean, std = normalize_array(x, eps)
    return PatchSequence(normed, ps.config, (mean[..., 0], std[..., 0]))


def denormalize_targets(ps: PatchSequence) -> PatchSequence:
    if ps.normalization_stats is None:
        raise ValueError("patch sequence carries no normalization stats")
    mean, std = ps.normalization_stats
    x = np.asarray(ps.patches) * std[:, None] + mean[:, None]
    return PatchSequence(x, ps.config)


def patch_grid_coords(config: PatchConfig) -> np.ndarray:
    """``(N, 3)`` grid coordinate of each patch index."""
    gh, gw, gd = config.grid_dims
    idx = np.arange(config.N)
    return np.stack(np.unravel_index(idx, (gh, gw, gd)), axis=1)
