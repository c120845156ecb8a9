"""Easy-to-hard mask generation driven by predicted per-patch losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MaskSchedule:
    alpha_0: float = 0.0
    alpha_T: float = 0.5
    total_epochs: int = 100
    mask_ratio: float = 0.75

    def __post_init__(self):
        for name in ("alpha_0", "alpha_T"):
            a = getattr(self, name)
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {a}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")


def alpha_at(s: MaskSchedule, t) -> float:
    """Fraction of the mask budget chosen by predicted difficulty at epoch ``t``.

    Linear in ``t`` from ``alpha_0`` (t = 0) to ``alpha_T`` (t = T).
    """
    if not 0 <= t <= s.total_epochs:
        raise ValueError(f"epoch {t} outside [0, {s.total_epochs}]")
    if t == s.total_epochs:
        return float(s.alpha_T)
    return s.alpha_0 + (t / s.total_epochs) * (s.alpha_T - s.alpha_0)


# absorbs float error in products such as 0.7 * 30 = 20.999999999999996
_SLACK = 1e-9


def masked_count(N: int, r: float) -> int:
    """round(r * N), halves rounded up."""
    return int(math.floor(r * N + 0.5 + _SLACK))


def guided_count(M: int, alpha: float) -> int:
    """floor(alpha * M)."""
    return int(math.floor(alpha * M + _SLACK))


@dataclass(frozen=True)
class Mask:
    guided: np.ndarray
    random: np.ndarray
    N: int

    @property
    def masked_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.guided, self.random]))

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.as_bool())

    @property
    def guided_count(self) -> int:
        return int(self.guided.size)

    @property
    def random_count(self) -> int:
        return int(self.random.size)

    @property
    def num_masked(self) -> int:
        return self.guided_count + self.random_count

    def as_bool(self) -> np.ndarray:
        m = np.zeros(self.N, dtype=bool)
        m[self.guided] = True
        m[self.random] = True
        return m


def generate_mask(predicted_losses, alpha: float, r: float, seed=None) -> Mask:
    """Mask ``round(r N)`` patches: the top ``floor(alpha M)`` by predicted loss
    (ties to the lower index), the rest uniformly from what is left."""
    losses = np.asarray(predicted_losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size < 1:
        raise ValueError("predicted_losses must be a non-empty 1D vector")
    if not np.all(np.isfinite(losses)):
        raise ValueError("predicted_losses contain non-finite values")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not 0.0 < r < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {r}")
    N = losses.size
    M = masked_count(N, r)
    G = guided_count(M, alpha)

    order = np.argsort(-losses, kind="stable")
    guided = np.sort(order[:G])
    taken = np.zeros(N, dtype=bool)
    taken[guided] = True
    remaining = np.flatnonzero(~taken)

    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    random = np.sort(rng.choice(remaining, size=M - G, replace=False))
    return Mask(guided.astype(np.int64), random.astype(np.int64), N)
