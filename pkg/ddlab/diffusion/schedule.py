"""
Discrete noise schedules, inference step grids and the forward process.

alpha_bar is indexed 0..T with alpha_bar[0] = 1 at the data end; the per-step
alpha_t = alpha_bar[t] / alpha_bar[t-1] is stored at alphas[t - 1].
"""
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ddlab.errors import IndexOutOfRange, InvalidStepOrder
from ddlab.numerics import RngStream

COSINE_OFFSET = 0.008
MIN_ALPHA = 0.001


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative and per-step noise coefficients for T training steps."""
    kind: str
    T: int
    alpha_bar: np.ndarray
    alphas: np.ndarray

    @property
    def schedule_id(self) -> str:
        return f"{self.kind}-T{self.T}"

    def check_index(self, t: int, low: int = 0):
        """Raise IndexOutOfRange unless low <= t <= T."""
        t_arr = np.asarray(t)
        if np.any(t_arr < low) or np.any(t_arr > self.T):
            raise IndexOutOfRange(f"Schedule index {t} outside [{low}, {self.T}]")

    def signal(self, t) -> np.ndarray:
        """sqrt(alpha_bar_t)."""
        return np.sqrt(self.alpha_bar[t])

    def noise(self, t) -> np.ndarray:
        """sqrt(1 - alpha_bar_t)."""
        return np.sqrt(1.0 - self.alpha_bar[t])

    def alpha_bar_at(self, t_frac) -> np.ndarray:
        """alpha_bar at fractional time t/T, exact on integer indices."""
        return np.interp(np.asarray(t_frac, dtype=np.float64) * self.T,
                         np.arange(self.T + 1), self.alpha_bar)


def make_schedule(kind: str = "cosine", T: int = 64) -> NoiseSchedule:
    """
    Build a cosine schedule with T steps.

    alpha_bar(t) = f(t) / f(0), f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2),
    s = 0.008, then per-step alphas are clamped to at least 0.001 and the
    cumulative product is rebuilt so both sequences stay consistent.
    """
    if kind != "cosine":
        raise ValueError(f"Unknown schedule kind: {kind}")
    if T < 4:
        raise ValueError(f"Schedule needs T >= 4, got {T}")

    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * math.pi / 2.0) ** 2
    raw = f / f[0]
    alphas = np.clip(raw[1:] / raw[:-1], MIN_ALPHA, 1.0)
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])

    alpha_bar.setflags(write=False)
    alphas.setflags(write=False)
    return NoiseSchedule(kind=kind, T=T, alpha_bar=alpha_bar, alphas=alphas)


@dataclass(frozen=True)
class StepGrid:
    """Strictly decreasing schedule indices T = t_N > ... > t_0 = 0."""
    indices: Tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(t) for t in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) < 2 or idx[-1] != 0:
            raise InvalidStepOrder(f"Grid must end at 0 and have at least one step: {idx}")
        if any(a <= b for a, b in zip(idx, idx[1:])):
            raise InvalidStepOrder(f"Grid must be strictly decreasing: {idx}")

    def __len__(self) -> int:
        """Number of sampler steps N."""
        return len(self.indices) - 1

    def intervals(self):
        """(t_from, t_to) pairs in sampling order."""
        return list(zip(self.indices[:-1], self.indices[1:]))


def make_grid(schedule: NoiseSchedule, n_steps: int) -> StepGrid:
    """Uniformly spaced grid of n_steps sampler steps starting at T."""
    if not 1 <= n_steps <= schedule.T:
        raise InvalidStepOrder(f"Grid size {n_steps} outside [1, {schedule.T}]")
    indices = np.rint(np.linspace(schedule.T, 0, n_steps + 1)).astype(int)
    return StepGrid(tuple(indices.tolist()))


def subdivide(t_from: int, t_to: int, m: int) -> List[Tuple[int, int]]:
    """Split one grid interval into m equal integer sub-intervals."""
    if m < 1 or t_from - t_to < m:
        raise InvalidStepOrder(f"Cannot split interval {t_from}->{t_to} into {m} sub-steps")
    cuts = np.rint(np.linspace(t_from, t_to, m + 1)).astype(int).tolist()
    return list(zip(cuts[:-1], cuts[1:]))


def forward_noise(schedule: NoiseSchedule, x0: np.ndarray, t, rng: RngStream) -> Tuple[np.ndarray, np.ndarray]:
    """
    Corrupt clean points to step t: x_t = sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps.

    Args:
        schedule: Noise schedule
        x0: Clean point (2,) or batch (n, 2)
        t: Index in [0, T], scalar or one per row
        rng: Source of eps

    Returns:
        (x_t, eps), both shaped like x0

    Raises:
        IndexOutOfRange: If any t lies outside [0, T]
    """
    schedule.check_index(t)
    x0 = np.asarray(x0, dtype=np.float64)
    t = np.asarray(t)
    eps = rng.normal(x0.shape)
    signal = schedule.signal(t)
    noise = schedule.noise(t)
    if t.ndim:
        signal = signal[:, None]
        noise = noise[:, None]
    return signal * x0 + noise * eps, eps
