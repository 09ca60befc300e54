"""
Diversity, fidelity and commitment metrics for 2-D sample batches.

Oracle-based metrics (mode coverage, IS analogue, condition adherence) need a
gmm_ring distribution; the rest work on any point set.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from pydantic import BaseModel
from scipy.spatial.distance import pdist
from scipy.special import rel_entr

from ddlab.diffusion.sampler import Trajectory
from ddlab.errors import LengthMismatch, TooFewPoints
from ddlab.numerics import RngStream, batch_stats, psd_sqrt
from ddlab.toy_data import ToyDistribution, oracle_modes, oracle_posterior

logger = logging.getLogger(__name__)

EXACT_PAIRS_MAX_N = 2000
SUBSAMPLED_PAIRS = 100_000
PAIR_SEED = 1234
SMOOTH_WINDOW = 3
RAYLEIGH_MEDIAN = float(np.sqrt(2.0 * np.log(2.0)))


def _points(points) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def frechet_distance(gen, ref) -> float:
    """
    Frechet distance between Gaussians fitted to two point sets.

    ||mu1 - mu2||^2 + tr(S1 + S2 - 2 sqrt(sqrt(S1) S2 sqrt(S1)))

    Raises:
        TooFewPoints: If either set has fewer than 2 points
    """
    mu1, cov1 = batch_stats(_points(gen))
    mu2, cov2 = batch_stats(_points(ref))
    root1 = psd_sqrt(cov1)
    inner = root1 @ cov2 @ root1
    cross = psd_sqrt(0.5 * (inner + inner.T))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def sample_diversity(points) -> float:
    """
    Mean Euclidean distance over unordered pairs.

    Exact up to 2,000 points; above that, 100,000 uniformly drawn pairs from a
    fixed-seed stream.

    Raises:
        TooFewPoints: If fewer than 2 points are given
    """
    points = _points(points)
    n = points.shape[0]
    if n < 2:
        raise TooFewPoints(f"sample_diversity needs at least 2 points, got {n}")
    if n <= EXACT_PAIRS_MAX_N:
        return float(np.mean(pdist(points)))
    rng = RngStream(seed=PAIR_SEED)
    i = rng.integers(0, n, SUBSAMPLED_PAIRS)
    j = rng.integers(0, n - 1, SUBSAMPLED_PAIRS)
    j = j + (j >= i)
    return float(np.mean(np.linalg.norm(points[i] - points[j], axis=1)))


def conditional_sample_diversity(points, conds) -> float:
    """Mean of `sample_diversity` over condition groups with at least 2 points."""
    points = _points(points)
    conds = np.asarray(conds).reshape(-1)
    if conds.shape[0] != points.shape[0]:
        raise LengthMismatch(f"{points.shape[0]} points but {conds.shape[0]} conditions")
    values = [sample_diversity(points[conds == c]) for c in np.unique(conds) if np.sum(conds == c) >= 2]
    if not values:
        raise TooFewPoints("No condition group has 2 or more points")
    return float(np.mean(values))


@dataclass
class ModeStats:
    coverage: float
    within_mode_std: float
    histogram: np.ndarray


def mode_stats(dist: ToyDistribution, points) -> ModeStats:
    """
    Oracle mode assignment summary.

    A mode is covered when it receives at least n / (4 * n_modes) points.
    within_mode_std is a per-axis spread about each covered mode's own
    coordinate-wise median, read off the median distance to it; for an
    isotropic Gaussian mode that median is std * sqrt(2 ln 2). Points
    stranded between modes barely move it.

    Raises:
        UnsupportedKind: For non-mixture distributions
    """
    points = _points(points)
    if points.shape[0] < 1:
        raise TooFewPoints("mode_stats needs at least 1 point")
    modes = oracle_modes(dist, points)
    n_modes = dist.n_modes
    histogram = np.bincount(modes, minlength=n_modes)
    covered = histogram >= points.shape[0] / (4.0 * n_modes)

    spreads = []
    for j in np.flatnonzero(covered):
        members = points[modes == j]
        center = np.median(members, axis=0)
        spreads.append(np.median(np.linalg.norm(members - center, axis=1)) / RAYLEIGH_MEDIAN)
    return ModeStats(
        coverage=float(np.mean(covered)),
        within_mode_std=float(np.mean(spreads)) if spreads else 0.0,
        histogram=histogram,
    )


def is_analogue(dist: ToyDistribution, points) -> float:
    """exp(mean KL(p(y|x) || p(y))) with the exact mixture posterior as classifier."""
    points = _points(points)
    if points.shape[0] < 1:
        raise TooFewPoints("is_analogue needs at least 1 point")
    posterior = oracle_posterior(dist, points)
    marginal = posterior.mean(axis=0)
    kl = np.sum(rel_entr(posterior, marginal[None, :]), axis=1)
    return float(np.clip(np.exp(np.mean(kl)), 1.0, dist.n_modes))


def condition_adherence(dist: ToyDistribution, points, conds) -> float:
    """Fraction of samples whose oracle mode equals the condition they were drawn for."""
    points = _points(points)
    conds = np.asarray(conds).reshape(-1)
    if conds.shape[0] != points.shape[0]:
        raise LengthMismatch(f"{points.shape[0]} points but {conds.shape[0]} conditions")
    return float(np.mean(oracle_modes(dist, points) == conds))


class MetricsReport(BaseModel):
    """One row of the comparison table."""
    frechet: float
    sample_diversity: float
    mode_coverage: float
    within_mode_std: float
    is_analogue: float
    n_samples: int

    @classmethod
    def columns(cls) -> List[str]:
        return list(cls.model_fields)

    def row(self) -> list:
        return [getattr(self, name) for name in self.columns()]


def compute_report(dist: ToyDistribution, points, reference) -> MetricsReport:
    """Every batch metric of `points` against a truth reference batch."""
    points = _points(points)
    stats = mode_stats(dist, points)
    return MetricsReport(
        frechet=frechet_distance(points, reference),
        sample_diversity=sample_diversity(points),
        mode_coverage=stats.coverage,
        within_mode_std=stats.within_mode_std,
        is_analogue=is_analogue(dist, points),
        n_samples=points.shape[0],
    )


@dataclass
class DtCurve:
    """
    Normalized distance of the clean estimates to the final samples.

    The leading point (0, 1) is the starting noise; record s of S sits at
    fraction s / S.
    """
    fractions: np.ndarray
    distances: np.ndarray

    def smoothed(self, window: int = SMOOTH_WINDOW) -> np.ndarray:
        """Centered moving average; the window shrinks at the ends."""
        kernel = np.ones(window)
        sums = np.convolve(self.distances, kernel, mode="same")
        counts = np.convolve(np.ones_like(self.distances), kernel, mode="same")
        return sums / counts

    @property
    def first_step(self) -> float:
        """Distance after the first model step."""
        return float(self.distances[1])

    def crossing_fraction(self, level: float) -> float:
        """First step fraction at which the curve is at or below `level`."""
        below = np.flatnonzero(self.distances <= level)
        return float(self.fractions[below[0]]) if below.size else 1.0


def dt_curve(trajectory: Trajectory, final_points: Optional[np.ndarray] = None) -> DtCurve:
    """
    Mean distance between each step's clean estimate and the chain's final
    sample, normalized by the mean distance of the starting noise.

    Raises:
        LengthMismatch: If final_points does not have one row per chain
    """
    finals = trajectory.x0 if final_points is None else _points(final_points)
    if finals.shape[0] != trajectory.n_chains:
        raise LengthMismatch(f"{finals.shape[0]} final points for {trajectory.n_chains} chains")

    reference = float(np.mean(np.linalg.norm(trajectory.x_start - finals, axis=1)))
    raw = np.linalg.norm(trajectory.dt - finals[None, :, :], axis=2).mean(axis=1)
    scale = reference if reference > 0.0 else 1.0
    n_records = trajectory.n_records
    fractions = np.arange(n_records + 1) / n_records
    distances = np.concatenate([[1.0], raw / scale])
    return DtCurve(fractions=fractions, distances=distances)


@dataclass
class ModeFlipStats:
    """How often the oracle mode of the clean estimate changes along a chain."""
    flips: np.ndarray
    commit_fraction: np.ndarray

    @property
    def mean_flips(self) -> float:
        return float(np.mean(self.flips))

    @property
    def mean_commit_fraction(self) -> float:
        return float(np.mean(self.commit_fraction))


def dt_mode_flips(dist: ToyDistribution, trajectory: Trajectory) -> ModeFlipStats:
    """
    Per-chain count of oracle-mode changes along the clean estimates, and the
    step fraction from which the mode no longer changes.
    """
    n_records, n_chains = trajectory.n_records, trajectory.n_chains
    modes = oracle_modes(dist, trajectory.dt.reshape(-1, 2)).reshape(n_records, n_chains)
    changes = modes[1:] != modes[:-1]
    flips = changes.sum(axis=0)

    commit = np.ones(n_chains)
    for c in range(n_chains):
        changed_at = np.flatnonzero(changes[:, c])
        last = changed_at[-1] + 1 if changed_at.size else 0
        commit[c] = (last + 1) / n_records
    return ModeFlipStats(flips=flips, commit_fraction=commit)
