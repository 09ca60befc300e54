"""
Ground-truth 2-D toy distributions.

Exact samplers plus the oracle mode classifier and attribute readout that stand
in for learned feature networks.
"""
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Tuple

import numpy as np
from scipy.special import softmax

from ddlab.errors import UnsupportedKind
from ddlab.numerics import RngStream

UNLABELED = -1


class DistKind(str, Enum):
    """Supported toy distribution families."""
    GMM_RING = "gmm_ring"
    TWO_MOONS = "two_moons"
    SPIRAL = "spiral"


DEFAULT_PARAMS: Dict[DistKind, Dict[str, float]] = {
    DistKind.GMM_RING: {"n_modes": 8, "ring_radius": 4.0, "mode_std": 0.15},
    DistKind.TWO_MOONS: {"scale": 2.5, "noise_std": 0.1},
    DistKind.SPIRAL: {"turns": 2.0, "radius": 5.0, "noise_std": 0.1},
}


@dataclass(frozen=True)
class ToyDistribution:
    """A toy data distribution with its controllable attribute axis."""
    kind: DistKind = DistKind.GMM_RING
    params: Dict[str, float] = field(default_factory=dict)
    attribute_direction: Tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        kind = DistKind(self.kind)
        object.__setattr__(self, "kind", kind)
        merged = {**DEFAULT_PARAMS[kind], **self.params}
        object.__setattr__(self, "params", merged)

        if kind == DistKind.GMM_RING:
            if int(merged["n_modes"]) < 2:
                raise ValueError(f"gmm_ring needs n_modes >= 2, got {merged['n_modes']}")
            if merged["mode_std"] <= 0:
                raise ValueError(f"gmm_ring needs mode_std > 0, got {merged['mode_std']}")
            if merged["ring_radius"] <= 0:
                raise ValueError(f"gmm_ring needs ring_radius > 0, got {merged['ring_radius']}")

        direction = tuple(float(v) for v in self.attribute_direction)
        if abs(math.hypot(*direction) - 1.0) > 1e-12:
            raise ValueError(f"attribute_direction must have unit norm, got {direction}")
        object.__setattr__(self, "attribute_direction", direction)

    @property
    def n_modes(self) -> int:
        """Number of labeled modes (0 for unlabeled kinds)."""
        if self.kind == DistKind.GMM_RING:
            return int(self.params["n_modes"])
        return 0

    def centers(self) -> np.ndarray:
        """Mode centers of a gmm_ring, shape (n_modes, 2)."""
        self._require_mixture()
        n_modes = self.n_modes
        radius = self.params["ring_radius"]
        angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
        return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def _require_mixture(self):
        if self.kind != DistKind.GMM_RING:
            raise UnsupportedKind(f"Operation requires a gmm_ring distribution, got {self.kind.value}")


@dataclass
class LabeledBatch:
    """Points with their generating mode labels (UNLABELED for non-mixtures)."""
    points: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]


def sample_truth(dist: ToyDistribution, n: int, rng: RngStream) -> LabeledBatch:
    """Draw n i.i.d. samples from the exact distribution."""
    if n < 1:
        raise ValueError(f"sample_truth needs n >= 1, got {n}")

    if dist.kind == DistKind.GMM_RING:
        labels = rng.integers(0, dist.n_modes, n)
        noise = rng.normal((n, 2)) * dist.params["mode_std"]
        return LabeledBatch(points=dist.centers()[labels] + noise, labels=labels)

    if dist.kind == DistKind.TWO_MOONS:
        scale = dist.params["scale"]
        upper = rng.uniform(n) < 0.5
        theta = np.pi * rng.uniform(n)
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        points = np.stack([x - 0.5, y - 0.25], axis=1) * scale
        points += rng.normal((n, 2)) * dist.params["noise_std"]
        return LabeledBatch(points=points, labels=np.full(n, UNLABELED))

    # spiral
    turns = dist.params["turns"]
    theta = np.sqrt(rng.uniform(n)) * turns * 2.0 * np.pi
    r = dist.params["radius"] * theta / (turns * 2.0 * np.pi)
    points = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    points += rng.normal((n, 2)) * dist.params["noise_std"]
    return LabeledBatch(points=points, labels=np.full(n, UNLABELED))


def oracle_posterior(dist: ToyDistribution, p: np.ndarray) -> np.ndarray:
    """
    Exact mixture posterior p(mode | x).

    Args:
        dist: gmm_ring distribution
        p: a point (2,) or batch (n, 2)

    Returns:
        Probabilities of shape (n_modes,) or (n, n_modes)

    Raises:
        UnsupportedKind: For non-mixture distributions
    """
    dist._require_mixture()
    p = np.asarray(p, dtype=np.float64)
    batch = np.atleast_2d(p)
    sq_dist = np.sum((batch[:, None, :] - dist.centers()[None, :, :]) ** 2, axis=-1)
    log_lik = -sq_dist / (2.0 * dist.params["mode_std"] ** 2)
    posterior = softmax(log_lik, axis=1)
    return posterior[0] if p.ndim == 1 else posterior


def oracle_modes(dist: ToyDistribution, points: np.ndarray) -> np.ndarray:
    """Argmax oracle mode for each point of a batch."""
    return np.argmax(oracle_posterior(dist, np.atleast_2d(points)), axis=1)


def attribute_value(dist: ToyDistribution, p: np.ndarray) -> np.ndarray:
    """Coordinate of p along the controllable attribute axis."""
    return np.asarray(p, dtype=np.float64) @ np.asarray(dist.attribute_direction)
