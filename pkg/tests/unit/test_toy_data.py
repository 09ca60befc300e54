"""
Unit tests for toy distributions and their oracles.
"""
import numpy as np
import pytest

from ddlab.errors import UnsupportedKind
from ddlab.numerics import RngStream
from ddlab.toy_data import (
    UNLABELED,
    DistKind,
    ToyDistribution,
    attribute_value,
    oracle_modes,
    oracle_posterior,
    sample_truth,
)


class TestToyDistribution:
    """Test distribution construction."""

    def test_defaults_merged(self):
        """Missing params fall back to the family defaults."""
        dist = ToyDistribution(kind=DistKind.GMM_RING, params={"n_modes": 4})

        assert dist.n_modes == 4
        assert dist.params["ring_radius"] == 4.0
        assert dist.params["mode_std"] == 0.15

    def test_centers_on_ring(self, ring):
        """Centers lie on the ring at equal angles, the first on the x axis."""
        centers = ring.centers()

        assert centers.shape == (8, 2)
        assert np.allclose(np.linalg.norm(centers, axis=1), 4.0)
        assert np.allclose(centers[0], [4.0, 0.0])

    def test_rejects_single_mode(self):
        """A ring needs at least two modes."""
        with pytest.raises(ValueError):
            ToyDistribution(kind=DistKind.GMM_RING, params={"n_modes": 1})

    def test_rejects_non_unit_direction(self):
        """The attribute direction must be normalized."""
        with pytest.raises(ValueError):
            ToyDistribution(attribute_direction=(1.0, 1.0))

    def test_unlabeled_kinds_have_no_modes(self):
        """Moons and spirals report zero modes."""
        assert ToyDistribution(kind=DistKind.TWO_MOONS).n_modes == 0
        assert ToyDistribution(kind=DistKind.SPIRAL).n_modes == 0


class TestSampleTruth:
    """Test exact samplers."""

    def test_deterministic(self, ring):
        """Same stream, same batch."""
        a = sample_truth(ring, 100, RngStream(seed=1))
        b = sample_truth(ring, 100, RngStream(seed=1))

        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.labels, b.labels)

    def test_ring_moments(self, ring):
        """Points sit at their label's center with the configured spread."""
        batch = sample_truth(ring, 20_000, RngStream(seed=2))
        offsets = batch.points - ring.centers()[batch.labels]

        assert len(batch) == 20_000
        assert abs(offsets.std() - 0.15) < 0.005
        assert np.all(np.bincount(batch.labels, minlength=8) > 2000)

    def test_mode_shares_balanced(self, ring):
        """Every mode gets 12.5% of the draws to within half a percent."""
        batch = sample_truth(ring, 100_000, RngStream(seed=6))
        shares = np.bincount(batch.labels, minlength=8) / 100_000

        assert np.all(np.abs(shares - 0.125) <= 0.005)

    @pytest.mark.parametrize("kind", [DistKind.TWO_MOONS, DistKind.SPIRAL])
    def test_unlabeled_kinds(self, kind):
        """Non-mixture samples carry the UNLABELED marker."""
        batch = sample_truth(ToyDistribution(kind=kind), 50, RngStream(seed=3))

        assert batch.points.shape == (50, 2)
        assert np.all(batch.labels == UNLABELED)
        assert np.all(np.isfinite(batch.points))

    def test_rejects_empty(self, ring):
        """n must be positive."""
        with pytest.raises(ValueError):
            sample_truth(ring, 0, RngStream(seed=1))


class TestOracles:
    """Test the mixture posterior and attribute readout."""

    def test_posterior_sums_to_one(self, ring):
        """Posterior rows are probability vectors."""
        points = RngStream(seed=4).normal((100, 2)) * 3.0
        posterior = oracle_posterior(ring, points)

        assert posterior.shape == (100, 8)
        assert np.allclose(posterior.sum(axis=1), 1.0)

    def test_single_point_shape(self, ring):
        """A Vec2 input gives a 1-D posterior."""
        assert oracle_posterior(ring, np.array([4.0, 0.0])).shape == (8,)

    def test_posterior_rotation_equivariant(self, ring):
        """Rotating a point by one mode spacing rolls its posterior by one mode."""
        angle = 2.0 * np.pi / 8
        rotation = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        points = RngStream(seed=6).normal((50, 2)) * 3.0

        rotated = oracle_posterior(ring, points @ rotation.T)

        assert np.allclose(rotated, np.roll(oracle_posterior(ring, points), 1, axis=1), atol=1e-9)

    def test_posterior_at_center_and_origin(self, ring):
        """A mode center is claimed by its own mode; the origin is uniform."""
        at_centers = oracle_posterior(ring, ring.centers())

        assert np.all(np.diag(at_centers) > 0.999)
        assert np.allclose(oracle_posterior(ring, np.zeros(2)), 1.0 / 8, atol=1e-12)

    def test_argmax_matches_generating_label(self, ring):
        """For well-separated modes the oracle recovers the generating component."""
        batch = sample_truth(ring, 5000, RngStream(seed=5))

        assert np.array_equal(oracle_modes(ring, batch.points), batch.labels)

    def test_unsupported_kind(self):
        """The posterior needs a mixture."""
        with pytest.raises(UnsupportedKind):
            oracle_posterior(ToyDistribution(kind=DistKind.SPIRAL), np.zeros(2))

    def test_attribute_value_projects(self):
        """attribute_value is the projection onto the attribute axis."""
        dist = ToyDistribution(attribute_direction=(0.0, 1.0))
        points = np.array([[1.0, 2.0], [3.0, -4.0]])

        assert np.array_equal(attribute_value(dist, points), [2.0, -4.0])
