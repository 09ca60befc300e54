"""
Unit tests for low-rank adapters.
"""
import numpy as np
import pytest

from ddlab.denoiser.lora import check_compatible, init_adapter, merge_adapter
from ddlab.denoiser.network import Architecture, forward, init_model
from ddlab.errors import ShapeMismatch
from ddlab.numerics import RngStream


def _trained_like(adapter, seed=11):
    for i in adapter.targets:
        adapter.up[i][...] = RngStream(seed=seed, stream_id=i).normal(adapter.up[i].shape) * 0.2
    return adapter


def _inputs(n=100):
    rng = RngStream(seed=21)
    return rng.normal((n, 2)), rng.uniform(n), rng.integers(-1, 3, n)


class TestAdapterNeutrality:
    """A fresh or zero-scale adapter changes nothing."""

    def test_fresh_adapter_is_noop(self, tiny_model):
        """Zero up factors leave the output bit-identical."""
        adapter = init_adapter(tiny_model, RngStream(seed=1))
        x, t_frac, cond = _inputs()

        assert np.array_equal(forward(tiny_model, x, t_frac, cond, adapter), forward(tiny_model, x, t_frac, cond))

    def test_scale_zero_is_noop(self, tiny_model):
        """Any adapter at scale 0 leaves the output bit-identical."""
        adapter = _trained_like(init_adapter(tiny_model, RngStream(seed=1)))
        x, t_frac, cond = _inputs()

        assert np.array_equal(forward(tiny_model, x, t_frac, cond, adapter.with_scale(0.0)),
                              forward(tiny_model, x, t_frac, cond))

    def test_nonzero_scale_changes_output(self, tiny_model):
        adapter = _trained_like(init_adapter(tiny_model, RngStream(seed=1)))
        x, t_frac, cond = _inputs()

        assert not np.allclose(forward(tiny_model, x, t_frac, cond, adapter), forward(tiny_model, x, t_frac, cond))


class TestMergeAdapter:
    """Test folding an adapter into the weights."""

    @pytest.mark.parametrize("scale", [1.0, -2.0, 0.5])
    def test_merge_matches_attached(self, tiny_model, scale):
        """Merged and attached forwards agree to 1e-12 on 100 random inputs."""
        adapter = _trained_like(init_adapter(tiny_model, RngStream(seed=1))).with_scale(scale)
        merged = merge_adapter(tiny_model, adapter)
        x, t_frac, cond = _inputs()

        assert np.max(np.abs(forward(merged, x, t_frac, cond) - forward(tiny_model, x, t_frac, cond, adapter))) < 1e-12

    def test_merge_at_zero_keeps_weights(self, tiny_model):
        """Merging at scale 0 copies the weights bit for bit."""
        adapter = _trained_like(init_adapter(tiny_model, RngStream(seed=1)))
        merged = merge_adapter(tiny_model, adapter, scale=0.0)

        for name, p in tiny_model.params.items():
            assert np.array_equal(merged.params[name], p)
        assert merged.params["W0"] is not tiny_model.params["W0"]

    def test_merge_does_not_touch_source(self, tiny_model):
        adapter = _trained_like(init_adapter(tiny_model, RngStream(seed=1)))
        before = tiny_model.params["W0"].copy()
        merge_adapter(tiny_model, adapter)

        assert np.array_equal(tiny_model.params["W0"], before)


class TestCompatibility:
    """Test shape checks."""

    def test_fits_same_architecture(self, tiny_model, tiny_student):
        """An adapter built on one model fits any model of the same architecture."""
        check_compatible(tiny_student, init_adapter(tiny_model, RngStream(seed=1)))

    def test_rejects_other_architecture(self, tiny_model, schedule):
        other = init_model(Architecture(hidden=(16, 16), time_embed_dim=4, cond_embed_dim=2, n_conditions=3),
                           schedule.alpha_bar, schedule.schedule_id, RngStream(seed=1))
        with pytest.raises(ShapeMismatch):
            check_compatible(other, init_adapter(tiny_model, RngStream(seed=1)))

    def test_rank_too_large(self, tiny_model):
        """Rank cannot exceed the narrowest targeted dimension."""
        with pytest.raises(ShapeMismatch):
            init_adapter(tiny_model, RngStream(seed=1), rank=9)

    def test_targets_out_of_range(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            init_adapter(tiny_model, RngStream(seed=1), targets=[5])

    def test_params_are_views(self, tiny_model):
        """Named params share memory with the factors, so optimizers update in place."""
        adapter = init_adapter(tiny_model, RngStream(seed=1))

        assert adapter.params()["up0"] is adapter.up[0]
