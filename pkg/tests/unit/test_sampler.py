"""
Unit tests for the DDIM, ancestral, hybrid and skip-first samplers.
"""
import numpy as np
import pytest

from ddlab.diffusion.sampler import (
    ModelPredictor,
    SamplerConfig,
    Variance,
    ancestral_step,
    ddim_step,
    dt_estimate,
    dt_visualize,
    guided_eval,
    hybrid_sample,
    recompute_dt,
    sample,
    skip_first_sample,
    standard_normal_oracle,
)
from ddlab.denoiser.network import Architecture, Role, forward, init_model
from ddlab.diffusion.schedule import make_grid, make_schedule
from ddlab.errors import GridTooShort, IndexOutOfRange, InvalidStepOrder, ShapeMismatch, UnconditionalModel
from ddlab.numerics import RngStream


class TestOracle:
    """Closed-form checks with the optimal predictor for N(0, I) data."""

    def test_dt_estimate_is_scaled_state(self, schedule):
        """Clean estimates equal sqrt(ab_t) * x_t for the optimal predictor."""
        oracle = standard_normal_oracle(schedule)
        traj = sample(oracle, schedule, SamplerConfig(grid=make_grid(schedule, 32)), RngStream(seed=1), n_chains=100)

        for r, t in enumerate(traj.t):
            expected = np.sqrt(schedule.alpha_bar[t]) * traj.states[r]
            assert np.max(np.abs(traj.dt[r] - expected)) < 1e-9

    def test_ancestral_chain_preserves_standard_normal(self, schedule):
        """The 64-step ancestral chain maps N(0, I) to N(0, I) within 3% moment error."""
        oracle = standard_normal_oracle(schedule)
        config = SamplerConfig(grid=make_grid(schedule, 64), stochastic=True, variance=Variance.BETA)
        traj = sample(oracle, schedule, config, RngStream(seed=2), n_chains=100_000)

        assert np.all(np.abs(traj.x0.mean(axis=0)) < 0.03)
        assert np.all(np.abs(traj.x0.var(axis=0) - 1.0) < 0.03)

    def test_ddim_roughly_preserves_variance(self, schedule):
        """Deterministic oracle sampling stays close to unit variance."""
        oracle = standard_normal_oracle(schedule)
        traj = sample(oracle, schedule, SamplerConfig(grid=make_grid(schedule, 32)), RngStream(seed=3),
                      n_chains=20_000)
        var = traj.x0.var(axis=0)

        assert np.all((var > 0.9) & (var < 1.05))


class TestSteps:
    """Test single steps."""

    def test_ddim_step_order(self, tiny_model, schedule):
        predictor = ModelPredictor(tiny_model)
        with pytest.raises(InvalidStepOrder):
            ddim_step(predictor, schedule, np.zeros((1, 2)), 10, 10)

    def test_ddim_step_to_zero_returns_clean_estimate(self, tiny_model, schedule):
        """Stepping to t = 0 lands on the one-shot clean estimate."""
        predictor = ModelPredictor(tiny_model)
        x = RngStream(seed=4).normal((5, 2))
        x_next, eps = ddim_step(predictor, schedule, x, 16, 0)

        assert np.allclose(x_next, dt_estimate(schedule, x, eps, 16), atol=1e-12)

    def test_ancestral_from_zero(self, tiny_model, schedule):
        """t_from must be at least 1."""
        with pytest.raises(IndexOutOfRange):
            ancestral_step(ModelPredictor(tiny_model), schedule, np.zeros((1, 2)), 0, RngStream(seed=1))

    def test_ancestral_last_step_is_noise_free(self, tiny_model, schedule):
        """No noise is drawn on the step that lands at 0."""
        x = RngStream(seed=5).normal((4, 2))
        a, _ = ancestral_step(ModelPredictor(tiny_model), schedule, x, 1, RngStream(seed=1))
        b, _ = ancestral_step(ModelPredictor(tiny_model), schedule, x, 1, RngStream(seed=2))

        assert np.array_equal(a, b)

    def test_ancestral_respaced_matches_single_step(self, tiny_model, schedule):
        """t_to = t_from - 1 is the default step."""
        x = RngStream(seed=5).normal((4, 2))
        a, _ = ancestral_step(ModelPredictor(tiny_model), schedule, x, 9, RngStream(seed=1))
        b, _ = ancestral_step(ModelPredictor(tiny_model), schedule, x, 9, RngStream(seed=1), t_to=8)

        assert np.array_equal(a, b)


class TestGuidance:
    """Test classifier-free guidance."""

    def test_linear_in_scale(self, tiny_model):
        """Guided output is eps_null + w (eps_cond - eps_null)."""
        x = RngStream(seed=6).normal((10, 2))
        cond = np.arange(10) % 3
        eps_null = forward(tiny_model, x, 0.5, None)
        eps_cond = forward(tiny_model, x, 0.5, cond)

        for w in (-1.0, 0.0, 1.0, 2.5):
            expected = eps_null + w * (eps_cond - eps_null)
            assert np.allclose(guided_eval(tiny_model, x, 0.5, cond, w), expected, atol=1e-12)

    def test_unconditional_model_rejects_condition(self, schedule):
        arch = Architecture(hidden=(8,), time_embed_dim=4, cond_embed_dim=2, n_conditions=0)
        model = init_model(arch, schedule.alpha_bar, schedule.schedule_id, RngStream(seed=1))

        with pytest.raises(UnconditionalModel):
            guided_eval(model, np.zeros((1, 2)), 0.5, np.array([0]), 2.0)
        with pytest.raises(UnconditionalModel):
            ModelPredictor(model, cond=0)

    def test_cost(self, tiny_model):
        """Guidance other than 0 or 1 costs two evaluations."""
        assert ModelPredictor(tiny_model).cost == 1
        assert ModelPredictor(tiny_model, cond=1, guidance=1.0).cost == 1
        assert ModelPredictor(tiny_model, cond=1, guidance=3.0).cost == 2


class TestSamplers:
    """Test full sampling runs."""

    def test_records_and_evaluations(self, tiny_model, schedule):
        """One record per grid step; evaluations count network calls."""
        traj = sample(tiny_model, schedule, SamplerConfig(grid=make_grid(schedule, 32)), RngStream(seed=1),
                      n_chains=3)

        assert traj.n_records == 32
        assert traj.evaluations == 32
        assert traj.states.shape == (32, 3, 2)
        assert traj.roles == ["base"] * 32

    def test_same_seed_same_samples(self, tiny_model, schedule):
        config = SamplerConfig(grid=make_grid(schedule, 8), stochastic=True)
        a = sample(tiny_model, schedule, config, RngStream(seed=9), n_chains=4)
        b = sample(tiny_model, schedule, config, RngStream(seed=9), n_chains=4)

        assert np.array_equal(a.x0, b.x0)

    def test_evaluation_counts_per_arm(self, tiny_model, tiny_student, schedule):
        """Base, distilled, hybrid (k=1, m=1) and skip-first cost 32 / 4 / 4 / 3."""
        base_grid, grid = make_grid(schedule, 32), make_grid(schedule, 4)

        base = sample(tiny_model, schedule, SamplerConfig(grid=base_grid), RngStream(seed=1))
        distilled = sample(tiny_student, schedule, SamplerConfig(grid=grid), RngStream(seed=1))
        hybrid = hybrid_sample(tiny_model, tiny_student, schedule, SamplerConfig(grid=grid, transition_point=1),
                               RngStream(seed=1))
        skip = skip_first_sample(tiny_student, schedule, SamplerConfig(grid=grid), RngStream(seed=1))

        assert [base.evaluations, distilled.evaluations, hybrid.evaluations, skip.evaluations] == [32, 4, 4, 3]

    def test_hybrid_roles(self, tiny_model, tiny_student, schedule):
        traj = hybrid_sample(tiny_model, tiny_student, schedule,
                             SamplerConfig(grid=make_grid(schedule, 4), transition_point=1), RngStream(seed=1))

        assert traj.roles == ["base", "distilled", "distilled", "distilled"]

    @pytest.mark.parametrize("stochastic", [False, True])
    def test_hybrid_k0_equals_distilled(self, tiny_model, tiny_student, schedule, stochastic):
        """k = 0 is bit-identical to the distilled sampler on shared seeds."""
        config = SamplerConfig(grid=make_grid(schedule, 4), transition_point=0, stochastic=stochastic)
        hybrid = hybrid_sample(tiny_model, tiny_student, schedule, config, RngStream(seed=3), n_chains=50)
        plain = sample(tiny_student, schedule, SamplerConfig(grid=config.grid, stochastic=stochastic),
                       RngStream(seed=3), n_chains=50)

        assert np.array_equal(hybrid.x0, plain.x0)
        assert np.array_equal(hybrid.dt, plain.dt)

    @pytest.mark.parametrize("stochastic", [False, True])
    def test_hybrid_kN_equals_base(self, tiny_model, tiny_student, schedule, stochastic):
        """k = N, m = 1 is bit-identical to the base model on the distilled grid."""
        grid = make_grid(schedule, 4)
        config = SamplerConfig(grid=grid, transition_point=4, stochastic=stochastic)
        hybrid = hybrid_sample(tiny_model, tiny_student, schedule, config, RngStream(seed=3), n_chains=50)
        plain = sample(tiny_model, schedule, SamplerConfig(grid=grid, stochastic=stochastic),
                       RngStream(seed=3), n_chains=50)

        assert np.array_equal(hybrid.x0, plain.x0)

    def test_substeps(self, tiny_model, tiny_student, schedule):
        """Each base step splits into m recorded sub-steps."""
        config = SamplerConfig(grid=make_grid(schedule, 4), transition_point=2, base_substeps=4)
        traj = hybrid_sample(tiny_model, tiny_student, schedule, config, RngStream(seed=1))

        assert traj.n_records == 4 + 2 * 3
        assert traj.evaluations == 10
        assert list(traj.t[:4]) == [64, 60, 56, 52]

    def test_hybrid_k_too_large(self, tiny_model, tiny_student, schedule):
        with pytest.raises(GridTooShort):
            hybrid_sample(tiny_model, tiny_student, schedule,
                          SamplerConfig(grid=make_grid(schedule, 4), transition_point=5), RngStream(seed=1))

    def test_hybrid_schedule_mismatch(self, tiny_model, schedule):
        """A student trained on another schedule cannot take over the chain."""
        other = make_schedule("cosine", 32)
        student = init_model(tiny_model.arch, other.alpha_bar, other.schedule_id, RngStream(seed=8, stream_id=1),
                             role=Role.DISTILLED)

        with pytest.raises(ShapeMismatch, match="cosine-T32"):
            hybrid_sample(tiny_model, student, schedule,
                          SamplerConfig(grid=make_grid(schedule, 4), transition_point=1), RngStream(seed=1))

    def test_skip_first_needs_two_steps(self, tiny_student, schedule):
        with pytest.raises(GridTooShort):
            skip_first_sample(tiny_student, schedule, SamplerConfig(grid=make_grid(schedule, 1)), RngStream(seed=1))

    def test_skip_first_starts_at_second_entry(self, tiny_student, schedule):
        """Skip-first starts from fresh noise at the second grid index."""
        traj = skip_first_sample(tiny_student, schedule, SamplerConfig(grid=make_grid(schedule, 4)),
                                 RngStream(seed=1), n_chains=5)

        assert list(traj.t) == [48, 32, 16]
        assert np.array_equal(traj.x_start, RngStream(seed=1).normal((5, 2)))

    def test_recompute_dt(self, tiny_model, schedule):
        """Stored clean estimates match recomputation from states and eps to 1e-12."""
        traj = sample(tiny_model, schedule, SamplerConfig(grid=make_grid(schedule, 32), stochastic=True),
                      RngStream(seed=4), n_chains=32)

        assert np.max(np.abs(recompute_dt(schedule, traj) - traj.dt)) < 1e-12

    def test_dt_visualize(self, tiny_model, schedule):
        traj = sample(tiny_model, schedule, SamplerConfig(grid=make_grid(schedule, 4)), RngStream(seed=1))
        pairs = dt_visualize(traj)

        assert [t for t, _ in pairs] == [64, 48, 32, 16]
        assert np.array_equal(pairs[0][1], traj.dt[0])

    def test_chain_view(self, tiny_model, schedule):
        traj = sample(tiny_model, schedule, SamplerConfig(grid=make_grid(schedule, 4)), RngStream(seed=1),
                      n_chains=3)
        single = traj.chain(2)

        assert single.n_chains == 1
        assert np.array_equal(single.x0[0], traj.x0[2])
        with pytest.raises(IndexOutOfRange):
            traj.chain(3)
