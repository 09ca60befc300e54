"""
Pytest configuration for unit tests.

Fast fixtures build tiny untrained models; the session-scoped `trained_lab`
fixture trains the default-budget base model and both students once for
the slow end-to-end suites.
"""
import os

import pytest

from ddlab.denoiser.network import Architecture, Role, init_model
from ddlab.diffusion.schedule import make_schedule
from ddlab.numerics import RngStream
from ddlab.toy_data import DistKind, ToyDistribution

# Keep CLI tests quiet unless a developer asks otherwise
os.environ.setdefault("DDLAB_LOG_LEVEL", "WARNING")

TINY_ARCH = Architecture(hidden=(8, 8), time_embed_dim=4, cond_embed_dim=2, n_conditions=3)


@pytest.fixture
def schedule():
    """Cosine schedule with T=64."""
    return make_schedule("cosine", 64)


@pytest.fixture
def ring():
    """Default 8-mode ring."""
    return ToyDistribution(kind=DistKind.GMM_RING)


@pytest.fixture
def tiny_model(schedule):
    """Width-8 conditional model with random weights."""
    return init_model(TINY_ARCH, schedule.alpha_bar, schedule.schedule_id, RngStream(seed=7, stream_id=1))


@pytest.fixture
def tiny_student(schedule):
    """A second tiny model, tagged distilled, with different weights."""
    return init_model(TINY_ARCH, schedule.alpha_bar, schedule.schedule_id, RngStream(seed=8, stream_id=1),
                      role=Role.DISTILLED)


def smoke_config_dict(output_dir) -> dict:
    """Run config small enough for the CLI and determinism tests."""
    return {
        "distribution": {"kind": "gmm_ring"},
        "schedule": {"T": 16},
        "model": {"hidden": [8, 8], "time_embed_dim": 4, "cond_embed_dim": 2},
        "training": {"iterations": 3, "batch": 16, "log_every": 1},
        "distillation": {"iterations_per_round": 2, "regression_iterations": 2, "batch": 8,
                         "pool_size": 16, "n_validation": 8, "n_pairs": 8, "log_every": 1},
        "sampler": {"base_steps": 8, "distilled_steps": 2},
        "sweep": {"guidance": [0.0, 2.0], "k": [0, 1, 2], "substeps": [1, 2]},
        "control": {"iterations": 2, "batch": 8, "n_samples": 16, "n_panel": 8, "rank": 2},
        "metrics": {"n_samples": 64, "n_truth": 64, "dt_chains": 8, "panel_chains": 2},
        "seeds": {"master": 42},
        "output_dir": str(output_dir),
    }


@pytest.fixture
def smoke_config_dict_factory():
    return smoke_config_dict


@pytest.fixture(scope="session")
def trained_lab(tmp_path_factory):
    """
    End-to-end lab on the benchmark ring at the default model, training and
    distillation budgets: trained base plus regression and progressive
    students, all in one run directory.
    """
    from ddlab.experiment import commands
    from ddlab.experiment.config import validate_config

    run_dir = tmp_path_factory.mktemp("lab")
    data = {
        "distribution": {"kind": "gmm_ring"},
        "schedule": {"T": 64},
        "training": {"log_every": 500},
        "distillation": {"log_every": 500},
        "metrics": {"n_samples": 10000, "n_truth": 10000, "dt_chains": 256},
        "seeds": {"master": 42},
        "output_dir": str(run_dir),
    }
    config = validate_config(data)
    commands.cmd_train_base(config)
    commands.cmd_distill(config, "regression")
    commands.cmd_distill(config, "progressive")
    return config
