"""
Unit tests for run config loading, overrides and hashing.
"""
import json
from pathlib import Path

import pytest

from ddlab.errors import ConfigError, ConfigInvalid
from ddlab.experiment.config import config_hash, load_config, parse_override, validate_config

REPO_ROOT = Path(__file__).parent.parent.parent
DEFAULT_CONFIG = REPO_ROOT / "configs" / "gmm_ring.json"


def _write(tmp_path, data, name="run.json") -> Path:
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


class TestLoadConfig:
    """Test loading and validation."""

    def test_default_config_loads(self):
        """The checked-in benchmark config validates."""
        config = load_config(DEFAULT_CONFIG)

        assert config.distribution.kind.value == "gmm_ring"
        assert config.schedule.T == 64
        assert (config.sampler.base_steps, config.sampler.distilled_steps) == (32, 4)
        assert config.seeds.master == 42
        assert config.output_dir == "runs/gmm_ring"

    def test_missing_file(self, tmp_path):
        """A missing config is a config error."""
        with pytest.raises(ConfigInvalid):
            load_config(tmp_path / "absent.json")
        assert issubclass(ConfigInvalid, ConfigError)

    def test_missing_field_named(self, tmp_path, smoke_config_dict_factory):
        """The error message names the missing field."""
        data = smoke_config_dict_factory(tmp_path)
        del data["schedule"]

        with pytest.raises(ConfigInvalid, match="schedule"):
            load_config(_write(tmp_path, data))

    def test_unknown_field_rejected(self, tmp_path, smoke_config_dict_factory):
        data = smoke_config_dict_factory(tmp_path)
        data["sampler"]["steps"] = 4

        with pytest.raises(ConfigInvalid, match="sampler.steps"):
            load_config(_write(tmp_path, data))

    def test_yaml_accepted(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("distribution:\n  kind: gmm_ring\nschedule:\n  T: 32\nseeds:\n  master: 1\n")

        config = load_config(path)
        assert config.schedule.T == 32

    @pytest.mark.parametrize("override, message", [
        ("sampler.distilled_steps=5", "distilled_steps"),
        ("sampler.transition_point=9", "transition_point"),
        ("schedule.T=2", "schedule.T"),
        ("sampler.base_substeps=0", "base_substeps"),
        ("distribution.params.n_modes=1", "n_modes"),
        ("control.scales=[1, 2]", "scales"),
    ])
    def test_preconditions_enforced(self, tmp_path, smoke_config_dict_factory, override, message):
        """Module preconditions are checked before any work starts."""
        path = _write(tmp_path, smoke_config_dict_factory(tmp_path))

        with pytest.raises(ConfigInvalid, match=message):
            load_config(path, [override])

    def test_attribute_direction_normalized(self, tmp_path, smoke_config_dict_factory):
        data = smoke_config_dict_factory(tmp_path)
        data["distribution"]["attribute_direction"] = [3.0, 4.0]

        config = load_config(_write(tmp_path, data))
        assert config.toy_distribution().attribute_direction == (0.6, 0.8)


class TestOverrides:
    """Test --set parsing."""

    def test_values_typed(self):
        """Override values are parsed as YAML scalars and lists."""
        assert parse_override("training.iterations=2000") == ("training.iterations", 2000)
        assert parse_override("sampler.stochastic=true") == ("sampler.stochastic", True)
        assert parse_override("sweep.k=[0, 1]") == ("sweep.k", [0, 1])
        assert parse_override("output_dir=runs/x") == ("output_dir", "runs/x")

    def test_missing_equals(self):
        with pytest.raises(ConfigInvalid):
            parse_override("training.iterations")

    def test_override_applied(self, tmp_path, smoke_config_dict_factory):
        path = _write(tmp_path, smoke_config_dict_factory(tmp_path))
        config = load_config(path, ["training.iterations=7", "sampler.guidance_scale=2.5"], output_dir="elsewhere")

        assert config.training.iterations == 7
        assert config.sampler.guidance_scale == 2.5
        assert config.output_dir == "elsewhere"


class TestConfigHash:
    """Test the canonical config hash."""

    def test_output_dir_excluded(self, tmp_path, smoke_config_dict_factory):
        """Moving the run directory does not change the hash."""
        a = validate_config(smoke_config_dict_factory(tmp_path / "a"))
        b = validate_config(smoke_config_dict_factory(tmp_path / "b"))

        assert config_hash(a) == config_hash(b)
        assert len(config_hash(a)) == 64

    def test_semantic_change_changes_hash(self, tmp_path, smoke_config_dict_factory):
        data = smoke_config_dict_factory(tmp_path)
        a = validate_config(data)
        data["seeds"]["master"] = 43
        b = validate_config(data)

        assert config_hash(a) != config_hash(b)

    def test_defaults_make_no_difference(self, tmp_path):
        """Spelling out a default gives the same hash as omitting it."""
        minimal = {"distribution": {"kind": "gmm_ring"}, "schedule": {"T": 64}, "seeds": {"master": 42}}
        explicit = json.loads(json.dumps(minimal))
        explicit["training"] = {"iterations": 10000}

        assert config_hash(validate_config(minimal)) == config_hash(validate_config(explicit))

    def test_seed_streams_independent(self, tmp_path, smoke_config_dict_factory):
        """Purposes map to distinct streams; equal purposes replay."""
        config = validate_config(smoke_config_dict_factory(tmp_path))

        assert config.rng("sample").normal(4).tolist() == config.rng("sample").normal(4).tolist()
        assert config.rng("sample").normal(4).tolist() != config.rng("train").normal(4).tolist()
