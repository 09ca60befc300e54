"""
Smoke tests for the experiment pipeline on a tiny config.
"""
import json

import numpy as np
import pytest

from ddlab.artifacts.manifest import MANIFEST_NAME, load_manifest
from ddlab.artifacts.store import read_csv
from ddlab.errors import ConfigInvalid, EmptyRunDir, MissingCheckpoint
from ddlab.experiment import commands
from ddlab.experiment.config import config_hash, validate_config


@pytest.fixture
def smoke_config(tmp_path, smoke_config_dict_factory):
    return validate_config(smoke_config_dict_factory(tmp_path / "run"))


@pytest.fixture
def trained_smoke(smoke_config):
    """Smoke config with base and regression checkpoints in place."""
    commands.cmd_train_base(smoke_config)
    commands.cmd_distill(smoke_config)
    return smoke_config


class TestTraining:
    """Test training commands."""

    def test_train_base(self, smoke_config, tmp_path):
        result = commands.cmd_train_base(smoke_config)

        assert result["stage"] == "train-base"
        assert commands.BASE_CKPT in result["artifacts"]
        losses = read_csv(tmp_path / "run" / "train" / "base_loss.csv")
        assert [int(r["iteration"]) for r in losses] == [1, 2, 3]

    def test_distill_needs_base(self, smoke_config):
        with pytest.raises(MissingCheckpoint):
            commands.cmd_distill(smoke_config)

    def test_distill_methods(self, trained_smoke, tmp_path):
        """Both methods write their own checkpoint and fidelity table."""
        commands.cmd_distill(trained_smoke, "progressive")
        run_dir = tmp_path / "run"

        assert (run_dir / commands.distilled_ckpt("regression")).exists()
        assert (run_dir / commands.distilled_ckpt("progressive")).exists()
        rounds = read_csv(run_dir / "distill" / "progressive_rounds.csv")
        assert [int(r["student_steps"]) for r in rounds] == [4, 2]
        fidelity = {r["metric"]: r["value"] for r in read_csv(run_dir / "distill" / "regression_fidelity.csv")}
        assert int(fidelity["n_pairs"]) == 8

    def test_unknown_method(self, trained_smoke):
        with pytest.raises(ConfigInvalid):
            commands.cmd_distill(trained_smoke, "consistency")


class TestSamplingCommands:
    """Test sample, eval, dt-viz, sweep and control on tiny checkpoints."""

    @pytest.mark.parametrize("arm", ["base", "distilled", "hybrid", "skip"])
    def test_sample_arm(self, trained_smoke, tmp_path, arm):
        result = commands.cmd_sample(trained_smoke, arm)
        run_dir = tmp_path / "run"

        assert len(read_csv(run_dir / "samples" / f"{arm}.csv")) == 64
        trajectory = read_csv(run_dir / "samples" / f"{arm}_trajectory.csv")
        assert list(trajectory[0]) == commands.TRAJECTORY_HEADER
        assert result["evaluations"][arm] > 0

    def test_base_arm_ancestral_by_default(self, trained_smoke):
        """The base arm samples ancestrally while the hybrid stays deterministic."""
        lab = commands._load_lab(commands.RunContext(trained_smoke, "sample"))
        sampler = trained_smoke.sampler.model_copy(update={"base_stochastic": False})
        ddim_config = trained_smoke.model_copy(update={"sampler": sampler})

        ancestral = commands.run_arm("base", lab, trained_smoke, 32)
        ddim = commands.run_arm("base", lab, ddim_config, 32)
        hybrid = commands.run_arm("hybrid", lab, trained_smoke, 32)
        hybrid_again = commands.run_arm("hybrid", lab, ddim_config, 32)

        assert trained_smoke.sampler.base_stochastic
        assert np.array_equal(ancestral.x_start, ddim.x_start)
        assert not np.allclose(ancestral.x0, ddim.x0)
        assert np.array_equal(hybrid.x0, hybrid_again.x0)

    def test_unknown_arm(self, trained_smoke):
        with pytest.raises(ConfigInvalid):
            commands.cmd_sample(trained_smoke, "teacher")

    def test_eval_rows(self, trained_smoke, tmp_path):
        """One row per arm plus truth, with the base arm as the Frechet yardstick."""
        commands.cmd_eval(trained_smoke)
        rows = read_csv(tmp_path / "run" / "eval" / "comparison.csv")

        assert [r["arm"] for r in rows] == ["truth", "base", "distilled", "hybrid", "skip"]
        assert list(rows[0]) == commands.EVAL_HEADER
        base = next(r for r in rows if r["arm"] == "base")
        assert base["frechet_le_base"] == "true"
        assert int(base["steps"]) == 8

    def test_eval_deterministic(self, trained_smoke, tmp_path):
        """Re-running eval on the same run directory reproduces the table byte for byte."""
        path = tmp_path / "run" / "eval" / "comparison.csv"
        commands.cmd_eval(trained_smoke)
        first = path.read_bytes()
        commands.cmd_eval(trained_smoke)

        assert path.read_bytes() == first

    def test_dtviz(self, trained_smoke, tmp_path):
        commands.cmd_dtviz(trained_smoke)
        run_dir = tmp_path / "run" / "dtviz"

        summary = {r["model"]: r for r in read_csv(run_dir / "summary.csv")}
        assert set(summary) == {"base", "distilled"}
        assert len(read_csv(run_dir / "base_curve.csv")) == 9
        assert len(read_csv(run_dir / "distilled_curve.csv")) == 3
        assert (run_dir / "mode_flips.csv").exists()
        assert (run_dir / "curves.svg").read_bytes().startswith(b"<?xml")

    def test_sweep_k(self, trained_smoke, tmp_path):
        commands.cmd_sweep(trained_smoke, "k")
        rows = read_csv(tmp_path / "run" / "sweep" / "k.csv")

        assert [int(r["value"]) for r in rows] == [0, 1, 2]
        assert list(rows[0]) == ["value", "sample_diversity", "frechet", "evaluations"]

    def test_sweep_substeps_costs_more(self, trained_smoke, tmp_path):
        """More base substeps in the first interval cost more evaluations."""
        commands.cmd_sweep(trained_smoke, "substeps")
        rows = read_csv(tmp_path / "run" / "sweep" / "substeps.csv")

        assert int(rows[1]["evaluations"]) > int(rows[0]["evaluations"])

    def test_sweep_guidance_adherence(self, trained_smoke, tmp_path):
        commands.cmd_sweep(trained_smoke, "guidance")
        rows = read_csv(tmp_path / "run" / "sweep" / "guidance.csv")

        assert "condition_adherence" in rows[0]
        for row in rows:
            assert 0.0 <= float(row["condition_adherence"]) <= 1.0

    def test_unknown_axis(self, trained_smoke):
        with pytest.raises(ConfigInvalid):
            commands.cmd_sweep(trained_smoke, "temperature")

    def test_control_transfer(self, trained_smoke, tmp_path):
        """The slider is trained once and reused on the next call."""
        commands.cmd_control(trained_smoke)
        run_dir = tmp_path / "run"
        slider = run_dir / commands.slider_ckpt("base")
        assert slider.exists()
        first = slider.read_bytes()

        result = commands.cmd_control(trained_smoke)
        summary = json.loads((run_dir / "control" / "base_to_distilled.json").read_text())

        assert slider.read_bytes() == first
        assert commands.slider_ckpt("base") not in result["artifacts"]
        assert summary["direction"] == "base_to_distilled"
        assert "transfer_ratio" in summary
        scales = [float(r["scale"]) for r in read_csv(run_dir / "control" / "base_to_distilled.csv")]
        assert 0.0 in scales and 1.0 in scales


class TestManifestAndReport:
    """Test run bookkeeping."""

    def test_manifest_lists_every_file(self, trained_smoke, tmp_path):
        commands.cmd_gen_data(trained_smoke)
        commands.cmd_eval(trained_smoke)
        run_dir = tmp_path / "run"
        manifest = load_manifest(run_dir)

        on_disk = {p.relative_to(run_dir).as_posix() for p in run_dir.rglob("*") if p.is_file()}
        assert on_disk - {MANIFEST_NAME} == set(manifest.artifacts)
        assert manifest.config_hash == config_hash(trained_smoke)
        assert manifest.master_seed == 42
        assert {"train-base", "distill-regression", "gen-data", "eval"} <= set(manifest.stages)

    def test_report_links_everything(self, trained_smoke, tmp_path):
        """report.md has a section per CSV and links every SVG; rerunning gives the same file."""
        commands.cmd_eval(trained_smoke)
        run_dir = tmp_path / "run"
        out = commands.cmd_report(run_dir)
        text = out.read_text()

        assert out.name == commands.REPORT_NAME
        for csv_path in run_dir.rglob("*.csv"):
            assert f"## {csv_path.relative_to(run_dir).as_posix()}" in text
        for svg_path in run_dir.rglob("*.svg"):
            rel = svg_path.relative_to(run_dir).as_posix()
            assert f"[{rel}]({rel})" in text
        assert commands.cmd_report(run_dir).read_text() == text

    def test_report_empty_dir(self, tmp_path):
        with pytest.raises(EmptyRunDir):
            commands.cmd_report(tmp_path)

    def test_report_missing_dir(self, tmp_path):
        with pytest.raises(EmptyRunDir):
            commands.cmd_report(tmp_path / "absent")
