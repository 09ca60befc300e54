"""
Experiment subcommands.

Every command works inside one run directory (config.output_dir): it reads
the checkpoints earlier commands left there, writes its own artifacts
atomically through an ArtifactStore and merges them into manifest.json.
"""
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from ddlab.artifacts.manifest import MANIFEST_NAME, load_manifest, save_manifest
from ddlab.artifacts.store import ArtifactStore, atomic_write_bytes, read_csv
from ddlab.control import train_slider, transfer_slider
from ddlab.denoiser.checkpoint import (
    encode_adapter,
    encode_model,
    load_adapter,
    load_model,
)
from ddlab.denoiser.network import DenoiserModel
from ddlab.diffusion.sampler import (
    SamplerConfig,
    Trajectory,
    hybrid_sample,
    sample,
    skip_first_sample,
)
from ddlab.diffusion.training import train_base
from ddlab.distillation import DistillMethod, distill_progressive, distill_regression, eval_distillation
from ddlab.errors import ConfigInvalid, EmptyRunDir, MissingCheckpoint
from ddlab.experiment.config import ARMS, RunConfig, config_hash
from ddlab.metrics import (
    compute_report,
    condition_adherence,
    conditional_sample_diversity,
    dt_curve,
    dt_mode_flips,
    frechet_distance,
    sample_diversity,
    MetricsReport,
)
from ddlab.plots import dt_curves_svg, line_svg, scatter_grid_svg, scatter_svg, trajectory_svg
from ddlab.toy_data import DistKind, sample_truth

logger = logging.getLogger(__name__)

BASE_CKPT = "checkpoints/base.ddlab"
TRAJECTORY_HEADER = ["step", "t", "role", "x", "y", "eps_x", "eps_y", "dt_x", "dt_y"]
SWEEP_AXES = ("guidance", "k", "substeps")
DIRECTIONS = ("base_to_distilled", "distilled_to_base")
REPORT_NAME = "report.md"
REPORT_MAX_ROWS = 40


def distilled_ckpt(method: str) -> str:
    return f"checkpoints/distilled_{method}.ddlab"


def slider_ckpt(source: str) -> str:
    return f"checkpoints/slider_{source}.ddlab"


class RunContext:
    """Artifact store plus bookkeeping for one command invocation."""

    def __init__(self, config: RunConfig, stage: str):
        self.config = config
        self.stage = stage
        self.run_dir = Path(config.output_dir)
        self.store = ArtifactStore(self.run_dir)
        self.evaluations: Dict[str, int] = {}
        self.started = time.perf_counter()

    def count(self, name: str, evaluations: int):
        self.evaluations[name] = self.evaluations.get(name, 0) + int(evaluations)

    def finish(self) -> Dict[str, object]:
        manifest = load_manifest(self.run_dir)
        manifest.config_hash = config_hash(self.config)
        manifest.master_seed = self.config.seeds.master
        manifest.seed_offsets = dict(self.config.seeds.offsets)
        manifest.absorb(self.store)
        wall = time.perf_counter() - self.started
        manifest.record_stage(self.stage, wall, self.evaluations)
        save_manifest(self.run_dir, manifest)
        logger.info(f"{self.stage} finished in {wall:.1f}s, wrote {len(self.store.records)} artifacts")
        return {
            "stage": self.stage,
            "artifacts": sorted(self.store.records),
            "evaluations": dict(self.evaluations),
        }


@dataclass
class Lab:
    """Models a run directory provides."""
    base: DenoiserModel
    student: Optional[DenoiserModel] = None


def _load_base(ctx: RunContext) -> DenoiserModel:
    path = ctx.store.require(BASE_CKPT, MissingCheckpoint, "Base checkpoint")
    return load_model(path)[0]


def _load_student(ctx: RunContext) -> DenoiserModel:
    method = ctx.config.distillation.method.value
    path = ctx.store.require(distilled_ckpt(method), MissingCheckpoint, f"{method} student checkpoint")
    return load_model(path)[0]


def _load_lab(ctx: RunContext) -> Lab:
    return Lab(base=_load_base(ctx), student=_load_student(ctx))


def _truth_reference(config: RunConfig):
    return sample_truth(config.toy_distribution(), config.metrics.n_truth, config.rng("reference")).points


# gen-data

def cmd_gen_data(config: RunConfig, n: Optional[int] = None) -> Dict[str, object]:
    """Write exact samples of the configured distribution as data/truth.csv."""
    ctx = RunContext(config, "gen-data")
    n = n or config.metrics.n_truth
    batch = sample_truth(config.toy_distribution(), n, config.rng("data"))
    rows = ((x, y, int(label)) for (x, y), label in zip(batch.points, batch.labels))
    ctx.store.write_csv("data/truth.csv", ["x", "y", "label"], rows, kind="samples")
    ctx.store.write_bytes("data/truth.svg", scatter_svg([("truth", batch.points)], "truth"), kind="svg")
    return ctx.finish()


# train-base

def cmd_train_base(config: RunConfig) -> Dict[str, object]:
    """Train the base model; writes its checkpoint and loss curve."""
    ctx = RunContext(config, "train-base")
    schedule = config.noise_schedule()
    train_cfg = config.train_config()
    model, history = train_base(config.toy_distribution(), schedule, train_cfg, config.rng("train"),
                                arch=config.architecture())
    ctx.store.write_bytes(
        BASE_CKPT,
        encode_model(model, training=train_cfg.to_dict(), seed=config.seeds.master),
        kind="checkpoint",
    )
    ctx.store.write_csv("train/base_loss.csv", ["iteration", "loss"],
                        ((p.iteration, p.loss) for p in history), kind="loss")
    ctx.count("training_batches", train_cfg.iterations)
    return ctx.finish()


# distill

def cmd_distill(config: RunConfig, method: Optional[str] = None) -> Dict[str, object]:
    """
    Distill the base model with the given (or configured) method.

    Raises:
        ConfigInvalid: For an unknown method name
        MissingCheckpoint: If the base checkpoint is absent
    """
    method = method or config.distillation.method.value
    if method not in {m.value for m in DistillMethod}:
        raise ConfigInvalid(f"distillation.method: unknown method {method!r}")
    ctx = RunContext(config, f"distill-{method}")
    teacher = _load_base(ctx)
    schedule = config.noise_schedule()
    distill_cfg = config.distill_config(method)
    rng = config.rng("distill")

    if distill_cfg.method == DistillMethod.PROGRESSIVE:
        student, rounds = distill_progressive(teacher, schedule, config.toy_distribution(), distill_cfg, rng)
        ctx.store.write_csv(
            "distill/progressive_rounds.csv",
            ["round", "student_steps", "initial_mse", "final_mse"],
            ((i + 1, r.student_steps, r.initial_mse, r.final_mse) for i, r in enumerate(rounds)),
            kind="loss",
        )
    else:
        student, regression = distill_regression(teacher, schedule, distill_cfg, rng)
        ctx.store.write_csv("distill/regression_loss.csv", ["iteration", "loss", "handoff_loss"],
                            regression.history, kind="loss")
        ctx.store.write_csv(
            "distill/regression_validation.csv",
            ["metric", "value"],
            [("initial_mse", regression.initial_mse), ("final_mse", regression.final_mse)],
            kind="metrics",
        )

    ctx.store.write_bytes(
        distilled_ckpt(method),
        encode_model(student, training=distill_cfg.to_dict(), seed=config.seeds.master, method=method),
        kind="checkpoint",
    )

    report = eval_distillation(student, teacher, schedule, config.distillation.n_pairs, config.rng("fidelity"),
                               student_steps=config.sampler.distilled_steps,
                               teacher_steps=config.sampler.base_steps)
    ctx.store.write_csv(
        f"distill/{method}_fidelity.csv",
        ["metric", "value"],
        [
            ("endpoint_mse", report.endpoint_mse),
            ("student_first_step_dt", report.student_curve.first_step),
            ("teacher_first_step_dt", report.teacher_curve.first_step),
            ("n_pairs", report.n_pairs),
        ],
        kind="metrics",
    )
    ctx.count("fidelity_evaluations", report.n_pairs * (config.sampler.base_steps + config.sampler.distilled_steps))
    return ctx.finish()


# train-lora

def cmd_train_lora(config: RunConfig, source: Optional[str] = None) -> Dict[str, object]:
    """Train an attribute slider on the base or distilled model."""
    source = source or config.control.source
    ctx = RunContext(config, f"train-lora-{source}")
    model = _load_base(ctx) if source == "base" else _load_student(ctx)
    _train_and_save_slider(ctx, model, source)
    return ctx.finish()


def _train_and_save_slider(ctx: RunContext, model: DenoiserModel, source: str):
    config = ctx.config
    slider_cfg = config.slider_config()
    adapter, history = train_slider(model, config.toy_distribution(), config.noise_schedule(),
                                    slider_cfg, config.rng("lora"))
    ctx.store.write_bytes(
        slider_ckpt(source),
        encode_adapter(adapter, model, training=slider_cfg.to_dict(), seed=config.seeds.master),
        kind="checkpoint",
    )
    ctx.store.write_csv(f"control/slider_{source}_loss.csv", ["iteration", "loss"], history, kind="loss")
    return adapter


# sampling arms

def run_arm(arm: str, lab: Lab, config: RunConfig, n: int, **overrides) -> Trajectory:
    """
    Sample n chains for one arm from the shared "sample" stream.

    Every arm draws its starting noise first from a fresh copy of the same
    stream, so arms differ only in the models applied to that noise. The
    base arm samples ancestrally when `sampler.base_stochastic` is set; the
    other arms follow `sampler.stochastic`.
    """
    schedule = config.noise_schedule()
    s = config.sampler
    params = dict(
        grid=config.distilled_grid(schedule),
        stochastic=s.stochastic,
        guidance_scale=s.guidance_scale,
        transition_point=s.transition_point,
        base_substeps=s.base_substeps,
        variance=s.variance,
        distilled_conditional=s.distilled_conditional,
    )
    params.update(overrides)
    rng = config.rng("sample")

    if arm == "base":
        params["grid"] = config.base_grid(schedule)
        params["stochastic"] = overrides.get("stochastic", s.base_stochastic)
        return sample(lab.base, schedule, SamplerConfig(**params), rng, n_chains=n)
    if arm == "distilled":
        params.update(guidance_scale=1.0, cond=None)
        return sample(lab.student, schedule, SamplerConfig(**params), rng, n_chains=n)
    if arm == "hybrid":
        return hybrid_sample(lab.base, lab.student, schedule, SamplerConfig(**params), rng, n_chains=n)
    if arm == "skip":
        params.update(guidance_scale=1.0, cond=None)
        return skip_first_sample(lab.student, schedule, SamplerConfig(**params), rng, n_chains=n)
    raise ConfigInvalid(f"sampler.arm: unknown arm {arm!r}")


def _trajectory_rows(trajectory: Trajectory, chain: int = 0):
    for r in range(trajectory.n_records):
        x, y = trajectory.states[r, chain]
        ex, ey = trajectory.eps[r, chain]
        dx, dy = trajectory.dt[r, chain]
        yield (r, int(trajectory.t[r]), trajectory.roles[r], x, y, ex, ey, dx, dy)


def cmd_sample(config: RunConfig, arm: Optional[str] = None) -> Dict[str, object]:
    """Sample one arm; writes the batch dump, chain 0's trajectory and a scatter plot."""
    arm = arm or config.sampler.arm
    if arm not in ARMS:
        raise ConfigInvalid(f"sampler.arm: unknown arm {arm!r}")
    ctx = RunContext(config, f"sample-{arm}")
    lab = Lab(base=_load_base(ctx)) if arm == "base" else _load_lab(ctx)
    traj = run_arm(arm, lab, config, config.metrics.n_samples)
    ctx.count(arm, traj.evaluations)

    ctx.store.write_csv(f"samples/{arm}.csv", ["chain", "x", "y"],
                        ((i, x, y) for i, (x, y) in enumerate(traj.x0)), kind="samples")
    ctx.store.write_csv(f"samples/{arm}_trajectory.csv", TRAJECTORY_HEADER, _trajectory_rows(traj),
                        kind="trajectory")
    ctx.store.write_bytes(f"samples/{arm}.svg", scatter_svg([(arm, traj.x0)], f"{arm} samples"), kind="svg")
    logger.info(f"sample {arm}: {traj.n_chains} chains, {traj.evaluations} evaluations per chain")
    return ctx.finish()


# eval

EVAL_HEADER = ["arm", "steps", "evaluations"] + MetricsReport.columns() + ["frechet_le_base"]


def cmd_eval(config: RunConfig) -> Dict[str, object]:
    """
    Compare base, distilled, hybrid and skip-first arms on shared noise.

    Writes eval/comparison.csv (one row per arm plus a truth row) and one
    scatter plot per arm.
    """
    ctx = RunContext(config, "eval")
    lab = _load_lab(ctx)
    dist = config.toy_distribution()
    reference = _truth_reference(config)
    n = config.metrics.n_samples

    results: List[Tuple[str, int, int, MetricsReport]] = []
    truth = sample_truth(dist, n, config.rng("truth_eval")).points
    results.append(("truth", 0, 0, compute_report(dist, truth, reference)))
    for arm in ARMS:
        traj = run_arm(arm, lab, config, n)
        results.append((arm, traj.n_records, traj.evaluations, compute_report(dist, traj.x0, reference)))
        ctx.count(arm, traj.evaluations)
        ctx.store.write_bytes(f"eval/{arm}.svg", scatter_svg([("truth", reference), (arm, traj.x0)], arm),
                              kind="svg")

    base_frechet = next(r.frechet for name, _, _, r in results if name == "base")
    rows = [
        [name, steps, evals] + report.row() + [report.frechet <= base_frechet]
        for name, steps, evals, report in results
    ]
    ctx.store.write_csv("eval/comparison.csv", EVAL_HEADER, rows, kind="metrics")
    for name, _, evals, report in results:
        logger.info(f"eval {name}: evals={evals} frechet={report.frechet:.4f} "
                    f"diversity={report.sample_diversity:.4f} coverage={report.mode_coverage:.3f}")
    return ctx.finish()


# dt-viz

def cmd_dtviz(config: RunConfig) -> Dict[str, object]:
    """
    Clean-estimate commitment curves and trajectory panels for base and
    distilled models, sampled from shared noise.
    """
    ctx = RunContext(config, "dt-viz")
    lab = _load_lab(ctx)
    schedule = config.noise_schedule()
    dist = config.toy_distribution()
    n = config.metrics.dt_chains

    runs = {
        "base": (lab.base, config.base_grid(schedule)),
        "distilled": (lab.student, config.distilled_grid(schedule)),
    }
    curves = {}
    summary = []
    flips = []
    for role, (model, grid) in runs.items():
        traj = sample(model, schedule, SamplerConfig(grid=grid), config.rng("dtviz"), n_chains=n)
        ctx.count(role, traj.evaluations)
        curve = dt_curve(traj)
        curves[role] = curve
        ctx.store.write_csv(f"dtviz/{role}_curve.csv", ["fraction", "distance", "smoothed"],
                            zip(curve.fractions, curve.distances, curve.smoothed()), kind="dt_curve")
        ctx.store.write_bytes(f"dtviz/{role}_trajectories.svg",
                              trajectory_svg(traj, config.metrics.panel_chains, role), kind="svg")
        if dist.kind == DistKind.GMM_RING:
            stats = dt_mode_flips(dist, traj)
            flips.append((role, stats.mean_flips, stats.mean_commit_fraction))

    level = curves["distilled"].first_step
    for role, curve in curves.items():
        summary.append((role, curve.first_step, curve.crossing_fraction(level)))
    ctx.store.write_csv("dtviz/summary.csv", ["model", "first_step", "reaches_distilled_first_step_at"],
                        summary, kind="metrics")
    if flips:
        ctx.store.write_csv("dtviz/mode_flips.csv", ["model", "mean_flips", "mean_commit_fraction"],
                            flips, kind="metrics")
    ctx.store.write_bytes(
        "dtviz/curves.svg",
        dt_curves_svg({role: (c.fractions.tolist(), c.distances.tolist()) for role, c in curves.items()}),
        kind="svg",
    )
    return ctx.finish()


# sweep

def cmd_sweep(config: RunConfig, axis: str) -> Dict[str, object]:
    """
    Hybrid sampler sweep over guidance scale, transition point k or base
    substep count m.

    Raises:
        ConfigInvalid: For an unknown axis
    """
    if axis not in SWEEP_AXES:
        raise ConfigInvalid(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    ctx = RunContext(config, f"sweep-{axis}")
    lab = _load_lab(ctx)
    dist = config.toy_distribution()
    reference = _truth_reference(config)
    n = config.metrics.n_samples

    header = ["value", "sample_diversity", "frechet", "evaluations"]
    rows = []
    if axis == "guidance":
        header.append("condition_adherence")
        conds = np.arange(n) % max(lab.base.n_conditions, 1)
        for w in config.sweep.guidance:
            traj = run_arm("hybrid", lab, config, n, guidance_scale=w, cond=conds)
            rows.append([w, conditional_sample_diversity(traj.x0, conds), frechet_distance(traj.x0, reference),
                         traj.evaluations, condition_adherence(dist, traj.x0, conds)])
            ctx.count(f"w={w}", traj.evaluations)
    else:
        values = config.sweep.k if axis == "k" else config.sweep.substeps
        for v in values:
            overrides = {"transition_point": v, "base_substeps": 1} if axis == "k" \
                else {"transition_point": 1, "base_substeps": v}
            traj = run_arm("hybrid", lab, config, n, **overrides)
            rows.append([v, sample_diversity(traj.x0), frechet_distance(traj.x0, reference), traj.evaluations])
            ctx.count(f"{axis}={v}", traj.evaluations)

    ctx.store.write_csv(f"sweep/{axis}.csv", header, rows, kind="sweep")
    xs = [r[0] for r in rows]
    ctx.store.write_bytes(
        f"sweep/{axis}.svg",
        line_svg(xs, {"sample_diversity": [r[1] for r in rows], "frechet": [r[2] for r in rows]},
                 xlabel=axis, ylabel="value", title=f"hybrid sweep over {axis}"),
        kind="svg",
    )
    return ctx.finish()


# control-transfer

def cmd_control(config: RunConfig, direction: Optional[str] = None) -> Dict[str, object]:
    """
    Train (or reuse) a slider on the source model and measure its effect on
    both models.
    """
    direction = direction or config.control.direction
    if direction not in DIRECTIONS:
        raise ConfigInvalid(f"control.direction must be one of {DIRECTIONS}, got {direction!r}")
    ctx = RunContext(config, f"control-{direction}")
    lab = _load_lab(ctx)
    schedule = config.noise_schedule()
    dist = config.toy_distribution()
    base_grid, distilled_grid = config.base_grid(schedule), config.distilled_grid(schedule)

    if direction == "base_to_distilled":
        source_name, source, target, source_grid, target_grid = "base", lab.base, lab.student, base_grid, distilled_grid
    else:
        source_name, source, target, source_grid, target_grid = \
            "distilled", lab.student, lab.base, distilled_grid, base_grid

    if ctx.store.exists(slider_ckpt(source_name)):
        adapter = load_adapter(ctx.store.path(slider_ckpt(source_name)))[0]
    else:
        adapter = _train_and_save_slider(ctx, source, source_name)

    report = transfer_slider(adapter, source, target, dist, schedule, source_grid, target_grid,
                             config.control.n_samples, config.rng("control"), scales=config.control.scales)

    ctx.store.write_csv(
        f"control/{direction}.csv",
        ["scale", "source_mean", "target_mean", "source_shift", "target_shift"],
        ((r.scale, r.source_mean, r.target_mean, r.source_shift, r.target_shift) for r in report.scales),
        kind="transfer",
    )
    summary = report.model_dump(mode="json", exclude={"scales"})
    summary["ratio_defined"] = report.ratio_defined
    summary["direction"] = direction
    ctx.store.write_text(f"control/{direction}.json", _json(summary), kind="transfer")

    panels = []
    for scale in config.control.scales:
        traj = sample(target, schedule, SamplerConfig(grid=target_grid), config.rng("control"),
                      n_chains=config.control.n_panel, adapter=adapter.with_scale(scale))
        panels.append((f"{target.role.value} s={scale:g}", target.role.value, traj.x0))
    ctx.store.write_bytes(f"control/{direction}.svg", scatter_grid_svg(panels), kind="svg")
    cells = len(config.control.scales) * config.control.n_samples
    ctx.count("source", cells * len(source_grid))
    ctx.count("target", cells * len(target_grid))
    return ctx.finish()


def _json(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True)


# report

def cmd_report(run_dir: Path) -> Path:
    """
    Collate every CSV of a run directory into report.md, linking its SVGs.

    Raises:
        EmptyRunDir: If the directory holds no CSV artifacts
    """
    run_dir = Path(run_dir)
    csvs = sorted(p for p in run_dir.rglob("*.csv")) if run_dir.is_dir() else []
    if not csvs:
        raise EmptyRunDir(f"No CSV artifacts under {run_dir}")
    svgs = sorted(run_dir.rglob("*.svg"))

    lines = [f"# ddlab run summary: {run_dir.name}", ""]
    manifest_path = run_dir / MANIFEST_NAME
    if manifest_path.exists():
        manifest = load_manifest(run_dir)
        lines += [f"- config hash: `{manifest.config_hash}`",
                  f"- library version: {manifest.library_version}"]
        for stage, record in sorted(manifest.stages.items()):
            evals = ", ".join(f"{k}={v}" for k, v in sorted(record.evaluations.items())) or "-"
            lines.append(f"- stage `{stage}`: evaluations {evals}")
        lines.append("")

    for path in csvs:
        rel = path.relative_to(run_dir).as_posix()
        rows = read_csv(path)
        lines += [f"## {rel}", ""]
        if not rows:
            lines += ["(empty)", ""]
            continue
        header = list(rows[0].keys())
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in rows[:REPORT_MAX_ROWS]:
            lines.append("| " + " | ".join(row[h] for h in header) + " |")
        if len(rows) > REPORT_MAX_ROWS:
            lines.append(f"\n({len(rows) - REPORT_MAX_ROWS} more rows in [{rel}]({rel}))")
        lines.append("")

    if svgs:
        lines += ["## Figures", ""]
        lines += [f"- [{p.relative_to(run_dir).as_posix()}]({p.relative_to(run_dir).as_posix()})" for p in svgs]
        lines.append("")

    out = run_dir / REPORT_NAME
    atomic_write_bytes(out, "\n".join(lines).encode("utf-8"))
    logger.info(f"Report written: {out} ({len(csvs)} tables, {len(svgs)} figures)")
    return out
