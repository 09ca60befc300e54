"""
Few-step students distilled from a trained base model.

progressive: halving rounds; one student step is trained to land where two
    teacher steps land, trajectory by trajectory.
regression: the student's own few-step rollout is regressed onto the
    teacher's full-grid endpoint for the same starting noise, with a share
    of the targets left unpaired. This objective only sees endpoints, and is
    the collapse-prone student.

Students start from the teacher's weights and are unconditional.
"""
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np

from ddlab.denoiser.network import (
    DenoiserModel,
    GradientTape,
    Role,
    backprop,
    backward,
    forward,
    forward_trace,
)
from ddlab.denoiser.optim import cosine_lr, init_adam, opt_step
from ddlab.diffusion.sampler import SamplerConfig, sample
from ddlab.diffusion.schedule import NoiseSchedule, StepGrid, forward_noise, make_grid
from ddlab.errors import NonDivisibleGrid
from ddlab.metrics import DtCurve, dt_curve
from ddlab.numerics import RngStream, ensure_finite
from ddlab.toy_data import ToyDistribution, sample_truth

logger = logging.getLogger(__name__)


class DistillMethod(str, Enum):
    PROGRESSIVE = "progressive"
    REGRESSION = "regression"


@dataclass
class DistillConfig:
    """Student training settings."""
    method: DistillMethod = DistillMethod.REGRESSION
    base_steps: int = 32
    target_steps: int = 4
    iterations_per_round: int = 4000
    regression_iterations: int = 8000
    lr: float = 3e-4
    lr_min: float = 3e-5
    batch: int = 256
    pool_size: int = 16_384
    n_validation: int = 1000
    unpaired_fraction: float = 0.08
    log_every: int = 100

    def __post_init__(self):
        self.method = DistillMethod(self.method)
        if not 0.0 <= self.unpaired_fraction < 1.0:
            raise ValueError(f"unpaired_fraction must lie in [0, 1), got {self.unpaired_fraction}")
        if self.target_steps < 1:
            raise NonDivisibleGrid(f"target_steps must be >= 1, got {self.target_steps}")
        if self.base_steps % self.target_steps:
            raise NonDivisibleGrid(f"target_steps {self.target_steps} does not divide {self.base_steps}")

    def rounds(self) -> List[int]:
        """Student step counts of the halving rounds, e.g. [16, 8, 4]."""
        ratio = self.base_steps // self.target_steps
        if ratio & (ratio - 1):
            raise NonDivisibleGrid(
                f"{self.base_steps} -> {self.target_steps} is not a sequence of halvings"
            )
        steps, counts = self.base_steps, []
        while steps > self.target_steps:
            steps //= 2
            counts.append(steps)
        return counts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d


@dataclass
class RoundLog:
    """Validation endpoint error of one halving round."""
    student_steps: int
    initial_mse: float
    final_mse: float


def endpoint_mse(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared Euclidean distance between matched endpoints."""
    return float(np.mean(np.sum((a - b) ** 2, axis=1)))


def _endpoints(model: DenoiserModel, schedule: NoiseSchedule, grid: StepGrid, noise: np.ndarray) -> np.ndarray:
    traj = sample(model, schedule, SamplerConfig(grid=grid), RngStream(0), x_init=noise)
    return traj.x0


def _step_coefficients(schedule: NoiseSchedule, t_from, t_to) -> Tuple[np.ndarray, np.ndarray]:
    """(c_x, c_eps) with ddim(x, eps, t_from -> t_to) = c_x * x + c_eps * eps."""
    ratio = schedule.signal(t_to) / schedule.signal(t_from)
    return ratio, schedule.noise(t_to) - ratio * schedule.noise(t_from)


def _paired_grids(schedule: NoiseSchedule, student_steps: int) -> Tuple[StepGrid, StepGrid]:
    student = make_grid(schedule, student_steps)
    teacher = make_grid(schedule, 2 * student_steps)
    if teacher.indices[::2] != student.indices:
        raise NonDivisibleGrid(
            f"{2 * student_steps}-step grid does not refine the {student_steps}-step grid on T={schedule.T}"
        )
    return student, teacher


def distill_progressive(
    teacher: DenoiserModel,
    schedule: NoiseSchedule,
    dist: ToyDistribution,
    config: DistillConfig,
    rng: RngStream,
) -> Tuple[DenoiserModel, List[RoundLog]]:
    """
    Halve the step count round by round until target_steps.

    Training states are forward-noised truth samples at a random student
    grid point. The target is the noise that makes one student step land on
    the teacher's two-step endpoint; the loss is weighted so it equals the
    endpoint squared error.

    Raises:
        NonDivisibleGrid: If the step counts do not form a halving sequence
    """
    rounds = config.rounds()
    val_noise = rng.spawn(rng.stream_id + 1).normal((config.n_validation, 2))
    current = teacher.copy(role=Role.DISTILLED)
    log: List[RoundLog] = []

    for round_idx, n_student in enumerate(rounds):
        student_grid, teacher_grid = _paired_grids(schedule, n_student)
        t_idx = np.array(teacher_grid.indices)
        teacher_model = current
        student = current.copy(role=Role.DISTILLED)
        state = init_adam(student.params)

        reference = _endpoints(teacher_model, schedule, teacher_grid, val_noise)
        initial_mse = endpoint_mse(_endpoints(student, schedule, student_grid, val_noise), reference)

        for it in range(config.iterations_per_round):
            j = rng.integers(0, n_student, config.batch)
            t_from, t_mid, t_to = t_idx[2 * j], t_idx[2 * j + 1], t_idx[2 * j + 2]
            x0 = sample_truth(dist, config.batch, rng).points
            x, _ = forward_noise(schedule, x0, t_from, rng)

            x_mid = _ddim_batch(teacher_model, schedule, x, t_from, t_mid)
            x_end = _ddim_batch(teacher_model, schedule, x_mid, t_mid, t_to)
            c_x, c_eps = _step_coefficients(schedule, t_from, t_to)
            eps_target = (x_end - c_x[:, None] * x) / c_eps[:, None]

            loss, tape = backward(student, x, t_from / schedule.T, None, eps_target, weights=c_eps ** 2)
            lr = cosine_lr(it, config.iterations_per_round, config.lr, config.lr_min)
            opt_step(student.params, tape.model, state, lr)
            if (it + 1) % config.log_every == 0:
                logger.debug(f"progressive round {round_idx + 1} iter {it + 1} loss={loss:.5f}")

        final_mse = endpoint_mse(_endpoints(student, schedule, student_grid, val_noise), reference)
        log.append(RoundLog(student_steps=n_student, initial_mse=initial_mse, final_mse=final_mse))
        logger.info(
            f"progressive round {round_idx + 1}/{len(rounds)}: {2 * n_student} -> {n_student} steps, "
            f"validation endpoint mse {initial_mse:.5f} -> {final_mse:.5f}"
        )
        current = student

    _check_finite(current)
    current.meta.update({"method": DistillMethod.PROGRESSIVE.value, "steps": config.target_steps})
    return current, log


def _ddim_batch(model: DenoiserModel, schedule: NoiseSchedule, x: np.ndarray, t_from, t_to) -> np.ndarray:
    """Unconditional DDIM step with per-row indices."""
    eps = forward(model, x, t_from / schedule.T, None)
    c_x, c_eps = _step_coefficients(schedule, t_from, t_to)
    return c_x[:, None] * x + c_eps[:, None] * eps


def _rollout_grad(
    student: DenoiserModel,
    schedule: NoiseSchedule,
    grid: StepGrid,
    noise: np.ndarray,
    target: np.ndarray,
) -> Tuple[float, GradientTape]:
    """Endpoint loss of an unrolled student rollout and its gradient."""
    x = noise
    steps = []
    for t_from, t_to in grid.intervals():
        trace = forward_trace(student, x, t_from / schedule.T, None)
        c_x, c_eps = _step_coefficients(schedule, t_from, t_to)
        steps.append((trace, c_x, c_eps))
        x = c_x * x + c_eps * trace.output

    n = x.shape[0]
    residual = x - target
    loss = float(np.sum(residual ** 2) / (2.0 * n))

    tape = GradientTape.zeros(student)
    grad_x = residual / n
    for trace, c_x, c_eps in reversed(steps):
        step_tape, grad_in = backprop(student, trace, c_eps * grad_x)
        tape.add(step_tape)
        grad_x = c_x * grad_x + grad_in
    return loss, tape


@dataclass
class RegressionLog:
    """Validation endpoint error before and after regression, plus the loss curve."""
    initial_mse: float
    final_mse: float
    history: List[Tuple[int, float, float]]


def _handoff_states(
    teacher: DenoiserModel,
    schedule: NoiseSchedule,
    student_grid: StepGrid,
    noise: np.ndarray,
) -> np.ndarray:
    """States after one teacher step over the first student interval."""
    n = noise.shape[0]
    t_from, t_to = student_grid.intervals()[0]
    return _ddim_batch(teacher, schedule, noise, np.full(n, t_from), np.full(n, t_to))


def _mixed_targets(pool_target: np.ndarray, idx: np.ndarray, fraction: float, rng: RngStream) -> np.ndarray:
    """Paired targets with a `fraction` of rows swapped for random pool entries."""
    targets = pool_target[idx].copy()
    swap = rng.uniform(len(idx)) < fraction
    targets[swap] = pool_target[rng.integers(0, len(pool_target), int(swap.sum()))]
    return targets


def distill_regression(
    teacher: DenoiserModel,
    schedule: NoiseSchedule,
    config: DistillConfig,
    rng: RngStream,
) -> Tuple[DenoiserModel, RegressionLog]:
    """
    Regress the student's target_steps rollout onto teacher endpoints.

    A fixed pool of (noise, teacher base_steps endpoint) pairs is drawn once.
    Each iteration backpropagates two squared endpoint errors through the
    unrolled student sampler on one batch:

    - the full rollout from the pool noise, against targets of which a
      fraction `unpaired_fraction` is redrawn from the pool. Squared loss on
      such targets is minimized by a blend of the paired endpoint and the pool
      mean, so the student contracts toward the mean;
    - the rollout over the remaining student steps from the state one teacher
      step over the first interval reaches, against the paired endpoint. This
      is the state a hybrid sampler hands over.

    Returns:
        (student, log) with the loss history as
        (iteration, mean rollout loss, mean hand-off loss) per logging window
    """
    teacher_grid = make_grid(schedule, config.base_steps)
    student_grid = make_grid(schedule, config.target_steps)
    handoff_grid = StepGrid(student_grid.indices[1:]) if len(student_grid) > 1 else None

    val_noise = rng.spawn(rng.stream_id + 1).normal((config.n_validation, 2))
    val_target = _endpoints(teacher, schedule, teacher_grid, val_noise)
    pool_noise = rng.normal((config.pool_size, 2))
    pool_target = _endpoints(teacher, schedule, teacher_grid, pool_noise)
    pool_handoff = _handoff_states(teacher, schedule, student_grid, pool_noise) if handoff_grid else None
    logger.info(f"regression pool: {config.pool_size} teacher endpoints on {config.base_steps} steps, "
                f"{config.unpaired_fraction:.0%} of targets unpaired")

    student = teacher.copy(role=Role.DISTILLED)
    initial_mse = endpoint_mse(_endpoints(student, schedule, student_grid, val_noise), val_target)
    state = init_adam(student.params)
    history: List[Tuple[int, float, float]] = []
    window: List[Tuple[float, float]] = []
    for it in range(config.regression_iterations):
        idx = rng.integers(0, config.pool_size, config.batch)
        targets = _mixed_targets(pool_target, idx, config.unpaired_fraction, rng)
        loss, tape = _rollout_grad(student, schedule, student_grid, pool_noise[idx], targets)
        handoff_loss = 0.0
        if handoff_grid is not None:
            handoff_loss, handoff_tape = _rollout_grad(student, schedule, handoff_grid,
                                                       pool_handoff[idx], pool_target[idx])
            tape.add(handoff_tape)
        lr = cosine_lr(it, config.regression_iterations, config.lr, config.lr_min)
        opt_step(student.params, tape.model, state, lr)
        window.append((loss, handoff_loss))
        if (it + 1) % config.log_every == 0 or it + 1 == config.regression_iterations:
            mean_loss, mean_handoff = (float(v) for v in np.mean(window, axis=0))
            history.append((it + 1, mean_loss, mean_handoff))
            window = []
            logger.info(f"regression iter {it + 1}/{config.regression_iterations} "
                        f"rollout loss={mean_loss:.5f} hand-off loss={mean_handoff:.5f}")

    _check_finite(student)
    final_mse = endpoint_mse(_endpoints(student, schedule, student_grid, val_noise), val_target)
    logger.info(f"regression validation endpoint mse {initial_mse:.5f} -> {final_mse:.5f}")
    student.meta.update({"method": DistillMethod.REGRESSION.value, "steps": config.target_steps})
    return student, RegressionLog(initial_mse=initial_mse, final_mse=final_mse, history=history)


def _check_finite(model: DenoiserModel):
    for name, p in model.params.items():
        ensure_finite(p, f"parameter {name}")


@dataclass
class DistillationReport:
    """Student vs teacher on shared starting noise."""
    endpoint_mse: float
    student_curve: DtCurve
    teacher_curve: DtCurve
    n_pairs: int


def eval_distillation(
    student: DenoiserModel,
    teacher: DenoiserModel,
    schedule: NoiseSchedule,
    n_pairs: int,
    rng: RngStream,
    student_steps: int = 4,
    teacher_steps: int = 32,
) -> DistillationReport:
    """Endpoint agreement and clean-estimate commitment curves of both models."""
    noise = rng.normal((n_pairs, 2))
    s_traj = sample(student, schedule, SamplerConfig(grid=make_grid(schedule, student_steps)),
                    RngStream(0), x_init=noise)
    t_traj = sample(teacher, schedule, SamplerConfig(grid=make_grid(schedule, teacher_steps)),
                    RngStream(0), x_init=noise)
    return DistillationReport(
        endpoint_mse=endpoint_mse(s_traj.x0, t_traj.x0),
        student_curve=dt_curve(s_traj),
        teacher_curve=dt_curve(t_traj),
        n_pairs=n_pairs,
    )
