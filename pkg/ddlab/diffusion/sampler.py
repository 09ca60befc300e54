"""
Samplers over a batch of independent chains.

Every sampler here reduces to one segment loop: a list of (predictor,
t_from, t_to) steps applied to an (n_chains, 2) state. `sample`,
`hybrid_sample` and `skip_first_sample` only differ in how they build that
list, which is what makes the hybrid boundary cases bit-identical to the
plain samplers.

Each step records the state it started from, the predicted noise and the
one-shot clean estimate

    x0_hat = (x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)

so a trajectory can be replayed as a sequence of final-sample guesses.
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ddlab.denoiser.network import DenoiserModel, forward
from ddlab.diffusion.schedule import NoiseSchedule, StepGrid, subdivide
from ddlab.errors import GridTooShort, IndexOutOfRange, InvalidStepOrder, ShapeMismatch, UnconditionalModel
from ddlab.numerics import RngStream

logger = logging.getLogger(__name__)

ORACLE_ROLE = "oracle"


class Variance(str, Enum):
    """Noise variance of an ancestral step."""
    POSTERIOR = "posterior"
    BETA = "beta"


def guided_eval(
    model: DenoiserModel,
    x: np.ndarray,
    t_frac,
    cond,
    w: float,
    adapter=None,
) -> np.ndarray:
    """
    Classifier-free guided noise prediction eps_null + w * (eps_cond - eps_null).

    w = 0 and w = 1 evaluate the network once; any other scale needs both
    the null and the conditional pass. Without a condition the plain
    null-condition output is returned.

    Raises:
        UnconditionalModel: If a condition is given to a model trained without any
    """
    if cond is None:
        return forward(model, x, t_frac, None, adapter)
    if model.n_conditions == 0:
        raise UnconditionalModel("Guidance needs a conditional model (n_conditions = 0)")
    if w == 0.0:
        return forward(model, x, t_frac, None, adapter)
    eps_cond = forward(model, x, t_frac, cond, adapter)
    if w == 1.0:
        return eps_cond
    eps_null = forward(model, x, t_frac, None, adapter)
    return eps_null + w * (eps_cond - eps_null)


class ModelPredictor:
    """A denoiser bound to its condition, guidance scale and optional adapter."""

    def __init__(self, model: DenoiserModel, cond=None, guidance: float = 1.0, adapter=None):
        if cond is not None and model.n_conditions == 0:
            raise UnconditionalModel("Guidance needs a conditional model (n_conditions = 0)")
        self.model = model
        self.cond = cond
        self.guidance = float(guidance)
        self.adapter = adapter
        self.role = model.role.value
        self.T = len(model.alpha_bar) - 1

    @property
    def cost(self) -> int:
        """Network evaluations per call."""
        if self.cond is None or self.guidance in (0.0, 1.0):
            return 1
        return 2

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        return guided_eval(self.model, x, t / self.T, self.cond, self.guidance, self.adapter)


class OraclePredictor:
    """Optimal noise predictor for standard-normal data: eps_hat = sqrt(1 - ab_t) * x."""

    cost = 1
    role = ORACLE_ROLE

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    def __call__(self, x: np.ndarray, t: int) -> np.ndarray:
        return self.schedule.noise(t) * x


def standard_normal_oracle(schedule: NoiseSchedule) -> OraclePredictor:
    return OraclePredictor(schedule)


def dt_estimate(schedule: NoiseSchedule, x: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    """One-shot clean estimate from a noisy state and its predicted noise."""
    return (x - schedule.noise(t) * eps) / schedule.signal(t)


def ddim_step(predictor, schedule: NoiseSchedule, x: np.ndarray, t_from: int, t_to: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Deterministic variance-preserving step t_from -> t_to.

    Returns:
        (x_next, eps_hat)

    Raises:
        InvalidStepOrder: Unless t_from > t_to >= 0
    """
    if not t_from > t_to >= 0:
        raise InvalidStepOrder(f"DDIM step needs t_from > t_to >= 0, got {t_from} -> {t_to}")
    schedule.check_index(t_from)
    eps = predictor(x, t_from)
    x0 = dt_estimate(schedule, x, eps, t_from)
    return schedule.signal(t_to) * x0 + schedule.noise(t_to) * eps, eps


def ancestral_step(
    predictor,
    schedule: NoiseSchedule,
    x: np.ndarray,
    t_from: int,
    rng: RngStream,
    t_to: Optional[int] = None,
    variance: Variance = Variance.POSTERIOR,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stochastic posterior step t_from -> t_to (default t_from - 1).

    Uses the effective per-step alpha ab_from / ab_to, so any coarser grid is
    stepped the same way as the training chain. No noise is drawn on the step
    that lands at 0.

    Raises:
        IndexOutOfRange: If t_from < 1 or t_from > T
        InvalidStepOrder: If t_to is not below t_from
    """
    schedule.check_index(t_from, low=1)
    t_to = t_from - 1 if t_to is None else t_to
    if not t_from > t_to >= 0:
        raise InvalidStepOrder(f"Ancestral step needs t_from > t_to >= 0, got {t_from} -> {t_to}")

    ab_from = schedule.alpha_bar[t_from]
    ab_to = schedule.alpha_bar[t_to]
    alpha = ab_from / ab_to
    beta = 1.0 - alpha

    eps = predictor(x, t_from)
    mean = (x - beta / np.sqrt(1.0 - ab_from) * eps) / np.sqrt(alpha)
    if t_to == 0:
        return mean, eps
    if Variance(variance) == Variance.POSTERIOR:
        var = (1.0 - ab_to) / (1.0 - ab_from) * beta
    else:
        var = beta
    return mean + np.sqrt(var) * rng.normal(np.shape(x)), eps


@dataclass
class SamplerConfig:
    """How one sampling run walks its grid."""
    grid: StepGrid
    stochastic: bool = False
    guidance_scale: float = 1.0
    cond: Optional[object] = None
    transition_point: int = 0
    base_substeps: int = 1
    skip_first: bool = False
    variance: Variance = Variance.POSTERIOR
    distilled_conditional: bool = False

    def __post_init__(self):
        if self.base_substeps < 1:
            raise InvalidStepOrder(f"base_substeps must be >= 1, got {self.base_substeps}")
        if self.transition_point < 0:
            raise GridTooShort(f"transition_point must be >= 0, got {self.transition_point}")
        self.variance = Variance(self.variance)


@dataclass
class Trajectory:
    """
    Per-step record of a batch of sampling chains.

    Arrays are indexed [record, chain, coord]; record r holds the state the
    step started from (at schedule index t[r]), the noise prediction there and
    the clean estimate derived from both.
    """
    t: np.ndarray
    t_to: np.ndarray
    roles: List[str]
    states: np.ndarray
    eps: np.ndarray
    dt: np.ndarray
    x0: np.ndarray
    evaluations: int
    conds: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_records(self) -> int:
        return len(self.t)

    @property
    def n_chains(self) -> int:
        return self.x0.shape[0]

    @property
    def x_start(self) -> np.ndarray:
        """States the chains started from."""
        return self.states[0]

    def chain(self, i: int) -> "Trajectory":
        """Single-chain view (arrays keep their chain axis of length 1)."""
        if not 0 <= i < self.n_chains:
            raise IndexOutOfRange(f"Chain {i} outside [0, {self.n_chains})")
        sl = slice(i, i + 1)
        return replace(
            self,
            states=self.states[:, sl],
            eps=self.eps[:, sl],
            dt=self.dt[:, sl],
            x0=self.x0[sl],
            conds=None if self.conds is None else self.conds[sl],
            meta=dict(self.meta),
        )


Segment = Tuple[object, int, int]


def _run_segments(
    segments: Sequence[Segment],
    schedule: NoiseSchedule,
    x: np.ndarray,
    stochastic: bool,
    variance: Variance,
    rng: RngStream,
) -> Trajectory:
    ts, t_tos, roles, states, epss, dts = [], [], [], [], [], []
    evaluations = 0
    for predictor, t_from, t_to in segments:
        states.append(x)
        if stochastic:
            x_next, eps = ancestral_step(predictor, schedule, x, t_from, rng, t_to=t_to, variance=variance)
        else:
            x_next, eps = ddim_step(predictor, schedule, x, t_from, t_to)
        ts.append(t_from)
        t_tos.append(t_to)
        roles.append(predictor.role)
        epss.append(eps)
        dts.append(dt_estimate(schedule, x, eps, t_from))
        evaluations += predictor.cost
        x = x_next
    return Trajectory(
        t=np.array(ts, dtype=np.int64),
        t_to=np.array(t_tos, dtype=np.int64),
        roles=roles,
        states=np.stack(states),
        eps=np.stack(epss),
        dt=np.stack(dts),
        x0=x,
        evaluations=evaluations,
    )


def _initial_state(rng: RngStream, n_chains: int, x_init: Optional[np.ndarray]) -> np.ndarray:
    if x_init is not None:
        return np.array(x_init, dtype=np.float64).reshape(-1, 2)
    if n_chains < 1:
        raise ValueError(f"Need at least one chain, got {n_chains}")
    return rng.normal((n_chains, 2))


def _conds_array(cond, n_chains: int) -> Optional[np.ndarray]:
    if cond is None:
        return None
    return np.broadcast_to(np.asarray(cond, dtype=np.int64), (n_chains,)).copy()


def sample(
    model,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: RngStream,
    n_chains: int = 1,
    adapter=None,
    x_init: Optional[np.ndarray] = None,
) -> Trajectory:
    """
    Run n_chains chains from pure noise at t = T down the config's grid.

    `model` is a DenoiserModel or any predictor (e.g. `standard_normal_oracle`).
    Initial noise is the first draw from `rng`, so runs that share a seed
    share their starting points.
    """
    if config.skip_first:
        return skip_first_sample(model, schedule, config, rng, n_chains, adapter, x_init)
    predictor = _predictor(model, config.cond, config.guidance_scale, adapter)
    x = _initial_state(rng, n_chains, x_init)
    segments = [(predictor, a, b) for a, b in config.grid.intervals()]
    traj = _run_segments(segments, schedule, x, config.stochastic, config.variance, rng)
    traj.conds = _conds_array(config.cond, traj.n_chains)
    logger.debug(f"Sampled {traj.n_chains} chains over {len(config.grid)} steps ({traj.evaluations} evals)")
    return traj


def hybrid_sample(
    f_base: DenoiserModel,
    f_distil: DenoiserModel,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: RngStream,
    n_chains: int = 1,
    base_adapter=None,
    distil_adapter=None,
    x_init: Optional[np.ndarray] = None,
) -> Trajectory:
    """
    Base model for the first k grid steps, distilled model for the rest.

    The grid is the distilled model's. Each base step may be split into
    `base_substeps` equal sub-steps; guidance applies to base steps only.
    The state passes the hand-off unchanged.

    Raises:
        GridTooShort: If k exceeds the number of grid steps
        ShapeMismatch: If the two models were trained on different schedules
    """
    _check_shared_schedule(schedule, f_base, f_distil)
    k = config.transition_point
    intervals = config.grid.intervals()
    if k > len(intervals):
        raise GridTooShort(f"Transition point {k} exceeds grid length {len(intervals)}")

    base = _predictor(f_base, config.cond, config.guidance_scale, base_adapter)
    distil = _predictor(f_distil, config.cond if config.distilled_conditional else None, 1.0, distil_adapter)

    segments: List[Segment] = []
    for j, (a, b) in enumerate(intervals):
        if j < k:
            parts = [(a, b)] if config.base_substeps == 1 else subdivide(a, b, config.base_substeps)
            segments.extend((base, sa, sb) for sa, sb in parts)
        else:
            segments.append((distil, a, b))

    x = _initial_state(rng, n_chains, x_init)
    traj = _run_segments(segments, schedule, x, config.stochastic, config.variance, rng)
    traj.conds = _conds_array(config.cond, traj.n_chains)
    traj.meta.update({"transition_point": k, "base_substeps": config.base_substeps})
    return traj


def skip_first_sample(
    f_distil,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    rng: RngStream,
    n_chains: int = 1,
    adapter=None,
    x_init: Optional[np.ndarray] = None,
) -> Trajectory:
    """
    Start from fresh N(0, I) noise at the second grid entry and run the
    remaining N - 1 steps.

    Raises:
        GridTooShort: If the grid has fewer than 2 steps
    """
    intervals = config.grid.intervals()
    if len(intervals) < 2:
        raise GridTooShort(f"Skipping the first step needs a grid of >= 2 steps, got {len(intervals)}")
    predictor = _predictor(f_distil, config.cond, config.guidance_scale, adapter)
    x = _initial_state(rng, n_chains, x_init)
    segments = [(predictor, a, b) for a, b in intervals[1:]]
    traj = _run_segments(segments, schedule, x, config.stochastic, config.variance, rng)
    traj.conds = _conds_array(config.cond, traj.n_chains)
    traj.meta["skip_first"] = True
    return traj


def _check_shared_schedule(schedule: NoiseSchedule, *models):
    for model in models:
        if not isinstance(model, DenoiserModel):
            continue
        if model.schedule_id != schedule.schedule_id or len(model.alpha_bar) != len(schedule.alpha_bar):
            raise ShapeMismatch(
                f"{model.role.value} model was trained on {model.schedule_id} "
                f"({len(model.alpha_bar)} levels), sampler runs {schedule.schedule_id} "
                f"({len(schedule.alpha_bar)} levels)"
            )


def _predictor(model, cond, guidance: float, adapter):
    if isinstance(model, DenoiserModel):
        return ModelPredictor(model, cond=cond, guidance=guidance, adapter=adapter)
    return model


def dt_visualize(trajectory: Trajectory) -> List[Tuple[int, np.ndarray]]:
    """(t, clean estimate) for every recorded step, in sampling order."""
    return [(int(t), trajectory.dt[r]) for r, t in enumerate(trajectory.t)]


def recompute_dt(schedule: NoiseSchedule, trajectory: Trajectory) -> np.ndarray:
    """Clean estimates rebuilt from the stored states and noise predictions."""
    return np.stack([
        dt_estimate(schedule, trajectory.states[r], trajectory.eps[r], int(t))
        for r, t in enumerate(trajectory.t)
    ])
