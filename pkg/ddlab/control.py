"""
Attribute sliders: low-rank adapters trained on one model, applied to another.

A slider is fine-tuned (adapter weights only) on the data distribution
translated by delta along the attribute axis. Its effect is measured as the
shift of the mean attribute value of generated samples relative to scale 0,
with every (model, scale) cell sampled from the same starting noise.
"""
import logging
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from ddlab.denoiser.lora import LoraAdapter, check_compatible, init_adapter
from ddlab.denoiser.network import NULL_COND, DenoiserModel, LossWeighting, Trainable, backward, loss_weights
from ddlab.denoiser.optim import cosine_lr, init_adam, opt_step
from ddlab.diffusion.sampler import SamplerConfig, sample
from ddlab.diffusion.schedule import NoiseSchedule, StepGrid
from ddlab.diffusion.training import noise_prediction_batch
from ddlab.numerics import RngStream, ensure_finite
from ddlab.toy_data import ToyDistribution, attribute_value

logger = logging.getLogger(__name__)

DEFAULT_SCALES = (-2.0, -1.0, 0.0, 1.0, 2.0)
UNDEFINED_RATIO_TOL = 1e-12


@dataclass
class SliderConfig:
    delta: float = 2.0
    rank: int = 4
    iterations: int = 2000
    batch: int = 256
    lr: float = 1e-3
    lr_min: float = 1e-4
    weighting: LossWeighting = LossWeighting.V
    log_every: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weighting"] = LossWeighting(self.weighting).value
        return d


def train_slider(
    model: DenoiserModel,
    dist: ToyDistribution,
    schedule: NoiseSchedule,
    config: SliderConfig,
    rng: RngStream,
    targets: Optional[Sequence[int]] = None,
) -> Tuple[LoraAdapter, List[Tuple[int, float]]]:
    """
    Fit an adapter so the model generates the distribution shifted by
    delta * attribute_direction. Model weights stay frozen.
    """
    if config.delta == 0.0:
        raise ValueError("Slider delta must be non-zero")
    adapter = init_adapter(model, rng.spawn(rng.stream_id + 1), rank=config.rank, targets=targets)
    params = adapter.params()
    state = init_adam(params)
    shift = config.delta * np.asarray(dist.attribute_direction)

    history: List[Tuple[int, float]] = []
    window: List[float] = []
    for it in range(config.iterations):
        x_t, t, _, eps = noise_prediction_batch(dist, schedule, config.batch, rng, shift=shift)
        t_frac = t / schedule.T
        cond = None if model.n_conditions == 0 else np.full(config.batch, NULL_COND)
        weights = loss_weights(model, t_frac, config.weighting)
        loss, tape = backward(model, x_t, t_frac, cond, eps, trainable=Trainable.ADAPTER,
                              adapter=adapter, weights=weights)
        opt_step(params, tape.adapter, state, cosine_lr(it, config.iterations, config.lr, config.lr_min))
        window.append(loss)
        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            history.append((it + 1, float(np.mean(window))))
            logger.info(f"slider iter {it + 1}/{config.iterations} loss={history[-1][1]:.5f}")
            window = []

    for name, p in params.items():
        ensure_finite(p, f"adapter {name}")
    adapter.meta.update({"delta": config.delta, "trained_on": model.role.value})
    return adapter, history


class ScaleRow(BaseModel):
    scale: float
    source_mean: float
    target_mean: float
    source_shift: float
    target_shift: float


class TransferReport(BaseModel):
    """Attribute shifts of one adapter on its source and on a target model."""
    source_role: str
    target_role: str
    source_shift: float
    target_shift: float
    transfer_ratio: Optional[float]
    n_samples: int
    scales: List[ScaleRow]

    @property
    def ratio_defined(self) -> bool:
        return self.transfer_ratio is not None


def _attribute_means(
    model: DenoiserModel,
    adapter: LoraAdapter,
    dist: ToyDistribution,
    schedule: NoiseSchedule,
    grid: StepGrid,
    scales: Sequence[float],
    n: int,
    rng: RngStream,
) -> List[float]:
    means = []
    for scale in scales:
        cell_rng = RngStream(seed=rng.seed, stream_id=rng.stream_id)
        traj = sample(model, schedule, SamplerConfig(grid=grid), cell_rng, n_chains=n,
                      adapter=adapter.with_scale(scale))
        means.append(float(np.mean(attribute_value(dist, traj.x0))))
    return means


def transfer_slider(
    adapter: LoraAdapter,
    source: DenoiserModel,
    target: DenoiserModel,
    dist: ToyDistribution,
    schedule: NoiseSchedule,
    source_grid: StepGrid,
    target_grid: StepGrid,
    n: int,
    rng: RngStream,
    scales: Sequence[float] = DEFAULT_SCALES,
) -> TransferReport:
    """
    Measure the adapter's attribute shift on source and target.

    Every (model, scale) cell restarts a copy of `rng` from its initial
    state, so all cells share their starting noise.

    The transfer ratio is the target shift over the source shift at scale 1,
    or None when the source shift vanishes.

    Raises:
        ShapeMismatch: If the adapter does not fit either model
    """
    check_compatible(source, adapter)
    check_compatible(target, adapter)
    scales = [float(s) for s in scales]
    if 0.0 not in scales or 1.0 not in scales:
        raise ValueError("Scales must include 0 and 1")

    src = _attribute_means(source, adapter, dist, schedule, source_grid, scales, n, rng)
    tgt = _attribute_means(target, adapter, dist, schedule, target_grid, scales, n, rng)

    zero = scales.index(0.0)
    rows = [
        ScaleRow(scale=s, source_mean=sm, target_mean=tm,
                 source_shift=sm - src[zero], target_shift=tm - tgt[zero])
        for s, sm, tm in zip(scales, src, tgt)
    ]
    unit = rows[scales.index(1.0)]
    ratio = None
    if abs(unit.source_shift) >= UNDEFINED_RATIO_TOL:
        ratio = unit.target_shift / unit.source_shift
    else:
        logger.warning("Source shift is zero; transfer ratio undefined")

    report = TransferReport(
        source_role=source.role.value,
        target_role=target.role.value,
        source_shift=unit.source_shift,
        target_shift=unit.target_shift,
        transfer_ratio=ratio,
        n_samples=n,
        scales=rows,
    )
    logger.info(f"transfer {report.source_role} -> {report.target_role}: "
                f"shift {report.source_shift:.4f} -> {report.target_shift:.4f}, ratio {ratio}")
    return report
