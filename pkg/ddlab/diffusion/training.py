"""
Base-model training loop.
"""
import logging
from dataclasses import dataclass, asdict
from typing import List, Optional, Tuple

import numpy as np

from ddlab.denoiser.network import (
    NULL_COND,
    Architecture,
    DenoiserModel,
    LossWeighting,
    Role,
    backward,
    init_model,
    loss_weights,
)
from ddlab.denoiser.optim import cosine_lr, init_adam, opt_step
from ddlab.diffusion.schedule import NoiseSchedule, forward_noise
from ddlab.numerics import RngStream, ensure_finite
from ddlab.toy_data import ToyDistribution, sample_truth

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Hyperparameters of one noise-prediction training run."""
    iterations: int = 10_000
    batch: int = 256
    lr: float = 1e-3
    lr_min: float = 1e-4
    cond_dropout: float = 0.1
    conditional: bool = True
    weighting: LossWeighting = LossWeighting.V
    log_every: int = 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weighting"] = LossWeighting(self.weighting).value
        return d


@dataclass
class LossPoint:
    """Mean training loss over one logging window."""
    iteration: int
    loss: float


DATA_STD_SAMPLES = 4096


def data_std(dist: ToyDistribution, rng: RngStream, n: int = DATA_STD_SAMPLES) -> float:
    """Pooled per-axis standard deviation of `n` truth samples."""
    return float(np.std(sample_truth(dist, n, rng).points))


def noise_prediction_batch(
    dist: ToyDistribution,
    schedule: NoiseSchedule,
    batch: int,
    rng: RngStream,
    shift: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    One training batch: (x_t, t, labels, eps) with t uniform in 1..T.

    `shift` translates the clean points before noising.
    """
    truth = sample_truth(dist, batch, rng)
    x0 = truth.points if shift is None else truth.points + shift
    t = rng.integers(1, schedule.T + 1, batch)
    x_t, eps = forward_noise(schedule, x0, t, rng)
    return x_t, t, truth.labels, eps


def train_base(
    dist: ToyDistribution,
    schedule: NoiseSchedule,
    config: TrainConfig,
    rng: RngStream,
    arch: Optional[Architecture] = None,
) -> Tuple[DenoiserModel, List[LossPoint]]:
    """
    Train a base denoiser on samples of `dist`.

    Conditions are the mode labels (dropped to the null condition with
    probability cond_dropout) when the distribution has modes and the config
    asks for a conditional model. The architecture's data_std is measured on
    truth samples so the network works at unit scale.

    Returns:
        (model, loss history averaged per log_every iterations)
    """
    conditional = config.conditional and dist.n_modes > 0
    if arch is None:
        arch = Architecture()
    arch = Architecture(**{
        **arch.to_dict(),
        "n_conditions": dist.n_modes if conditional else 0,
        "data_std": data_std(dist, rng.spawn(rng.stream_id + 2)),
    })

    init_rng = rng.spawn(rng.stream_id + 1)
    model = init_model(arch, schedule.alpha_bar, schedule.schedule_id, init_rng, role=Role.BASE)
    state = init_adam(model.params)

    history: List[LossPoint] = []
    window: List[float] = []
    for it in range(config.iterations):
        x_t, t, labels, eps = noise_prediction_batch(dist, schedule, config.batch, rng)
        if conditional:
            drop = rng.uniform(config.batch) < config.cond_dropout
            cond = np.where(drop, NULL_COND, labels)
        else:
            cond = None
        t_frac = t / schedule.T
        weights = loss_weights(model, t_frac, config.weighting)
        loss, tape = backward(model, x_t, t_frac, cond, eps, weights=weights)

        lr = cosine_lr(it, config.iterations, config.lr, config.lr_min)
        opt_step(model.params, tape.model, state, lr)
        window.append(loss)

        if (it + 1) % config.log_every == 0 or it + 1 == config.iterations:
            mean_loss = float(np.mean(window))
            history.append(LossPoint(iteration=it + 1, loss=mean_loss))
            window = []
            logger.info(f"train_base iter {it + 1}/{config.iterations} loss={mean_loss:.5f} lr={lr:.2e}")

    for name, p in model.params.items():
        ensure_finite(p, f"parameter {name}")
    model.meta["training"] = config.to_dict()
    return model, history
