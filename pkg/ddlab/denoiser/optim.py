"""
Adaptive-moment optimizer and learning-rate schedule.
"""
import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from ddlab.errors import ShapeMismatch

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment estimates keyed like the parameters they track."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(params: Dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def opt_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> AdamState:
    """
    One bias-corrected Adam update, applied to `params` in place.

    Raises:
        ShapeMismatch: If gradient names or shapes differ from the parameters
    """
    if set(grads) != set(params) or set(state.m) != set(params):
        raise ShapeMismatch(
            f"Gradient keys {sorted(grads)} do not match parameters {sorted(params)}"
        )
    for name, p in params.items():
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeMismatch(
                f"Gradient for {name} has shape {grads[name].shape}, expected {p.shape}"
            )

    state.step += 1
    correction1 = 1.0 - BETA1 ** state.step
    correction2 = 1.0 - BETA2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + EPS)
    return state


def cosine_lr(iteration: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine decay from lr_max at iteration 0 to lr_min at the last iteration."""
    if total <= 1:
        return lr_max
    progress = min(iteration / (total - 1), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
