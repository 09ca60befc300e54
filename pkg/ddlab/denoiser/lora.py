"""
Low-rank adapters attachable to any DenoiserModel.

An adapter on layer i replaces W_i by W_i + scale * down_i @ up_i, with
down_i of shape (fan_in, rank) and up_i of shape (rank, fan_out). The up
factors start at zero, so a fresh adapter is an exact no-op.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from ddlab.denoiser.network import DenoiserModel
from ddlab.errors import ShapeMismatch
from ddlab.numerics import RngStream

DEFAULT_RANK = 4
DOWN_INIT_STD = 0.01


@dataclass
class LoraAdapter:
    """Per-layer low-rank factors plus the scale they are applied with."""
    rank: int
    scale: float
    targets: Tuple[int, ...]
    down: Dict[int, np.ndarray]
    up: Dict[int, np.ndarray]
    meta: Dict = field(default_factory=dict)

    def params(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name, views onto the factors."""
        named = {}
        for i in self.targets:
            named[f"down{i}"] = self.down[i]
            named[f"up{i}"] = self.up[i]
        return named

    def with_scale(self, scale: float) -> "LoraAdapter":
        """Same factors applied at another scale."""
        return replace(self, scale=float(scale))

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            rank=self.rank,
            scale=self.scale,
            targets=self.targets,
            down={i: d.copy() for i, d in self.down.items()},
            up={i: u.copy() for i, u in self.up.items()},
            meta=dict(self.meta),
        )


def init_adapter(
    model: DenoiserModel,
    rng: RngStream,
    rank: int = DEFAULT_RANK,
    targets: Optional[Iterable[int]] = None,
    scale: float = 1.0,
) -> LoraAdapter:
    """
    Fresh adapter for `model`: small Gaussian down factors, zero up factors.

    By default every hidden-layer weight matrix is targeted.
    """
    shapes = model.arch.layer_shapes()
    if targets is None:
        targets = range(len(model.arch.hidden))
    targets = tuple(sorted(int(i) for i in targets))
    if not targets or any(i < 0 or i >= len(shapes) for i in targets):
        raise ShapeMismatch(f"Adapter targets {targets} outside layers 0..{len(shapes) - 1}")

    widths = [w for i in targets for w in shapes[i]]
    if not 1 <= rank <= min(widths):
        raise ShapeMismatch(f"Adapter rank {rank} outside [1, {min(widths)}]")

    down = {i: rng.normal((shapes[i][0], rank)) * DOWN_INIT_STD for i in targets}
    up = {i: np.zeros((rank, shapes[i][1])) for i in targets}
    return LoraAdapter(rank=rank, scale=float(scale), targets=targets, down=down, up=up)


def check_compatible(model: DenoiserModel, adapter: LoraAdapter):
    """Raise ShapeMismatch unless every factor fits the model's layers."""
    shapes = model.arch.layer_shapes()
    for i in adapter.targets:
        if i >= len(shapes):
            raise ShapeMismatch(f"Adapter targets layer {i}, model has {len(shapes)} layers")
        fan_in, fan_out = shapes[i]
        if adapter.down[i].shape != (fan_in, adapter.rank) or adapter.up[i].shape != (adapter.rank, fan_out):
            raise ShapeMismatch(
                f"Adapter layer {i} factors {adapter.down[i].shape}x{adapter.up[i].shape} "
                f"do not fit weight {shapes[i]}"
            )


def merge_adapter(model: DenoiserModel, adapter: LoraAdapter, scale: Optional[float] = None) -> DenoiserModel:
    """
    Fold the adapter into a copy of the model's weights.

    forward(merged) matches forward(model, adapter at `scale`) up to rounding;
    at scale 0 the weights are bit-identical to the input model.
    """
    check_compatible(model, adapter)
    scale = adapter.scale if scale is None else float(scale)
    merged = model.copy()
    if scale != 0.0:
        for i in adapter.targets:
            merged.params[f"W{i}"] = model.params[f"W{i}"] + scale * (adapter.down[i] @ adapter.up[i])
    merged.meta["merged_adapter"] = {"rank": adapter.rank, "scale": scale, "targets": list(adapter.targets)}
    return merged
