"""
MLP noise predictor with hand-written reverse-mode gradients.

The network sees [x / s_t, sinusoidal(t), cond_embedding] and its last layer
emits a velocity estimate v_hat. With sd the data standard deviation and
s_t^2 = ab * sd^2 + (1 - ab), `forward` converts it to the noise prediction

    eps_hat = sqrt(ab) * sd / s_t * v_hat + sqrt(1 - ab) / s_t^2 * x

so the one-shot estimate x0_hat = (x - sqrt(1 - ab) * eps_hat) / sqrt(ab) reduces to
x0_hat = sqrt(ab) * sd^2 / s_t^2 * x - sqrt(1 - ab) * sd / s_t * v_hat.
Both the network input and its regression target have unit scale at every t,
and x0_hat stays well conditioned at t = T where alpha_bar is below 1e-3.
With sd = 1 this is the plain v-parameterisation.

Weights use the row convention h_next = h @ W + b, W of shape (fan_in, fan_out).
"""
import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ddlab.errors import ConditionOutOfRange, EmptyBatch, ShapeMismatch
from ddlab.numerics import RngStream

NULL_COND = -1


class Role(str, Enum):
    """What a checkpoint holds."""
    BASE = "base"
    DISTILLED = "distilled"
    LORA = "lora"


class Trainable(str, Enum):
    """Which parameter set `backward` differentiates."""
    MODEL = "model_params"
    ADAPTER = "adapter_params"


class LossWeighting(str, Enum):
    """Per-example weighting of the eps-prediction loss."""
    EPS = "eps"
    V = "v"


@dataclass(frozen=True)
class Architecture:
    """Shape description shared by every model built from one config."""
    hidden: Tuple[int, ...] = (128, 128, 128)
    time_embed_dim: int = 32
    cond_embed_dim: int = 8
    n_conditions: int = 0
    activation: str = "silu"
    data_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))
        object.__setattr__(self, "data_std", float(self.data_std))
        if not self.hidden:
            raise ValueError("Architecture needs at least one hidden layer")
        if not self.data_std > 0.0:
            raise ValueError(f"data_std must be positive, got {self.data_std}")
        if self.time_embed_dim % 2:
            raise ValueError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.activation != "silu":
            raise ValueError(f"Unsupported activation: {self.activation}")

    @property
    def input_dim(self) -> int:
        return 2 + self.time_embed_dim + self.cond_embed_dim

    @property
    def n_layers(self) -> int:
        """Number of weight matrices (hidden layers plus output)."""
        return len(self.hidden) + 1

    def layer_shapes(self) -> List[Tuple[int, int]]:
        widths = [self.input_dim, *self.hidden, 2]
        return list(zip(widths[:-1], widths[1:]))

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Parameter names and shapes in declared (checkpoint) order."""
        shapes: Dict[str, Tuple[int, ...]] = {
            "cond_table": (self.n_conditions + 1, self.cond_embed_dim)
        }
        for i, (fan_in, fan_out) in enumerate(self.layer_shapes()):
            shapes[f"W{i}"] = (fan_in, fan_out)
            shapes[f"b{i}"] = (fan_out,)
        return shapes

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hidden": list(self.hidden),
            "time_embed_dim": self.time_embed_dim,
            "cond_embed_dim": self.cond_embed_dim,
            "n_conditions": self.n_conditions,
            "activation": self.activation,
            "data_std": self.data_std,
        }


@dataclass
class DenoiserModel:
    """
    Weights of one eps_theta network plus the schedule table it predicts for.

    The role tag distinguishes f_base from f_distil; both always share one
    Architecture, so any adapter fits either.
    """
    arch: Architecture
    params: Dict[str, np.ndarray]
    alpha_bar: np.ndarray
    schedule_id: str
    role: Role = Role.BASE
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def n_conditions(self) -> int:
        return self.arch.n_conditions

    def copy(self, role: Optional[Role] = None) -> "DenoiserModel":
        """Deep copy, optionally retagged."""
        return DenoiserModel(
            arch=self.arch,
            params={k: v.copy() for k, v in self.params.items()},
            alpha_bar=self.alpha_bar,
            schedule_id=self.schedule_id,
            role=self.role if role is None else Role(role),
            meta=copy.deepcopy(self.meta),
        )

    def same_shapes(self, other: "DenoiserModel") -> bool:
        return self.arch.param_shapes() == other.arch.param_shapes()


@dataclass
class GradientTape:
    """Gradient accumulators mirroring model and adapter parameter shapes."""
    model: Dict[str, np.ndarray]
    adapter: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, model: DenoiserModel, adapter=None) -> "GradientTape":
        return cls(
            model={k: np.zeros_like(v) for k, v in model.params.items()},
            adapter={} if adapter is None else {k: np.zeros_like(v) for k, v in adapter.params().items()},
        )

    def add(self, other: "GradientTape"):
        for k, v in other.model.items():
            self.model[k] += v
        for k, v in other.adapter.items():
            self.adapter[k] += v


@dataclass
class ForwardTrace:
    """Activations kept by `forward_trace` for `backprop`."""
    inputs: List[np.ndarray]
    pre_acts: List[np.ndarray]
    lora_hidden: Dict[int, np.ndarray]
    cond_index: np.ndarray
    input_scale: np.ndarray
    signal: np.ndarray
    noise: np.ndarray
    output: np.ndarray


def init_model(
    arch: Architecture,
    alpha_bar: np.ndarray,
    schedule_id: str,
    rng: RngStream,
    role: Role = Role.BASE,
) -> DenoiserModel:
    """Kaiming fan-in initialisation with zero biases."""
    params: Dict[str, np.ndarray] = {}
    n_weights = arch.n_layers
    for name, shape in arch.param_shapes().items():
        if name == "cond_table":
            params[name] = rng.normal(shape)
        elif name.startswith("W"):
            gain = 1.0 if int(name[1:]) == n_weights - 1 else 2.0
            params[name] = rng.normal(shape) * np.sqrt(gain / shape[0])
        else:
            params[name] = np.zeros(shape)
    return DenoiserModel(arch=arch, params=params, alpha_bar=np.asarray(alpha_bar),
                         schedule_id=schedule_id, role=Role(role))


def time_embedding(t_frac: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding with frequencies geometric from 1 to 1000."""
    freqs = np.geomspace(1.0, 1000.0, dim // 2)
    angles = np.asarray(t_frac, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def _silu_grad(z: np.ndarray) -> np.ndarray:
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def _cond_index(model: DenoiserModel, cond, n: int) -> np.ndarray:
    n_cond = model.arch.n_conditions
    if cond is None:
        return np.full(n, n_cond, dtype=np.int64)
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,))
    bad = (cond != NULL_COND) & ((cond < 0) | (cond >= n_cond))
    if np.any(bad):
        raise ConditionOutOfRange(
            f"Condition {int(cond[bad][0])} outside [0, {n_cond}) for this model"
        )
    return np.where(cond == NULL_COND, n_cond, cond)


def forward_trace(
    model: DenoiserModel,
    x: np.ndarray,
    t_frac,
    cond=None,
    adapter=None,
) -> ForwardTrace:
    """Batched forward pass keeping everything backprop needs."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t_frac = np.broadcast_to(np.asarray(t_frac, dtype=np.float64), (n,))
    if np.any((t_frac < 0.0) | (t_frac > 1.0)):
        raise ValueError("t_frac must lie in [0, 1]")

    cond_index = _cond_index(model, cond, n)
    alpha_bar = _alpha_bar_at(model, t_frac)
    data_var = model.arch.data_std ** 2
    total_var = (alpha_bar * data_var + 1.0 - alpha_bar)[:, None]
    input_scale = 1.0 / np.sqrt(total_var)
    h = np.concatenate(
        [input_scale * x, time_embedding(t_frac, model.arch.time_embed_dim),
         model.params["cond_table"][cond_index]],
        axis=1,
    )

    active = adapter is not None and adapter.scale != 0.0
    inputs, pre_acts, lora_hidden = [], [], {}
    last = model.arch.n_layers - 1
    for i in range(model.arch.n_layers):
        inputs.append(h)
        z = h @ model.params[f"W{i}"] + model.params[f"b{i}"]
        if active and i in adapter.targets:
            low = h @ adapter.down[i]
            lora_hidden[i] = low
            z = z + adapter.scale * (low @ adapter.up[i])
        if i == last:
            velocity = z
        else:
            pre_acts.append(z)
            h = _silu(z)

    signal = np.sqrt(alpha_bar)[:, None] * model.arch.data_std * input_scale
    noise = np.sqrt(1.0 - alpha_bar)[:, None] / total_var
    output = signal * velocity + noise * x
    return ForwardTrace(inputs=inputs, pre_acts=pre_acts, lora_hidden=lora_hidden,
                        cond_index=cond_index, input_scale=input_scale, signal=signal,
                        noise=noise, output=output)


def _alpha_bar_at(model: DenoiserModel, t_frac) -> np.ndarray:
    return np.interp(np.asarray(t_frac, dtype=np.float64) * (len(model.alpha_bar) - 1),
                     np.arange(len(model.alpha_bar)), model.alpha_bar)


def forward(model: DenoiserModel, x: np.ndarray, t_frac, cond=None, adapter=None) -> np.ndarray:
    """
    Evaluate eps_theta(x_t, t, c).

    Args:
        model: Network weights
        x: States, shape (n, 2) or (2,)
        t_frac: t / T in [0, 1], scalar or (n,)
        cond: Condition ids, None or NULL_COND entries select the null row
        adapter: Optional LoraAdapter applied on top of the weights

    Returns:
        Noise predictions with the shape of x
    """
    single = np.ndim(x) == 1
    out = forward_trace(model, x, t_frac, cond, adapter).output
    return out[0] if single else out


def backprop(
    model: DenoiserModel,
    trace: ForwardTrace,
    grad_out: np.ndarray,
    trainable: Trainable = Trainable.MODEL,
    adapter=None,
) -> Tuple[GradientTape, np.ndarray]:
    """
    Reverse pass from dLoss/d(eps_hat) to parameter and input gradients.

    Returns:
        (tape, grad_x) where only the selected parameter set is filled in
    """
    trainable = Trainable(trainable)
    tape = GradientTape.zeros(model, adapter)
    want_model = trainable == Trainable.MODEL
    want_adapter = trainable == Trainable.ADAPTER and adapter is not None
    active = adapter is not None and adapter.scale != 0.0

    grad_x_skip = trace.noise * grad_out
    grad_z = trace.signal * grad_out
    for i in reversed(range(model.arch.n_layers)):
        if i < model.arch.n_layers - 1:
            grad_z = grad_h * _silu_grad(trace.pre_acts[i])
        h = trace.inputs[i]
        if want_model:
            tape.model[f"W{i}"] = h.T @ grad_z
            tape.model[f"b{i}"] = grad_z.sum(axis=0)
        grad_h = grad_z @ model.params[f"W{i}"].T
        if active and i in adapter.targets:
            grad_low = adapter.scale * (grad_z @ adapter.up[i].T)
            if want_adapter:
                tape.adapter[f"down{i}"] = h.T @ grad_low
                tape.adapter[f"up{i}"] = adapter.scale * (trace.lora_hidden[i].T @ grad_z)
            grad_h = grad_h + grad_low @ adapter.down[i].T

    grad_x = trace.input_scale * grad_h[:, :2] + grad_x_skip
    if want_model:
        cond_grad = np.zeros_like(model.params["cond_table"])
        np.add.at(cond_grad, trace.cond_index, grad_h[:, 2 + model.arch.time_embed_dim:])
        tape.model["cond_table"] = cond_grad
    return tape, grad_x


def backward(
    model: DenoiserModel,
    x: np.ndarray,
    t_frac,
    cond,
    target: np.ndarray,
    trainable: Trainable = Trainable.MODEL,
    adapter=None,
    weights: Optional[np.ndarray] = None,
) -> Tuple[float, GradientTape]:
    """
    Mean squared eps-prediction error and its exact gradients.

    The loss is mean_i w_i * ||eps_hat_i - target_i||^2 / 2 over a batch, which
    is the plain element-wise MSE when weights are omitted.

    Raises:
        EmptyBatch: If the batch has no rows
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise EmptyBatch("backward needs a non-empty batch")
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if target.shape != x.shape:
        raise ShapeMismatch(f"Target shape {target.shape} does not match input {x.shape}")

    n = x.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    trace = forward_trace(model, x, t_frac, cond, adapter)
    residual = trace.output - target
    loss = float(np.sum(w[:, None] * residual ** 2) / (2.0 * n))
    grad_out = w[:, None] * residual / n
    tape, _ = backprop(model, trace, grad_out, trainable, adapter)
    return loss, tape


def loss_weights(model: DenoiserModel, t_frac: np.ndarray, weighting: LossWeighting) -> Optional[np.ndarray]:
    """
    Per-example weights.

    "v" weighting makes the eps loss equal the squared error of the raw
    network output: (ab * sd^2 + 1 - ab) / (ab * sd^2), i.e. 1 / ab when sd = 1.
    """
    if LossWeighting(weighting) == LossWeighting.EPS:
        return None
    alpha_bar = _alpha_bar_at(model, t_frac)
    data_var = model.arch.data_std ** 2
    return (alpha_bar * data_var + 1.0 - alpha_bar) / (alpha_bar * data_var)

