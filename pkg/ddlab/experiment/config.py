"""
Run configuration loader for ddlab experiments.

A config is a JSON (or YAML) document validated into RunConfig before any
work starts. Command-line overrides use dotted paths:

    --set training.iterations=2000 --set sampler.transition_point=2
"""
import hashlib
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ddlab.control import DEFAULT_SCALES, SliderConfig
from ddlab.denoiser.network import Architecture, LossWeighting
from ddlab.diffusion.sampler import Variance
from ddlab.diffusion.schedule import NoiseSchedule, StepGrid, make_grid, make_schedule
from ddlab.diffusion.training import TrainConfig
from ddlab.distillation import DistillConfig, DistillMethod
from ddlab.errors import ConfigInvalid
from ddlab.numerics import RngStream
from ddlab.toy_data import DEFAULT_PARAMS, DistKind, ToyDistribution

ARMS = ("base", "distilled", "hybrid", "skip")

# stream ids per purpose, derived from the master seed
DEFAULT_SEED_OFFSETS: Dict[str, int] = {
    "data": 1,
    "train": 2,
    "distill": 3,
    "lora": 4,
    "sample": 5,
    "reference": 6,
    "truth_eval": 7,
    "dtviz": 8,
    "control": 9,
    "fidelity": 10,
}


class _Spec(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DistributionSpec(_Spec):
    kind: DistKind
    params: Dict[str, float] = Field(default_factory=dict)
    attribute_direction: List[float] = Field(default_factory=lambda: [1.0, 0.0])

    @field_validator("attribute_direction")
    @classmethod
    def normalize_direction(cls, v: List[float]) -> List[float]:
        if len(v) != 2:
            raise ValueError("attribute_direction needs two components")
        norm = math.hypot(*v)
        if norm == 0.0 or not math.isfinite(norm):
            raise ValueError("attribute_direction must be a non-zero finite vector")
        return [v[0] / norm, v[1] / norm]

    @model_validator(mode="after")
    def check_params(self) -> "DistributionSpec":
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.kind])
        if unknown:
            raise ValueError(f"Unknown {self.kind.value} params: {sorted(unknown)}")
        self.build()
        return self

    def build(self) -> ToyDistribution:
        return ToyDistribution(kind=self.kind, params=dict(self.params),
                               attribute_direction=tuple(self.attribute_direction))


class ScheduleSpec(_Spec):
    kind: Literal["cosine"] = "cosine"
    T: int = Field(ge=4)


class ModelSpec(_Spec):
    hidden: List[int] = Field(default_factory=lambda: [128, 128, 128], min_length=1)
    time_embed_dim: int = Field(32, ge=2)
    cond_embed_dim: int = Field(8, ge=1)
    conditional: bool = True

    @field_validator("time_embed_dim")
    @classmethod
    def even_embedding(cls, v: int) -> int:
        if v % 2:
            raise ValueError("time_embed_dim must be even")
        return v


class TrainingSpec(_Spec):
    iterations: int = Field(10_000, ge=1)
    batch: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_min: float = Field(1e-4, ge=0)
    cond_dropout: float = Field(0.1, ge=0, le=1)
    weighting: LossWeighting = LossWeighting.V
    log_every: int = Field(100, ge=1)


class DistillationSpec(_Spec):
    method: DistillMethod = DistillMethod.REGRESSION
    iterations_per_round: int = Field(4000, ge=0)
    regression_iterations: int = Field(8000, ge=0)
    lr: float = Field(3e-4, gt=0)
    lr_min: float = Field(3e-5, ge=0)
    batch: int = Field(256, ge=1)
    pool_size: int = Field(16_384, ge=1)
    n_validation: int = Field(1000, ge=1)
    n_pairs: int = Field(1000, ge=1)
    unpaired_fraction: float = Field(0.08, ge=0, lt=1)
    log_every: int = Field(100, ge=1)


class SamplerSpec(_Spec):
    base_steps: int = Field(32, ge=1)
    distilled_steps: int = Field(4, ge=1)
    transition_point: int = Field(1, ge=0)
    base_substeps: int = Field(1, ge=1)
    guidance_scale: float = 1.0
    stochastic: bool = False
    base_stochastic: bool = True
    variance: Variance = Variance.POSTERIOR
    distilled_conditional: bool = False
    arm: Literal["base", "distilled", "hybrid", "skip"] = "hybrid"


class SweepSpec(_Spec):
    guidance: List[float] = Field(default_factory=lambda: [-1.0, 0.0, 0.5, 1.0, 2.0, 4.0])
    k: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    substeps: List[int] = Field(default_factory=lambda: [1, 2, 4, 8])

    @field_validator("substeps")
    @classmethod
    def positive_substeps(cls, v: List[int]) -> List[int]:
        if any(m < 1 for m in v):
            raise ValueError("substep counts must be >= 1")
        return v


class ControlSpec(_Spec):
    direction: Literal["base_to_distilled", "distilled_to_base"] = "base_to_distilled"
    source: Literal["base", "distilled"] = "base"
    delta: float = 2.0
    rank: int = Field(4, ge=1)
    iterations: int = Field(2000, ge=1)
    batch: int = Field(256, ge=1)
    lr: float = Field(1e-3, gt=0)
    lr_min: float = Field(1e-4, ge=0)
    n_samples: int = Field(2000, ge=2)
    n_panel: int = Field(1000, ge=1)
    scales: List[float] = Field(default_factory=lambda: list(DEFAULT_SCALES))

    @field_validator("delta")
    @classmethod
    def nonzero_delta(cls, v: float) -> float:
        if v == 0.0:
            raise ValueError("delta must be non-zero")
        return v

    @field_validator("scales")
    @classmethod
    def scales_include_reference(cls, v: List[float]) -> List[float]:
        if 0.0 not in v or 1.0 not in v:
            raise ValueError("scales must include 0 and 1")
        return v


class MetricsSpec(_Spec):
    n_samples: int = Field(10_000, ge=2)
    n_truth: int = Field(10_000, ge=2)
    dt_chains: int = Field(256, ge=1)
    panel_chains: int = Field(8, ge=1)


class SeedSpec(_Spec):
    master: int = Field(ge=0, lt=2**64)
    offsets: Dict[str, int] = Field(default_factory=lambda: dict(DEFAULT_SEED_OFFSETS))

    @model_validator(mode="after")
    def fill_offsets(self) -> "SeedSpec":
        self.offsets = {**DEFAULT_SEED_OFFSETS, **self.offsets}
        return self


class RunConfig(_Spec):
    """Everything one experiment run depends on."""
    distribution: DistributionSpec
    schedule: ScheduleSpec
    model: ModelSpec = Field(default_factory=ModelSpec)
    training: TrainingSpec = Field(default_factory=TrainingSpec)
    distillation: DistillationSpec = Field(default_factory=DistillationSpec)
    sampler: SamplerSpec = Field(default_factory=SamplerSpec)
    sweep: SweepSpec = Field(default_factory=SweepSpec)
    control: ControlSpec = Field(default_factory=ControlSpec)
    metrics: MetricsSpec = Field(default_factory=MetricsSpec)
    seeds: SeedSpec
    output_dir: str = "runs/default"

    @model_validator(mode="after")
    def check_cross_fields(self) -> "RunConfig":
        s = self.sampler
        T = self.schedule.T
        if s.base_steps > T or s.distilled_steps > T:
            raise ValueError(f"grid sizes {s.base_steps}/{s.distilled_steps} exceed T={T}")
        if s.base_steps % s.distilled_steps:
            raise ValueError(f"distilled_steps {s.distilled_steps} does not divide base_steps {s.base_steps}")
        if s.transition_point > s.distilled_steps:
            raise ValueError(f"transition_point {s.transition_point} exceeds distilled_steps {s.distilled_steps}")
        if any(k < 0 or k > s.distilled_steps for k in self.sweep.k):
            raise ValueError(f"sweep.k values must lie in [0, {s.distilled_steps}]")
        return self

    # builders

    def toy_distribution(self) -> ToyDistribution:
        return self.distribution.build()

    def noise_schedule(self) -> NoiseSchedule:
        return make_schedule(self.schedule.kind, self.schedule.T)

    def base_grid(self, schedule: NoiseSchedule) -> StepGrid:
        return make_grid(schedule, self.sampler.base_steps)

    def distilled_grid(self, schedule: NoiseSchedule) -> StepGrid:
        return make_grid(schedule, self.sampler.distilled_steps)

    def architecture(self) -> Architecture:
        m = self.model
        return Architecture(hidden=tuple(m.hidden), time_embed_dim=m.time_embed_dim,
                            cond_embed_dim=m.cond_embed_dim)

    def train_config(self) -> TrainConfig:
        return TrainConfig(conditional=self.model.conditional, **self.training.model_dump())

    def distill_config(self, method: Optional[str] = None) -> DistillConfig:
        d = self.distillation.model_dump(exclude={"n_pairs"})
        if method is not None:
            d["method"] = method
        return DistillConfig(base_steps=self.sampler.base_steps,
                             target_steps=self.sampler.distilled_steps, **d)

    def slider_config(self) -> SliderConfig:
        c = self.control
        return SliderConfig(delta=c.delta, rank=c.rank, iterations=c.iterations, batch=c.batch,
                            lr=c.lr, lr_min=c.lr_min, weighting=self.training.weighting,
                            log_every=self.training.log_every)

    def rng(self, purpose: str) -> RngStream:
        """Fresh stream for one purpose; equal purposes give equal draws."""
        return RngStream(seed=self.seeds.master, stream_id=self.seeds.offsets[purpose])


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any):
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def parse_override(item: str) -> Tuple[str, Any]:
    """Split "a.b=value"; the value is parsed as YAML so 3, true, [1, 2] are typed."""
    if "=" not in item:
        raise ConfigInvalid(f"Override must look like dotted.path=value, got {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigInvalid(f"Override has an empty path: {item!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"Unparseable override value in {item!r}: {e}")
    return key, value


def validate_config(data: Dict[str, Any], source: str = "<config>") -> RunConfig:
    """
    Validate a raw config mapping.

    Raises:
        ConfigInvalid: Listing every failing dotted field
    """
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            loc = ".".join(str(part) for part in err["loc"]) or "<root>"
            problems.append(f"{loc}: {err['msg']}")
        raise ConfigInvalid(f"Invalid config {source}: " + "; ".join(problems))


def load_config(
    path: Path,
    overrides: Sequence[str] = (),
    output_dir: Optional[str] = None,
) -> RunConfig:
    """
    Load, override and validate a run config.

    Raises:
        ConfigInvalid: If the file is missing, unparseable or invalid
    """
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"Config not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigInvalid(f"Unparseable config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigInvalid(f"Config {path} must be a mapping, got {type(data).__name__}")

    for item in overrides:
        key, value = parse_override(item)
        _set_dotted(data, key, value)
    if output_dir is not None:
        data["output_dir"] = str(output_dir)
    return validate_config(data, str(path))


def config_hash(config: RunConfig) -> str:
    """sha256 of the canonical JSON of every semantic field (output_dir excluded)."""
    canonical = config.model_dump(mode="json", exclude={"output_dir"})
    canonical_json = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical_json.encode("utf-8")).hexdigest()
