import os
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from engine.errors import ConfigError


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    return int(value) if value not in (None, "") else default


def _env_float(name: str, default: float) -> float:
    value = os.getenv(name)
    return float(value) if value not in (None, "") else default


def _env_str(name: str, default: str) -> str:
    value = os.getenv(name)
    return value if value not in (None, "") else default


class _Options(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    @classmethod
    def build(cls, **kwargs):
        """
        Validates and constructs, turning pydantic errors into ConfigError.
        None values are dropped so environment-backed defaults apply.
        """
        try:
            return cls(**{k: v for k, v in kwargs.items() if v is not None})
        except ValidationError as e:
            raise ConfigError(f"Invalid {cls.__name__}: {e}") from e


class BPOptions(_Options):
    max_iters: int = Field(default_factory=lambda: _env_int("HGM_BP_MAX_ITERS", 200), ge=1)
    tolerance: float = Field(default_factory=lambda: _env_float("HGM_BP_TOLERANCE", 1e-6), gt=0)
    damping: float = Field(default_factory=lambda: _env_float("HGM_BP_DAMPING", 0.5), ge=0, lt=1)
    schedule: Literal["flooding"] = "flooding"
    trace: bool = False


class MatchParams(_Options):
    m: int = Field(default_factory=lambda: _env_int("HGM_M", 3), ge=1)
    knn: int = Field(default_factory=lambda: _env_int("HGM_KNN", 5), ge=2)
    delta: float = Field(default_factory=lambda: _env_float("HGM_DELTA", 0.5), gt=0)


class SpectralParams(_Options):
    m: int = Field(default_factory=lambda: _env_int("HGM_M", 3), ge=1)
    # unit-square coordinates; the synthetic generator samples in [0, 1]^2
    distance_threshold: float = Field(default=0.35, gt=0)
    sigma: float = Field(default=0.5, gt=0)
    tolerance: float = Field(default=1e-8, gt=0)
    max_iters: int = Field(default=1000, ge=1)


def _train_bp_options() -> BPOptions:
    # step acceptance compares objectives, so BP noise has to stay below the gain of a step
    return BPOptions(tolerance=1e-8, max_iters=_env_int("HGM_TRAIN_BP_MAX_ITERS", 500))


class TrainConfig(_Options):
    step_size: float = Field(default_factory=lambda: _env_float("HGM_STEP", 0.1), gt=0)
    step_growth: float = Field(default=1.5, ge=1.0)
    max_iters: int = Field(default_factory=lambda: _env_int("HGM_TRAIN_MAX_ITERS", 300), ge=1)
    grad_tolerance: float = Field(default=1e-3, gt=0)
    l2_strength: float = Field(default_factory=lambda: _env_float("HGM_L2", 1e-2), ge=0)
    variant: Literal["discrete", "polynomial"] = Field(
        default_factory=lambda: _env_str("HGM_VARIANT", "discrete")
    )
    k_max: int = Field(default=3, ge=2)
    min_step: float = Field(default=1e-10, gt=0)
    exact_inference: bool = False
    bp_opts: BPOptions = Field(default_factory=_train_bp_options)


class ShearTransform(_Options):
    kind: Literal["shear"] = "shear"
    factor: float = Field(default=1.0, ge=1.0, le=2.0)


class RotateTransform(_Options):
    kind: Literal["rotate"] = "rotate"
    angle: float = Field(default=0.0, ge=0.0, le=90.0)


class CompositeTransform(_Options):
    kind: Literal["composite"] = "composite"
    factor: float = Field(default=1.0, ge=1.0, le=2.0)
    angle: float = Field(default=0.0, ge=0.0, le=90.0)


Transform = Union[ShearTransform, RotateTransform, CompositeTransform]


class SynthConfig(_Options):
    n_points: int = Field(default=30, ge=1)
    transform: Transform = Field(default_factory=ShearTransform, discriminator="kind")
    jitter_sigma: float = Field(default=0.0, ge=0)
    descriptor_dim: int = Field(default=16, ge=1)
    descriptor_noise_sigma: float = Field(default=0.0, ge=0)
    distractor_count: int = Field(default=0, ge=0)
    seed: int = 0


class ExperimentSpec(_Options):
    dataset: str
    model_path: Optional[str] = None
    method: Literal["learned", "linear", "greedy", "spectral"] = "learned"
    params: MatchParams = Field(default_factory=MatchParams)
    bp_opts: BPOptions = Field(default_factory=BPOptions)
    out: str = "out"
    one_to_one: bool = False

    @field_validator("dataset", "model_path")
    @classmethod
    def _existing_path(cls, value):
        if value is not None and not os.path.exists(value):
            raise ValueError(f"path does not exist: {value}")
        return value

    @model_validator(mode="after")
    def _needs_model(self):
        if self.method == "learned" and not self.model_path:
            raise ValueError("method 'learned' requires a model path")
        return self


def method_list(methods: Optional[List[str]]) -> List[str]:
    allowed = ("learned", "linear", "greedy", "spectral")
    methods = methods or ["learned"]
    for m in methods:
        if m not in allowed:
            raise ConfigError(f"Unknown method '{m}'. Expected one of {allowed}.")
    return sorted(set(methods))
