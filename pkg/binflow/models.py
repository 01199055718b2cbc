"""
Pydantic models for experiment configuration and reports.
"""

import math
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class TimeSampler(BaseModel):
    """Training-time distribution of t.

    uniform: U[0, t_max]; logit_normal: sigmoid(N(m, s^2)) capped at t_max;
    clipped: U[0, 1) with draws above t_max clamped to t_max.
    """
    kind: Literal["uniform", "logit_normal", "clipped"] = "uniform"
    m: float = 0.0
    s: float = 1.0
    t_max: float = 1.0

    @field_validator("s")
    @classmethod
    def _positive_scale(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("s must be positive")
        return value

    @field_validator("t_max")
    @classmethod
    def _t_max_range(cls, value: float) -> float:
        if not 0 < value <= 1:
            raise ValueError("t_max must lie in (0, 1]")
        return value

    @property
    def label(self) -> str:
        if self.kind == "logit_normal":
            return f"logit_normal(m={self.m:g},s={self.s:g})"
        if self.t_max < 1:
            return f"{self.kind}(t_max={self.t_max:g})"
        return self.kind


class ObjectiveConfig(BaseModel):
    """Prediction space x loss space pairing"""
    prediction: Literal["x_pred", "v_pred"] = "x_pred"
    loss: Literal["x_mse", "v_mse", "bce"] = "x_mse"
    epsilon_t: float = 1e-6

    @field_validator("epsilon_t")
    @classmethod
    def _epsilon_range(cls, value: float) -> float:
        if not 0 < value <= 1e-3:
            raise ValueError("epsilon_t must lie in (0, 1e-3]")
        return value

    @model_validator(mode="after")
    def _bce_needs_signal_logits(self) -> "ObjectiveConfig":
        if self.prediction == "v_pred" and self.loss == "bce":
            raise ValueError("bce requires signal-space logits (x_pred)")
        return self

    @property
    def aligned(self) -> bool:
        return (self.prediction, self.loss) in {
            ("x_pred", "x_mse"), ("x_pred", "bce"), ("v_pred", "v_mse")
        }

    @property
    def name(self) -> str:
        return f"{self.prediction}-{self.loss}"


class MlpConfig(BaseModel):
    """FiLM-gated MLP backbone"""
    in_dim: int
    out_dim: int
    hidden: int = 256
    layers: int = 2
    embed_dim: int = 128
    cond_classes: Optional[int] = None
    cond_vec_dim: Optional[int] = None

    @field_validator("in_dim", "out_dim", "hidden", "layers", "embed_dim")
    @classmethod
    def _positive(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("dimensions must be positive")
        return value

    @model_validator(mode="after")
    def _single_condition(self) -> "MlpConfig":
        if self.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        if self.cond_classes is not None and self.cond_vec_dim is not None:
            raise ValueError("configure either class or vector conditioning, not both")
        if self.cond_classes is not None and self.cond_classes < 1:
            raise ValueError("cond_classes must be positive")
        if self.cond_vec_dim is not None and self.cond_vec_dim < 1:
            raise ValueError("cond_vec_dim must be positive")
        return self


class TrainConfig(BaseModel):
    """Optimizer and loop settings for flow-matching training"""
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 5000
    batch: int = 1000
    grad_clip: Optional[float] = None
    seed: int = 0
    sampler: TimeSampler = Field(default_factory=TimeSampler)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    divergence_threshold: float = 1e30
    divergence_ratio: Optional[float] = 1e6
    divergence_warmup: int = 20
    validate_every: Optional[int] = None
    validation_t_grid: List[float] = Field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7, 0.9])
    checkpoint_every: Optional[int] = None
    log_every: int = 100
    progress: bool = False

    @field_validator("lr", "eps_adam")
    @classmethod
    def _positive_real(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("must be positive")
        return value

    @field_validator("beta1", "beta2")
    @classmethod
    def _unit_interval(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError("betas must lie in (0, 1)")
        return value

    @field_validator("steps", "batch")
    @classmethod
    def _non_negative(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("grad_clip")
    @classmethod
    def _positive_clip(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 0:
            raise ValueError("grad_clip must be positive")
        return value

    @field_validator("divergence_ratio")
    @classmethod
    def _ratio_above_one(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and value <= 1:
            raise ValueError("divergence_ratio must exceed 1")
        return value


class SampleConfig(BaseModel):
    """Euler integration grid"""
    steps: int = 50
    t0: float = 0.0
    epsilon_t: float = 1e-6
    hard_threshold: bool = False

    @field_validator("steps")
    @classmethod
    def _positive_steps(cls, value: int) -> int:
        if value <= 0:
            raise ValueError("steps must be positive")
        return value

    @field_validator("t0")
    @classmethod
    def _t0_range(cls, value: float) -> float:
        if not 0 <= value < 1:
            raise ValueError("t0 must lie in [0, 1)")
        return value

    @field_validator("epsilon_t")
    @classmethod
    def _epsilon_positive(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("epsilon_t must be positive")
        return value


class AnalysisConstants(BaseModel):
    """Constants of the gradient-variance lower bound"""
    K: float = 1.0
    c: float = 1.0
    eps_resid_sq: float = 1.0
    D: int = 16

    @field_validator("K", "c", "eps_resid_sq", "D")
    @classmethod
    def _strictly_positive(cls, value):
        if value <= 0:
            raise ValueError("analysis constants must be strictly positive")
        return value


class AnalysisReport(BaseModel):
    """JSON report emitted by the analyze command"""
    case: Literal["continuous", "binary"]
    slope_integrand: float
    slope_integral: float
    u_peak: float
    t_peak: float
    mass_above: float
    u_peak_exact: float
    weighted_integral: float
    u_overflow: float
    overflow_mass: float
    s: float
    m: float


class DivergenceEvent(BaseModel):
    """A training run leaving the finite range, recorded as a measurement.

    Non-finite loss or gradient values are stored as None so the event stays
    valid JSON; ``reason`` says which quantity blew up.
    """
    step: int
    reason: Literal["non_finite_loss", "gradient_overflow", "gradient_spike"]
    loss: Optional[float] = None
    grad_sq_norm: Optional[float] = None

    @field_validator("loss", "grad_sq_norm")
    @classmethod
    def _finite_or_none(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not math.isfinite(value):
            return None
        return value


def default_objectives(binary: bool) -> List[ObjectiveConfig]:
    objectives = [
        ObjectiveConfig(prediction="x_pred", loss="x_mse"),
        ObjectiveConfig(prediction="x_pred", loss="v_mse"),
        ObjectiveConfig(prediction="v_pred", loss="v_mse"),
    ]
    if binary:
        objectives.append(ObjectiveConfig(prediction="x_pred", loss="bce"))
    return objectives


class ToyRecipe(BaseModel):
    """Low-dimensional stability study"""
    data_kind: Literal["gaussian_iid", "bpsk_iid"] = "bpsk_iid"
    D: int = 16
    batch: int = 1000
    steps: int = 5000
    lr: float = 1e-4
    hidden: int = 256
    layers: int = 2
    embed_dim: int = 128
    grad_clip: Optional[float] = None
    objectives: Optional[List[ObjectiveConfig]] = None
    samplers: List[TimeSampler] = Field(default_factory=lambda: [
        TimeSampler(kind="uniform"),
        TimeSampler(kind="logit_normal", m=-0.8, s=0.8),
    ])
    euler_steps: int = 3
    t0_grid: List[float] = Field(default_factory=lambda: [round(0.1 * k, 1) for k in range(1, 10)])
    ber_bits: int = 100_000
    bins: int = 20
    seed: int = 0
    progress: bool = False

    @model_validator(mode="after")
    def _fill_objectives(self) -> "ToyRecipe":
        if self.objectives is None:
            self.objectives = default_objectives(self.data_kind == "bpsk_iid")
        if self.data_kind == "gaussian_iid" and any(o.loss == "bce" for o in self.objectives):
            raise ValueError("bce needs binary data")
        return self


class BmnistConfig(BaseModel):
    """Binarized-image generation recipe"""
    images_path: str
    labels_path: str
    subset: int = 5000
    downscale: Literal[1, 2] = 2
    threshold: float = 0.5
    objectives: List[ObjectiveConfig] = Field(default_factory=lambda: default_objectives(True))
    sampler: TimeSampler = Field(default_factory=TimeSampler)
    steps: int = 2000
    batch: int = 128
    lr: float = 1e-3
    hidden: int = 256
    layers: int = 2
    embed_dim: int = 128
    euler_steps: int = 50
    samples_per_class: int = 10
    val_size: int = 500
    validate_every: int = 100
    cache_path: Optional[str] = None
    seed: int = 0
    progress: bool = False

    @field_validator("threshold")
    @classmethod
    def _threshold_range(cls, value: float) -> float:
        if not 0 < value < 1:
            raise ValueError("threshold must lie in (0, 1)")
        return value


class MimoConfig(BaseModel):
    """Real-valued MIMO detection recipe"""
    n: int = 2
    snr_sweep: List[float] = Field(default_factory=lambda: [float(v) for v in range(0, 13, 2)])
    objectives: List[ObjectiveConfig] = Field(default_factory=lambda: [
        ObjectiveConfig(prediction="x_pred", loss="bce"),
        ObjectiveConfig(prediction="x_pred", loss="x_mse"),
        ObjectiveConfig(prediction="v_pred", loss="v_mse"),
        ObjectiveConfig(prediction="x_pred", loss="v_mse"),
    ])
    t_max: float = 0.99
    weight_decay: float = 0.01
    grad_clip: Optional[float] = None
    lr: float = 1e-3
    steps: int = 3000
    batch: int = 500
    hidden: int = 256
    layers: int = 2
    embed_dim: int = 128
    euler_steps: int = 2
    bits_per_point: int = 100_000
    map_enabled: bool = True
    validate_every: int = 100
    seed: int = 0
    progress: bool = False

    @field_validator("n")
    @classmethod
    def _positive_n(cls, value: int) -> int:
        if value < 1:
            raise ValueError("n must be at least 1")
        return value

    @property
    def train_snr_range(self) -> Tuple[float, float]:
        return min(self.snr_sweep), max(self.snr_sweep)


class RunManifest(BaseModel):
    """Record of one CLI invocation"""
    command: str
    config: Dict
    seed: int
    version: str
    output_dir: str
    duration_s: float = 0.0
    outputs: List[str] = Field(default_factory=list)
    divergence_events: Dict[str, DivergenceEvent] = Field(default_factory=dict)
