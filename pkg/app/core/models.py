# app/core/models.py
"""
Run configuration schemas.

Every scalar a stage needs lives in one of these models. They are assembled
into a RunConfig from built-in defaults, a `section.key = value` config file
and command-line overrides (see app/core/run_config.py).
"""
from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ActivationKind(str, Enum):
    RELU = "relu"


class NormKind(str, Enum):
    NONE = "none"
    BATCHNORM = "batchnorm"


class HeadKind(str, Enum):
    PRETEXT = "pretext"
    DOWNSTREAM = "downstream"


class ModelPart(str, Enum):
    BACKBONE = "backbone"
    PRETEXT_HEAD = "pretext_head"
    DOWNSTREAM_HEAD = "downstream_head"


class OptimizerKind(str, Enum):
    LARS = "lars"
    SGD = "sgd"


class ScheduleKind(str, Enum):
    COSINE = "cosine"
    CONSTANT = "constant"


class FallbackPolicy(str, Enum):
    IDENTITY = "identity"  # return v, the large-lambda limit
    NONE = "none"          # keep the current CG iterate


class Phase(str, Enum):
    LOWER = "lower"
    UPPER = "upper"


class Arm(str, Enum):
    FT_ONLY = "ft_only"
    BISSL = "bissl"
    WEIGHTED_SUM = "weighted_sum"
    BISSL_DISCARD_IJ = "bissl_discard_ij"
    BISSL_NU1 = "bissl_nu1"
    BISSL_NU1_MATCHED = "bissl_nu1_matched"


class SearchStage(str, Enum):
    FINETUNE = "finetune"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ModelSpec(_Section):
    input_dim: int = Field(20, ge=1)
    backbone_widths: List[int] = Field(default_factory=lambda: [64, 64])
    feature_dim: int = Field(32, ge=1)
    pretext_widths: List[int] = Field(default_factory=lambda: [32, 16], min_length=1)
    num_classes: int = Field(8, ge=1)
    activation: ActivationKind = ActivationKind.RELU
    norm: NormKind = NormKind.NONE

    @field_validator("backbone_widths", "pretext_widths")
    @classmethod
    def validate_widths(cls, v: List[int]) -> List[int]:
        if any(w < 1 for w in v):
            raise ValueError("all layer widths must be >= 1")
        return v

    @property
    def projection_dim(self) -> int:
        return self.pretext_widths[-1]


class AugmentConfig(_Section):
    noise_sigma: float = Field(0.1, ge=0)
    scale_range: Tuple[float, float] = (0.8, 1.2)
    mask_fraction: float = Field(0.1, ge=0, le=1)

    @field_validator("scale_range")
    @classmethod
    def validate_scale_range(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        lo, hi = v
        if lo <= 0 or hi < lo:
            raise ValueError("scale_range must satisfy 0 < min <= max")
        return v


class SynthConfig(_Section):
    input_dim: int = Field(20, ge=1)
    num_classes: int = Field(8, ge=1)
    pretext_samples: int = Field(8192, ge=2)
    downstream_samples: int = Field(1024, ge=2)
    shift_magnitude: float = Field(2.0, ge=0)
    noise_scale: float = Field(1.0, ge=0)
    cluster_spread: float = Field(0.6, gt=0)
    val_fraction: float = Field(0.2, ge=0, lt=1)
    test_fraction: float = Field(0.2, ge=0, lt=1)
    train_samples_per_class: Optional[int] = Field(None, ge=1)
    pretext_batch_size: int = Field(256, ge=1)
    downstream_batch_size: int = Field(64, ge=1)
    noise_sigma: float = Field(0.1, ge=0)
    scale_range: Tuple[float, float] = (0.8, 1.2)
    mask_fraction: float = Field(0.1, ge=0, le=1)
    seed: Optional[int] = None

    @model_validator(mode="after")
    def validate_sizes(self) -> "SynthConfig":
        if self.val_fraction + self.test_fraction >= 1:
            raise ValueError("val_fraction + test_fraction must be < 1")
        if self.pretext_samples < 2 * self.pretext_batch_size:
            raise ValueError("pretext_samples must be at least 2 * pretext_batch_size")
        if self.downstream_samples < 2 * self.downstream_batch_size:
            raise ValueError("downstream_samples must be at least 2 * downstream_batch_size")
        return self

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(
            noise_sigma=self.noise_sigma,
            scale_range=self.scale_range,
            mask_fraction=self.mask_fraction,
        )


class CGConfig(_Section):
    """
    Damped conjugate-gradient settings for the implicit-Jacobian solve.

    Each parameter segment is solved separately, and residual_tol is relative to that
    segment's own right-hand side norm, not the norm of the whole vector. A value of 0
    runs the full iteration budget.
    """
    iterations: int = Field(5, ge=1)
    damping: float = Field(10.0, ge=0)
    residual_tol: float = Field(0.0, ge=0)
    fallback: FallbackPolicy = FallbackPolicy.IDENTITY


class OptimizerSettings(_Section):
    kind: OptimizerKind = OptimizerKind.SGD
    base_lr: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    trust_coefficient: float = Field(0.001, gt=0)
    exclude_bias_and_norm: bool = False
    schedule: ScheduleKind = ScheduleKind.COSINE
    warmup_steps: Optional[int] = Field(None, ge=0)


def _default_lower() -> OptimizerSettings:
    return OptimizerSettings(kind=OptimizerKind.LARS, base_lr=0.1, weight_decay=1e-6)


def _default_upper() -> OptimizerSettings:
    return OptimizerSettings(kind=OptimizerKind.SGD, base_lr=0.01, weight_decay=1e-4, warmup_steps=0)


class BiSSLConfig(_Section):
    lam: float = Field(0.001, gt=0)
    N_L: int = Field(20, ge=1)
    N_U: int = Field(8, ge=1)
    T: int = Field(500, ge=0)
    clip_threshold: float = Field(10.0, gt=0)
    discard_ij: bool = False
    cg: CGConfig = Field(default_factory=CGConfig)
    lower: OptimizerSettings = Field(default_factory=_default_lower)
    upper: OptimizerSettings = Field(default_factory=_default_upper)
    seed: Optional[int] = None  # batch-stack and augmentation streams; falls back to pipeline.seed

    @property
    def lower_warmup_steps(self) -> int:
        # linear warm-up over 10 * N_L lower steps unless set explicitly
        if self.lower.warmup_steps is None:
            return 10 * self.N_L
        return self.lower.warmup_steps

    @property
    def upper_warmup_steps(self) -> int:
        return self.upper.warmup_steps or 0


class PretrainConfig(_Section):
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(256, ge=1)
    temperature: float = Field(0.5, gt=0)
    base_lr: float = Field(0.1, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(1e-6, ge=0)
    trust_coefficient: float = Field(0.001, gt=0)
    warmup_epochs: int = Field(10, ge=0)


class WarmupConfig(_Section):
    epochs: int = Field(20, ge=0)
    lr: float = Field(0.05, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)


class FinetuneConfig(_Section):
    epochs: int = Field(100, ge=0)
    lr: float = Field(0.01, ge=0)
    weight_decay: float = Field(1e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    topk: int = Field(5, ge=1)


class SearchSpace(_Section):
    lr_min: float = Field(1e-4, gt=0)
    lr_max: float = Field(1.0, gt=0)
    wd_min: float = Field(1e-5, gt=0)
    wd_max: float = Field(1e-2, gt=0)
    trials: int = Field(25, ge=1)

    @model_validator(mode="after")
    def validate_ranges(self) -> "SearchSpace":
        if self.lr_max < self.lr_min or self.wd_max < self.wd_min:
            raise ValueError("search ranges must satisfy min <= max")
        return self


class PipelineConfig(_Section):
    seed: int = 0
    seeds: int = Field(5, ge=1)
    arms: List[Arm] = Field(
        default_factory=lambda: [
            Arm.FT_ONLY,
            Arm.BISSL,
            Arm.WEIGHTED_SUM,
            Arm.BISSL_DISCARD_IJ,
            Arm.BISSL_NU1,
        ]
    )
    weighted_sum_w: float = Field(0.25, ge=0, le=1)


class RunConfig(_Section):
    model: ModelSpec = Field(default_factory=ModelSpec)
    data: SynthConfig = Field(default_factory=SynthConfig)
    bissl: BiSSLConfig = Field(default_factory=BiSSLConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    warmup: WarmupConfig = Field(default_factory=WarmupConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    search: SearchSpace = Field(default_factory=SearchSpace)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)

    @model_validator(mode="after")
    def validate_consistency(self) -> "RunConfig":
        if self.data.input_dim != self.model.input_dim:
            raise ValueError("data.input_dim must equal model.input_dim")
        if self.data.num_classes != self.model.num_classes:
            raise ValueError("data.num_classes must equal model.num_classes")
        return self
