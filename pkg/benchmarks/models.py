"""Benchmark specifications, settings and results."""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from adaptation.models import TheoryReport


class SignalDomain(str, Enum):
    SOURCE = 'source'
    TARGET = 'target'


class SignalSpec(BaseModel):
    """Sampled sine signal on an equispaced grid over [t_min, t_max]."""
    model_config = ConfigDict(frozen=True)

    n: int = Field(default=2000, ge=2)
    noise_seed: int = Field(default=0, ge=0, lt=2**64)
    t_min: float = -1.0
    t_max: float = 1.0
    domain: SignalDomain = SignalDomain.SOURCE

    @model_validator(mode='after')
    def _check_range(self) -> 'SignalSpec':
        if not self.t_min < self.t_max:
            raise ValueError(f"t_min ({self.t_min}) must be below t_max ({self.t_max})")
        return self


class BlurSpec(BaseModel):
    """
    Synthetic deblurring domains.

    Both domains share the sharp label images; the target inputs are blurred
    at least as much as the source inputs.
    """
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(default=16, ge=4)
    num_images: int = Field(default=256, ge=1)
    blur_sigma_source: float = Field(default=1.0, gt=0.0)
    blur_sigma_target: float = Field(default=2.0, gt=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)

    @model_validator(mode='after')
    def _check_sigmas(self) -> 'BlurSpec':
        if self.blur_sigma_target < self.blur_sigma_source:
            raise ValueError(
                f"target blur ({self.blur_sigma_target}) must not be below "
                f"source blur ({self.blur_sigma_source})"
            )
        return self


class BenchMethod(str, Enum):
    PRETRAINED = 'pretrained'
    GD = 'gd'
    GD2 = 'gd2'
    LVA1 = 'lva1'
    LVA1_INPUT = 'lva1_input'
    LVA2 = 'lva2'
    LVA_OT = 'lva_ot'


class BenchResult(BaseModel):
    method: BenchMethod
    target_loss: float = Field(ge=0.0)
    runtime_ms: int = Field(ge=0)
    seed: int = Field(ge=0)
    budget: Optional[int] = None
    extra_metrics: dict[str, float] = Field(default_factory=dict)


class BenchmarkOutcome(BaseModel):
    """
    Everything one benchmark run produced.

    baselines holds reference losses that are not method rows (e.g. the
    pretrained net on each domain, the identical-domain control).
    """
    benchmark: str
    seed: int
    results: list[BenchResult]
    reports: list[TheoryReport] = Field(default_factory=list)
    baselines: dict[str, float] = Field(default_factory=dict)

    def result(self, method: BenchMethod, budget: Optional[int] = None) -> BenchResult:
        for entry in self.results:
            if entry.method is method and entry.budget == budget:
                return entry
        raise KeyError(f"no result for {method.value} at budget {budget}")


class SignalBenchSettings(BaseModel):
    """Scale of the 1D sine benchmark; the defaults are the full-size run."""
    model_config = ConfigDict(frozen=True)

    samples: int = Field(default=2000, ge=2)
    test_samples: int = Field(default=500, ge=1)
    hidden_sizes: tuple[int, ...] = (64, 64, 64)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    pretrain_epochs: int = Field(default=8000, ge=1)
    gd_epochs: int = Field(default=12000, ge=1)
    two_layer_sweeps: int = Field(default=3, ge=0)
    sinkhorn_reg: float = Field(default=0.05, gt=0.0)
    sinkhorn_max_iter: int = Field(default=300, ge=1)


class DeblurBenchSettings(BaseModel):
    """Scale of the synthetic deblurring benchmark."""
    model_config = ConfigDict(frozen=True)

    image_size: int = Field(default=16, ge=4)
    source_images: int = Field(default=256, ge=1)
    test_images: int = Field(default=64, ge=1)
    budgets: tuple[int, ...] = (16, 64, 256)
    kernel_sizes: tuple[int, ...] = (9, 5, 5)
    channels: tuple[int, ...] = (1, 8, 8, 1)
    blur_sigma_source: float = Field(default=1.0, gt=0.0)
    blur_sigma_target: float = Field(default=2.0, gt=0.0)
    learning_rate: float = Field(default=1e-3, gt=0.0)
    pretrain_epochs: int = Field(default=200, ge=1)
    pretrain_batch_size: int = Field(default=16, ge=1)
    gd_epochs: int = Field(default=300, ge=1)

    @model_validator(mode='after')
    def _check_budgets(self) -> 'DeblurBenchSettings':
        if not self.budgets or min(self.budgets) < 1:
            raise ValueError(f"budgets must be positive, got {self.budgets}")
        return self
