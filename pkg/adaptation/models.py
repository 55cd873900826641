"""Types produced by layer variational adaptation and its bound checks."""

from dataclasses import dataclass
from enum import Enum
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from exceptions import ShapeError
from networks.models import Layer, Mlp


# Slack of the bound comparison lhs <= rhs
BOUND_SLACK = 1e-9


class ResidueVariant(str, Enum):
    """
    Which Jacobian carries the aligned shift into the residue.

    LATENT uses J(f_n) at the source latent applied to the latent shift;
    INPUT uses the full-network Jacobian J(f) applied to the input shift.
    """
    LATENT = 'latent'
    INPUT = 'input'


def _readonly(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TransferalResidue:
    """
    Per-target-sample regression targets q with their decomposition.

    q = label_shift - jacobian_correction + pretrain_error, row by row.
    """
    q: np.ndarray
    label_shift: np.ndarray
    jacobian_correction: np.ndarray
    pretrain_error: np.ndarray
    variant: ResidueVariant

    def __post_init__(self) -> None:
        for name in ('q', 'label_shift', 'jacobian_correction', 'pretrain_error'):
            object.__setattr__(self, name, _readonly(getattr(self, name), name))
        shapes = {self.q.shape, self.label_shift.shape,
                  self.jacobian_correction.shape, self.pretrain_error.shape}
        if len(shapes) != 1:
            raise ShapeError(f"residue parts disagree in shape: {sorted(shapes)}")
        object.__setattr__(self, 'variant', ResidueVariant(self.variant))

    @property
    def size(self) -> int:
        return self.q.shape[0]

    @property
    def is_zero(self) -> bool:
        return not np.any(self.q)


@dataclass(frozen=True, eq=False)
class LayerDelta:
    """
    Additive correction (d_weight, d_bias) to layer `target_layer` (0-based).

    rank, condition_estimate and rank_deficient describe the least-squares
    system the correction was solved from.
    """
    d_weight: np.ndarray
    d_bias: np.ndarray
    target_layer: int
    rank: Optional[int] = None
    condition_estimate: Optional[float] = None
    rank_deficient: bool = False

    def __post_init__(self) -> None:
        weight = _readonly(self.d_weight, 'd_weight')
        bias = np.array(self.d_bias, dtype=np.float64, copy=True)
        if bias.ndim != 1 or bias.shape[0] != weight.shape[0]:
            raise ShapeError(
                f"d_bias of shape {bias.shape} does not match d_weight {weight.shape}"
            )
        bias.setflags(write=False)
        object.__setattr__(self, 'd_weight', weight)
        object.__setattr__(self, 'd_bias', bias)

    @property
    def is_zero(self) -> bool:
        return not (np.any(self.d_weight) or np.any(self.d_bias))

    def check_matches(self, net: Mlp) -> None:
        if not 0 <= self.target_layer < net.depth:
            raise ShapeError(f"layer {self.target_layer} does not exist in a {net.depth}-layer net")
        layer = net.layers[self.target_layer]
        if layer.weight.shape != self.d_weight.shape:
            raise ShapeError(
                f"delta of shape {self.d_weight.shape} does not match layer "
                f"{self.target_layer} weight {layer.weight.shape}"
            )

    def apply_to(self, net: Mlp) -> Mlp:
        """Return net with this correction added to its target layer."""
        self.check_matches(net)
        layer = net.layers[self.target_layer]
        updated = Layer(layer.weight + self.d_weight, layer.bias + self.d_bias, layer.activation)
        return net.replace_layer(self.target_layer, updated)


class TheoryReport(BaseModel):
    """
    Numeric check of a loss bound.

    For kind='transfer':
        rhs = 3 * (epsilon_pretrained^2 + epsilon_data^2 + v1_bound), where
        v1_bound = 2 * (c_delta^2 c_prefix^2 c_xtilde^2 + c_suffix^2 c_prefix^2 epsilon_data^2)
        and epsilon_pretrained is the summed (not averaged) source error.
    For kind='generalization':
        epsilon_data is the test-to-adapt deviation, c_suffix the Lipschitz
        bound of the whole network, and
        rhs = 3 * (c_suffix^2 + 1) * epsilon_data^2 + 3 * (n_adapt / n_test) * adapt_loss.

    In both cases lhs is the observed mean loss and holds = lhs <= rhs + 1e-9.
    JSON output uses the field aliases.
    """
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    kind: Literal['transfer', 'generalization'] = 'transfer'
    epsilon_pretrained: Optional[float] = Field(default=None, ge=0.0)
    epsilon_data: float = Field(ge=0.0)
    c_prefix: Optional[float] = Field(default=None, ge=0.0, alias='C_Fprefix')
    c_suffix: float = Field(ge=0.0, alias='C_F')
    c_delta: Optional[float] = Field(default=None, ge=0.0, alias='C_deltaF')
    c_xtilde: Optional[float] = Field(default=None, ge=0.0, alias='C_xtilde')
    v1_bound: Optional[float] = Field(default=None, ge=0.0)
    rhs_bound: float = Field(alias='rhs')
    observed_loss: float = Field(ge=0.0, alias='lhs')
    holds: bool
    cdelta_leq_edata: Optional[bool] = None
    prefix_shared: Optional[bool] = None
    v1_observed: Optional[float] = None
    layers_adapted: Optional[int] = None
    adapt_loss: Optional[float] = None
    n_adapt: Optional[int] = None
    n_test: Optional[int] = None

    @model_validator(mode='after')
    def _check_holds(self) -> 'TheoryReport':
        if self.holds != (self.observed_loss <= self.rhs_bound + BOUND_SLACK):
            raise ValueError("holds must equal lhs <= rhs + slack")
        return self

    def to_json_dict(self) -> dict:
        return self.model_dump(mode='json', by_alias=True, exclude_none=True)
