"""
JSON document schema for model files.

MLP files look like {"kind": "mlp", "layers": [{"weight": [[...]], "bias":
[...], "activation": {"kind": "relu"}}]}; "kind" is optional and defaults
to "mlp". CNN files use "kind": "cnn" and per-layer "kernel" (nested
kh x kw x in x out lists), "bias", "stride" and "padding".
"""

from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from networks.models import ActivationKind


class ActivationDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: ActivationKind
    slope: Optional[float] = None


class LayerDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')

    weight: list[list[float]] = Field(min_length=1)
    bias: list[float] = Field(min_length=1)
    activation: ActivationDocument = Field(
        default_factory=lambda: ActivationDocument(kind=ActivationKind.IDENTITY)
    )


class MlpDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: Literal['mlp'] = 'mlp'
    layers: list[LayerDocument] = Field(min_length=1)


class ConvLayerDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kernel: list[list[list[list[float]]]] = Field(min_length=1)
    bias: list[float] = Field(min_length=1)
    stride: int = Field(default=1, ge=1)
    padding: int = Field(default=0, ge=0)
    activation: ActivationDocument = Field(
        default_factory=lambda: ActivationDocument(kind=ActivationKind.IDENTITY)
    )


class CnnDocument(BaseModel):
    model_config = ConfigDict(extra='forbid')

    kind: Literal['cnn']
    layers: list[ConvLayerDocument] = Field(min_length=1)
