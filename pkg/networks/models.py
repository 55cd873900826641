"""Feedforward and convolutional network types."""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field

from exceptions import ArgumentError, DataError, ShapeError


DEFAULT_LEAKY_SLOPE = 0.01


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    """Copy into a read-only finite float64 array of the given rank."""
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


class ActivationKind(str, Enum):
    IDENTITY = 'identity'
    RELU = 'relu'
    LEAKY_RELU = 'leaky_relu'
    TANH = 'tanh'


@dataclass(frozen=True)
class Activation:
    """Elementwise activation; LeakyReLU carries its negative slope."""
    kind: ActivationKind = ActivationKind.IDENTITY
    slope: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, 'kind', ActivationKind(self.kind))
        if self.kind is ActivationKind.LEAKY_RELU:
            slope = DEFAULT_LEAKY_SLOPE if self.slope is None else float(self.slope)
            if not 0.0 < slope < 1.0:
                raise ArgumentError(f"LeakyReLU slope must lie in (0, 1), got {slope}")
            object.__setattr__(self, 'slope', slope)
        elif self.slope is not None:
            raise ArgumentError(f"{self.kind.value} takes no slope")

    @classmethod
    def identity(cls) -> 'Activation':
        return cls(ActivationKind.IDENTITY)

    @classmethod
    def relu(cls) -> 'Activation':
        return cls(ActivationKind.RELU)

    @classmethod
    def leaky_relu(cls, slope: float = DEFAULT_LEAKY_SLOPE) -> 'Activation':
        return cls(ActivationKind.LEAKY_RELU, slope)

    @classmethod
    def tanh(cls) -> 'Activation':
        return cls(ActivationKind.TANH)

    @property
    def is_identity(self) -> bool:
        return self.kind is ActivationKind.IDENTITY

    @property
    def lipschitz(self) -> float:
        if self.kind is ActivationKind.LEAKY_RELU:
            return max(1.0, self.slope)
        return 1.0

    def apply(self, pre: np.ndarray) -> np.ndarray:
        if self.kind is ActivationKind.RELU:
            return np.maximum(pre, 0.0)
        if self.kind is ActivationKind.LEAKY_RELU:
            return np.where(pre > 0, pre, self.slope * pre)
        if self.kind is ActivationKind.TANH:
            return np.tanh(pre)
        return pre

    def derivative(self, pre: np.ndarray) -> np.ndarray:
        """Elementwise derivative; the ReLU kink at exactly 0 gets 0."""
        if self.kind is ActivationKind.RELU:
            return (pre > 0).astype(np.float64)
        if self.kind is ActivationKind.LEAKY_RELU:
            return np.where(pre > 0, 1.0, self.slope)
        if self.kind is ActivationKind.TANH:
            t = np.tanh(pre)
            return 1.0 - t * t
        return np.ones_like(pre)


@dataclass(frozen=True, eq=False)
class Layer:
    """Affine map W z + b followed by an activation."""
    weight: np.ndarray
    bias: np.ndarray
    activation: Activation = field(default_factory=Activation.identity)

    def __post_init__(self) -> None:
        weight = _frozen_array(self.weight, 2, 'weight')
        bias = _frozen_array(self.bias, 1, 'bias')
        if bias.shape[0] != weight.shape[0]:
            raise ShapeError(
                f"bias length {bias.shape[0]} does not match weight rows {weight.shape[0]}"
            )
        object.__setattr__(self, 'weight', weight)
        object.__setattr__(self, 'bias', bias)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def pre_activation(self, z: np.ndarray) -> np.ndarray:
        return z @ self.weight.T + self.bias

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.activation.apply(self.pre_activation(z))


@dataclass(frozen=True, eq=False)
class Mlp:
    """Composition f = f_n o ... o f_1 of affine layers with activations."""
    layers: tuple

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ArgumentError("a network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].in_dim != layers[k - 1].out_dim:
                raise ShapeError(
                    f"layer {k} expects input {layers[k].in_dim} but layer {k - 1} "
                    f"produces {layers[k - 1].out_dim}"
                )
        object.__setattr__(self, 'layers', layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> list[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def replace_layer(self, index: int, layer: Layer) -> 'Mlp':
        """Return a copy with layer `index` swapped out."""
        layers = list(self.layers)
        layers[index] = layer
        return Mlp(tuple(layers))

    def same_structure(self, other: 'Mlp') -> bool:
        """Same depth, layer shapes and activations."""
        if self.depth != other.depth:
            return False
        return all(
            a.weight.shape == b.weight.shape and a.activation == b.activation
            for a, b in zip(self.layers, other.layers)
        )


class LipschitzProfile(BaseModel):
    """Per-layer Lipschitz bounds and their running products C_{F_k}."""
    per_layer: list[float] = Field(min_length=1)
    prefix_products: list[float] = Field(min_length=1)

    def prefix(self, k: int) -> float:
        """Bound for the first k layers (k = 0 is the identity map)."""
        return 1.0 if k == 0 else self.prefix_products[k - 1]

    def segment(self, start: int, stop: int) -> float:
        """Bound for layers start..stop-1 (0-based, half-open)."""
        return float(np.prod(self.per_layer[start:stop])) if stop > start else 1.0


@dataclass(frozen=True, eq=False)
class ConvKernel:
    """
    Convolution kernel C[i, j, alpha, beta] with bias over beta.

    weights has shape (kernel_h, kernel_w, in_channels, out_channels);
    padding is symmetric zero padding.
    """
    weights: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        weights = _frozen_array(self.weights, 4, 'kernel weights')
        bias = _frozen_array(self.bias, 1, 'kernel bias')
        if min(weights.shape) < 1:
            raise ShapeError(f"kernel dimensions must be >= 1, got {weights.shape}")
        if bias.shape[0] != weights.shape[3]:
            raise ShapeError(
                f"bias length {bias.shape[0]} does not match out channels {weights.shape[3]}"
            )
        if self.stride < 1 or self.padding < 0:
            raise ArgumentError(
                f"stride must be >= 1 and padding >= 0, got {self.stride}, {self.padding}"
            )
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'bias', bias)

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[2]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[3]

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        out_h = (height + 2 * self.padding - self.kernel_h) // self.stride + 1
        out_w = (width + 2 * self.padding - self.kernel_w) // self.stride + 1
        if height + 2 * self.padding < self.kernel_h or width + 2 * self.padding < self.kernel_w:
            raise ShapeError(
                f"kernel {self.kernel_h}x{self.kernel_w} is larger than padded "
                f"image {height + 2 * self.padding}x{width + 2 * self.padding}"
            )
        return out_h, out_w


@dataclass(frozen=True, eq=False)
class ConvLayer:
    kernel: ConvKernel
    activation: Activation = field(default_factory=Activation.identity)


@dataclass(frozen=True, eq=False)
class Cnn:
    """Stack of convolution layers applied to (C, H, W) images."""
    layers: tuple

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        if not layers:
            raise ArgumentError("a network needs at least one layer")
        for k in range(1, len(layers)):
            if layers[k].kernel.in_channels != layers[k - 1].kernel.out_channels:
                raise ShapeError(
                    f"conv layer {k} expects {layers[k].kernel.in_channels} channels but "
                    f"layer {k - 1} produces {layers[k - 1].kernel.out_channels}"
                )
        object.__setattr__(self, 'layers', layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_channels(self) -> int:
        return self.layers[0].kernel.in_channels

    @property
    def out_channels(self) -> int:
        return self.layers[-1].kernel.out_channels

    def output_size(self, height: int, width: int, upto: Optional[int] = None) -> tuple[int, int]:
        upto = self.depth if upto is None else upto
        for layer in self.layers[:upto]:
            height, width = layer.kernel.output_size(height, width)
        return height, width

    def replace_layer(self, index: int, layer: ConvLayer) -> 'Cnn':
        layers = list(self.layers)
        layers[index] = layer
        return Cnn(tuple(layers))
