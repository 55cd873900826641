"""Paired datasets, alignments between them, and image containers."""

from dataclasses import dataclass

import numpy as np

from exceptions import ArgumentError, DataError, ShapeError


def _frozen(values, ndim: int, name: str, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {arr.shape}")
    if arr.dtype.kind == 'f' and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PairedDataset:
    """Samples (x_i, y_i) stored as an (N, d_x) input and (N, d_y) label matrix."""
    inputs: np.ndarray
    labels: np.ndarray
    name: str = ''

    def __post_init__(self) -> None:
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if inputs.ndim == 1:
            inputs = inputs[:, None]
        if labels.ndim == 1:
            labels = labels[:, None]
        inputs = _frozen(inputs, 2, 'inputs')
        labels = _frozen(labels, 2, 'labels')
        if inputs.shape[0] != labels.shape[0]:
            raise ShapeError(
                f"{inputs.shape[0]} inputs but {labels.shape[0]} labels in dataset '{self.name}'"
            )
        if inputs.shape[0] < 1:
            raise ArgumentError(f"dataset '{self.name}' is empty")
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'labels', labels)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def dx(self) -> int:
        return self.inputs.shape[1]

    @property
    def dy(self) -> int:
        return self.labels.shape[1]

    def __len__(self) -> int:
        return self.size

    def subset(self, indices, name: str = '') -> 'PairedDataset':
        idx = np.asarray(indices, dtype=np.intp)
        return PairedDataset(self.inputs[idx], self.labels[idx], name or self.name)

    def head(self, count: int, name: str = '') -> 'PairedDataset':
        return self.subset(np.arange(min(count, self.size)), name)

    def scaled_labels(self, factor: float) -> 'PairedDataset':
        return PairedDataset(self.inputs, self.labels * factor, self.name)


@dataclass(frozen=True)
class JointMetric:
    """Euclidean norm on the concatenation (x, label_weight * y)."""
    label_weight: float = 1.0

    def __post_init__(self) -> None:
        if not self.label_weight > 0:
            raise ArgumentError(f"label weight must be positive, got {self.label_weight}")

    def embed(self, data: PairedDataset) -> np.ndarray:
        return np.hstack([data.inputs, self.label_weight * data.labels])


@dataclass(frozen=True, eq=False)
class Alignment:
    """
    Target-to-source sample matching.

    source_index[i] is the source sample j_i matched to target sample i;
    delta_x / delta_y hold the pre-subtracted pairs x~_i - x_{j_i} and
    y~_i - y_{j_i}.
    """
    source_index: np.ndarray
    pair_distances: np.ndarray
    epsilon_data: float
    delta_x: np.ndarray
    delta_y: np.ndarray
    method: str = 'nearest'
    converged: bool = True

    def __post_init__(self) -> None:
        index = _frozen(self.source_index, 1, 'source_index', dtype=np.intp)
        distances = _frozen(self.pair_distances, 1, 'pair_distances')
        delta_x = _frozen(self.delta_x, 2, 'delta_x')
        delta_y = _frozen(self.delta_y, 2, 'delta_y')
        count = index.shape[0]
        if not (distances.shape[0] == delta_x.shape[0] == delta_y.shape[0] == count):
            raise ShapeError("alignment fields disagree on the number of target samples")
        if np.any(distances < 0):
            raise DataError("pair distances must be nonnegative")
        object.__setattr__(self, 'source_index', index)
        object.__setattr__(self, 'pair_distances', distances)
        object.__setattr__(self, 'delta_x', delta_x)
        object.__setattr__(self, 'delta_y', delta_y)
        object.__setattr__(self, 'epsilon_data', float(self.epsilon_data))

    @property
    def size(self) -> int:
        return self.source_index.shape[0]


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """Single image with channel-major data of shape (channels, height, width)."""
    data: np.ndarray

    def __post_init__(self) -> None:
        data = _frozen(self.data, 3, 'image data')
        object.__setattr__(self, 'data', data)

    @classmethod
    def from_flat(cls, values, height: int, width: int, channels: int = 1) -> 'ImageTensor':
        flat = np.asarray(values, dtype=np.float64).ravel()
        if flat.size != height * width * channels:
            raise ShapeError(
                f"{flat.size} values cannot form a {channels}x{height}x{width} image"
            )
        return cls(flat.reshape(channels, height, width))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def flat(self) -> np.ndarray:
        return self.data.ravel()


@dataclass(frozen=True, eq=False)
class PatchMatrix:
    """
    Unfolded receptive fields, one row per output position.

    Rows follow output positions (k, l) in row-major order; columns follow
    the flattening order (i, j, alpha) of kernel row, kernel column, channel.
    """
    matrix: np.ndarray
    positions: np.ndarray
    out_height: int
    out_width: int

    @property
    def position_index(self) -> dict[int, tuple[int, int]]:
        return {row: (int(k), int(l)) for row, (k, l) in enumerate(self.positions)}


def as_image_batch(rows: np.ndarray, channels: int, height: int, width: int) -> np.ndarray:
    """Reshape (N, C*H*W) channel-major rows into an (N, C, H, W) batch."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != channels * height * width:
        raise ShapeError(
            f"rows of shape {rows.shape} do not hold {channels}x{height}x{width} images"
        )
    return rows.reshape(rows.shape[0], channels, height, width)
