"""
Convolution as a fully-connected product, CNN training and last-kernel LVA.

Conventions:
    - images are channel-major (C, H, W); batches are (N, C, H, W)
    - kernel weights are indexed [i, j, alpha, beta] = (row, col, in, out)
    - unfolded patch rows follow output positions (k, l) row-major, and
      columns follow (i, j, alpha), so kernel_as_matrix(kernel) multiplies
      them directly
"""

import logging
from typing import Optional, Sequence

import numpy as np

from adaptation.models import ResidueVariant
from datasets.models import Alignment, ImageTensor, PairedDataset, PatchMatrix, as_image_batch
from exceptions import ArgumentError, ShapeError, TrainingError, UnsupportedModelError
from networks.models import Activation, Cnn, ConvKernel, ConvLayer
from services.linalg import least_squares
from services.train import TrainConfig, TrainReport, batch_order, make_optimizer


logger = logging.getLogger(__name__)


# Constants
LOG_EVERY_EPOCHS = 50


def _output_size(height: int, width: int, kernel_h: int, kernel_w: int, stride: int, padding: int):
    if stride < 1 or padding < 0:
        raise ArgumentError(f"stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if height + 2 * padding < kernel_h or width + 2 * padding < kernel_w:
        raise ShapeError(
            f"kernel {kernel_h}x{kernel_w} is larger than padded image "
            f"{height + 2 * padding}x{width + 2 * padding}"
        )
    return (height + 2 * padding - kernel_h) // stride + 1, (width + 2 * padding - kernel_w) // stride + 1


def unfold(images: np.ndarray, kernel_h: int, kernel_w: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """
    im2col over a batch.

    Args:
        images: (N, C, H, W) batch

    Returns:
        (N * out_h * out_w, kernel_h * kernel_w * C) patch rows
    """
    count, channels, height, width = images.shape
    out_h, out_w = _output_size(height, width, kernel_h, kernel_w, stride, padding)
    padded = np.pad(images, [(0, 0), (0, 0), (padding, padding), (padding, padding)], 'constant')

    cols = np.zeros((count, channels, kernel_h, kernel_w, out_h, out_w))
    for i in range(kernel_h):
        i_max = i + stride * out_h
        for j in range(kernel_w):
            j_max = j + stride * out_w
            cols[:, :, i, j, :, :] = padded[:, :, i:i_max:stride, j:j_max:stride]

    # (N, C, kh, kw, oh, ow) -> (N, oh, ow, kh, kw, C)
    return cols.transpose(0, 4, 5, 2, 3, 1).reshape(count * out_h * out_w, -1)


def fold(cols: np.ndarray, input_shape: tuple, kernel_h: int, kernel_w: int,
         stride: int = 1, padding: int = 0) -> np.ndarray:
    """
    col2im: scatter-add patch rows back onto (N, C, H, W) images.

    Overlapping receptive fields accumulate, which makes this the adjoint of
    unfold (used to backpropagate through a convolution).
    """
    count, channels, height, width = input_shape
    out_h, out_w = _output_size(height, width, kernel_h, kernel_w, stride, padding)
    cols = cols.reshape(count, out_h, out_w, kernel_h, kernel_w, channels).transpose(0, 5, 3, 4, 1, 2)

    image = np.zeros((count, channels, height + 2 * padding + stride - 1, width + 2 * padding + stride - 1))
    for i in range(kernel_h):
        i_max = i + stride * out_h
        for j in range(kernel_w):
            j_max = j + stride * out_w
            image[:, :, i:i_max:stride, j:j_max:stride] += cols[:, :, i, j, :, :]
    return image[:, :, padding:padding + height, padding:padding + width]


def im2col(image: ImageTensor, kernel_h: int, kernel_w: int, stride: int = 1, padding: int = 0) -> PatchMatrix:
    """Receptive fields of one image, one row per output position (k, l)."""
    out_h, out_w = _output_size(image.height, image.width, kernel_h, kernel_w, stride, padding)
    matrix = unfold(image.data[None], kernel_h, kernel_w, stride, padding)
    k, l = np.divmod(np.arange(out_h * out_w), out_w)
    return PatchMatrix(matrix, np.stack([k, l], axis=1), out_h, out_w)


def kernel_as_matrix(kernel: ConvKernel) -> np.ndarray:
    """(out_channels, kernel_h * kernel_w * in_channels) matrix with (i, j, alpha) columns."""
    weights = kernel.weights
    return weights.reshape(-1, weights.shape[3]).T


def matrix_as_kernel(
    matrix: np.ndarray,
    kernel_h: int,
    kernel_w: int,
    bias: Optional[np.ndarray] = None,
    stride: int = 1,
    padding: int = 0,
) -> ConvKernel:
    """Inverse of kernel_as_matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    out_channels, columns = matrix.shape
    if columns % (kernel_h * kernel_w):
        raise ShapeError(f"{columns} columns do not split into {kernel_h}x{kernel_w} patches")
    in_channels = columns // (kernel_h * kernel_w)
    weights = matrix.T.reshape(kernel_h, kernel_w, in_channels, out_channels)
    bias = np.zeros(out_channels) if bias is None else bias
    return ConvKernel(weights, bias, stride, padding)


def conv_forward(kernel: ConvKernel, image: ImageTensor) -> ImageTensor:
    """Direct cross-correlation with zero padding and stride, plus bias."""
    if image.channels != kernel.in_channels:
        raise ShapeError(
            f"image has {image.channels} channels, kernel expects {kernel.in_channels}"
        )
    stride, padding = kernel.stride, kernel.padding
    out_h, out_w = kernel.output_size(image.height, image.width)
    padded = np.pad(image.data, [(0, 0), (padding, padding), (padding, padding)], 'constant')

    out = np.repeat(kernel.bias[:, None, None], out_h, axis=1).repeat(out_w, axis=2)
    for i in range(kernel.kernel_h):
        for j in range(kernel.kernel_w):
            window = padded[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
            out = out + np.einsum('chw,cb->bhw', window, kernel.weights[i, j])
    return ImageTensor(out)


def _linear_conv(kernel: ConvKernel, images: np.ndarray, with_bias: bool = True):
    """Batch convolution through unfold; returns (output, patch rows)."""
    count, _, height, width = images.shape
    out_h, out_w = kernel.output_size(height, width)
    cols = unfold(images, kernel.kernel_h, kernel.kernel_w, kernel.stride, kernel.padding)
    rows = cols @ kernel_as_matrix(kernel).T
    if with_bias:
        rows = rows + kernel.bias
    out = rows.reshape(count, out_h, out_w, kernel.out_channels).transpose(0, 3, 1, 2)
    return out, cols


def _check_batch(cnn: Cnn, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != cnn.in_channels:
        raise ShapeError(
            f"expected an (N, {cnn.in_channels}, H, W) image batch, got shape {images.shape}"
        )
    return images


def cnn_latent(cnn: Cnn, images: np.ndarray, upto: int) -> np.ndarray:
    """Feature maps after the first `upto` layers."""
    if not 0 <= upto <= cnn.depth:
        raise ArgumentError(f"upto={upto} is invalid for a {cnn.depth}-layer CNN")
    z = _check_batch(cnn, images)
    for layer in cnn.layers[:upto]:
        pre, _ = _linear_conv(layer.kernel, z)
        z = layer.activation.apply(pre)
    return z


def cnn_forward(cnn: Cnn, images: np.ndarray) -> np.ndarray:
    return cnn_latent(cnn, images, cnn.depth)


def cnn_jvp(cnn: Cnn, images: np.ndarray, tangents: np.ndarray) -> np.ndarray:
    """Forward-mode product of the CNN's input Jacobian with image tangents."""
    z = _check_batch(cnn, images)
    t = np.asarray(tangents, dtype=np.float64).reshape(z.shape)
    for layer in cnn.layers:
        pre, _ = _linear_conv(layer.kernel, z)
        t_pre, _ = _linear_conv(layer.kernel, t, with_bias=False)
        t = layer.activation.derivative(pre) * t_pre
        z = layer.activation.apply(pre)
    return t


def _split_rows(cnn: Cnn, data: PairedDataset, image_size: tuple[int, int]):
    height, width = image_size
    images = as_image_batch(data.inputs, cnn.in_channels, height, width)
    out_h, out_w = cnn.output_size(height, width)
    labels = as_image_batch(data.labels, cnn.out_channels, out_h, out_w)
    return images, labels


def cnn_mse_loss(cnn: Cnn, data: PairedDataset, image_size: tuple[int, int]) -> float:
    """Mean over images of the summed squared pixel error."""
    images, labels = _split_rows(cnn, data, image_size)
    residual = cnn_forward(cnn, images) - labels
    return float(np.mean(np.sum(residual * residual, axis=(1, 2, 3))))


def psnr(loss: float, pixels: int, peak: float = 1.0) -> float:
    """PSNR in dB of a per-image summed squared error over `pixels` values."""
    mse = loss / pixels
    if mse <= 0:
        return float('inf')
    return float(10.0 * np.log10(peak * peak / mse))


def init_cnn(
    kernel_sizes: Sequence[int],
    channels: Sequence[int],
    seed: int,
    hidden: Optional[Activation] = None,
) -> Cnn:
    """
    Seeded CNN with same-padded square kernels.

    Args:
        kernel_sizes: Odd kernel size per layer, e.g. (9, 5, 5)
        channels: Channel counts including input and output, e.g. (1, 8, 8, 1)
        seed: PRNG seed
        hidden: Activation of every layer but the last (ReLU by default)
    """
    if len(channels) != len(kernel_sizes) + 1 or not kernel_sizes:
        raise ArgumentError(
            f"{len(kernel_sizes)} kernels need {len(kernel_sizes) + 1} channel counts, got {len(channels)}"
        )
    if any(size < 1 or size % 2 == 0 for size in kernel_sizes):
        raise ArgumentError(f"kernel sizes must be odd, got {list(kernel_sizes)}")
    hidden = hidden or Activation.relu()
    rng = np.random.Generator(np.random.Philox(seed))
    layers = []
    for k, size in enumerate(kernel_sizes):
        fan_in = size * size * channels[k]
        bound = 1.0 / np.sqrt(fan_in)
        weights = rng.uniform(-bound, bound, size=(size, size, channels[k], channels[k + 1]))
        bias = rng.uniform(-bound, bound, size=channels[k + 1])
        activation = Activation.identity() if k == len(kernel_sizes) - 1 else hidden
        layers.append(ConvLayer(ConvKernel(weights, bias, 1, size // 2), activation))
    return Cnn(tuple(layers))


def train_cnn(
    cnn: Cnn,
    data: PairedDataset,
    image_size: tuple[int, int],
    cfg: TrainConfig,
) -> tuple[Cnn, TrainReport]:
    """
    Gradient-descent training of a CNN on flattened image pairs.

    cfg.trainable_layers (0-based, empty = all) must be a suffix; the frozen
    prefix feature maps are computed once.
    """
    trainable = sorted(cfg.trainable_layers) or list(range(cnn.depth))
    start = trainable[0]
    if start < 0 or trainable != list(range(start, cnn.depth)):
        raise ArgumentError(f"trainable layers {trainable} must be a suffix of 0..{cnn.depth - 1}")

    images, labels = _split_rows(cnn, data, image_size)
    prefix = cnn_latent(cnn, images, start)
    suffix = list(cnn.layers[start:])
    params = []
    for layer in suffix:
        params.extend([np.array(kernel_as_matrix(layer.kernel)), np.array(layer.kernel.bias)])
    optimizer = make_optimizer(cfg, params)

    history = []
    last_finite = None
    for epoch in range(cfg.epochs):
        total = 0.0
        for batch in batch_order(cfg.seed, epoch, data.size, cfg.batch_size):
            z = prefix[batch]
            pres, shapes, cols_cache = [], [], []
            for k, layer in enumerate(suffix):
                kernel = layer.kernel
                shapes.append(z.shape)
                count, _, height, width = z.shape
                out_h, out_w = kernel.output_size(height, width)
                cols = unfold(z, kernel.kernel_h, kernel.kernel_w, kernel.stride, kernel.padding)
                rows = cols @ params[2 * k].T + params[2 * k + 1]
                pre = rows.reshape(count, out_h, out_w, kernel.out_channels).transpose(0, 3, 1, 2)
                z = layer.activation.apply(pre)
                pres.append(pre)
                cols_cache.append(cols)

            residual = z - labels[batch]
            batch_loss = float(np.sum(residual * residual))
            if not np.isfinite(batch_loss):
                raise TrainingError("CNN training diverged", epoch - 1, last_finite)
            total += batch_loss

            grads = [None] * (2 * len(suffix))
            delta = 2.0 * residual / len(batch)
            for k in range(len(suffix) - 1, -1, -1):
                kernel = suffix[k].kernel
                delta = delta * suffix[k].activation.derivative(pres[k])
                delta_rows = delta.transpose(0, 2, 3, 1).reshape(-1, kernel.out_channels)
                grads[2 * k] = delta_rows.T @ cols_cache[k]
                grads[2 * k + 1] = delta_rows.sum(axis=0)
                if k > 0:
                    delta = fold(delta_rows @ params[2 * k], shapes[k], kernel.kernel_h,
                                 kernel.kernel_w, kernel.stride, kernel.padding)
            optimizer.step(params, grads)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingError("CNN training diverged", epoch - 1, last_finite)

        epoch_loss = total / data.size
        history.append(epoch_loss)
        last_finite = epoch_loss
        if (epoch + 1) % LOG_EVERY_EPOCHS == 0:
            logger.debug(f"epoch {epoch + 1}/{cfg.epochs}: loss {epoch_loss:.6e}")

    trained = cnn
    for k, layer in enumerate(suffix):
        kernel = layer.kernel
        updated = matrix_as_kernel(params[2 * k], kernel.kernel_h, kernel.kernel_w,
                                   params[2 * k + 1], kernel.stride, kernel.padding)
        trained = trained.replace_layer(start + k, ConvLayer(updated, layer.activation))

    final_loss = cnn_mse_loss(trained, data, image_size)
    if not np.isfinite(final_loss):
        raise TrainingError("CNN training diverged", cfg.epochs - 1, last_finite)
    logger.info(
        f"Trained CNN layers {start}..{cnn.depth - 1} for {cfg.epochs} epochs on "
        f"'{data.name}': final loss {final_loss:.6e}"
    )
    return trained, TrainReport(
        loss_history=history,
        final_loss=final_loss,
        epsilon_trained=float(np.sqrt(data.size * final_loss)),
        samples=data.size,
    )


def _require_affine_last_layer(cnn: Cnn) -> None:
    if not cnn.layers[-1].activation.is_identity:
        raise UnsupportedModelError(
            f"last CNN layer activation is {cnn.layers[-1].activation.kind.value}; "
            f"layer variation needs an affine (identity) last layer"
        )


def _positions_as_rows(maps: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N * H * W, C), rows ordered by image then (k, l)."""
    return maps.transpose(0, 2, 3, 1).reshape(-1, maps.shape[1])


def _solve_last_kernel(kernel: ConvKernel, features: np.ndarray, targets: np.ndarray,
                       ridge: float, bias_column: bool):
    cols = unfold(features, kernel.kernel_h, kernel.kernel_w, kernel.stride, kernel.padding)
    design = np.hstack([cols, np.ones((cols.shape[0], 1))]) if bias_column else cols
    solution = least_squares(design, _positions_as_rows(targets), ridge)
    coefficients = solution.coefficients
    columns = cols.shape[1]
    bias = coefficients[columns] if bias_column else np.zeros(kernel.out_channels)
    solved = matrix_as_kernel(coefficients[:columns].T, kernel.kernel_h, kernel.kernel_w,
                              bias, kernel.stride, kernel.padding)
    return solved, solution


def refit_last_kernel(cnn: Cnn, data: PairedDataset, image_size: tuple[int, int],
                      ridge: float = 0.0) -> Cnn:
    """Replace the last kernel by the exact least-squares fit on `data`."""
    _require_affine_last_layer(cnn)
    images, labels = _split_rows(cnn, data, image_size)
    features = cnn_latent(cnn, images, cnn.depth - 1)
    last = cnn.layers[-1]
    kernel, _ = _solve_last_kernel(last.kernel, features, labels, ridge, bias_column=True)
    return cnn.replace_layer(cnn.depth - 1, ConvLayer(kernel, last.activation))


def lva_conv_last_layer(
    cnn: Cnn,
    alignment: Alignment,
    source: PairedDataset,
    target: PairedDataset,
    image_size: tuple[int, int],
    ridge: float = 0.0,
    variant: ResidueVariant = ResidueVariant.LATENT,
    bias_column: bool = True,
) -> tuple[Cnn, ConvKernel]:
    """
    Closed-form correction of the last convolution kernel.

    Every output position of every target image contributes one regression
    row: its receptive field in the penultimate feature map (design) and
    its residue (target). The shared kernel correction is solved once.

    Args:
        cnn: Pretrained CNN with an identity last activation
        alignment: Target-to-source image matching
        source: Source image pairs as flattened channel-major rows
        target: Target image pairs, same layout
        image_size: (height, width) of the input images
        ridge: Tikhonov weight
        variant: Jacobian used in the residue
        bias_column: Solve the bias correction too

    Returns:
        (adapted CNN, kernel correction added to the last layer)
    """
    _require_affine_last_layer(cnn)
    variant = ResidueVariant(variant)
    if alignment.size != target.size:
        raise ShapeError(
            f"alignment covers {alignment.size} samples but the target set has {target.size}"
        )
    source_images, source_labels = _split_rows(cnn, source, image_size)
    target_images, _ = _split_rows(cnn, target, image_size)
    index = alignment.source_index
    aligned_images = source_images[index]
    out_h, out_w = cnn.output_size(*image_size)
    label_shift = as_image_batch(alignment.delta_y, cnn.out_channels, out_h, out_w)

    depth = cnn.depth
    last = cnn.layers[-1].kernel
    aligned_features = cnn_latent(cnn, aligned_images, depth - 1)
    target_features = cnn_latent(cnn, target_images, depth - 1)
    pretrain_error = source_labels[index] - cnn_forward(cnn, aligned_images)
    if variant is ResidueVariant.LATENT:
        correction, _ = _linear_conv(last, target_features - aligned_features, with_bias=False)
    else:
        shift = as_image_batch(alignment.delta_x, cnn.in_channels, *image_size)
        correction = cnn_jvp(cnn, aligned_images, shift)
    residue = label_shift - correction + pretrain_error

    delta, solution = _solve_last_kernel(last, target_features, residue, ridge, bias_column)
    updated = ConvKernel(last.weights + delta.weights, last.bias + delta.bias, last.stride, last.padding)
    adapted = cnn.replace_layer(depth - 1, ConvLayer(updated, cnn.layers[-1].activation))
    logger.info(
        f"LVA last kernel ({variant.value}) on {target.size} images: "
        f"|dC|_F={np.linalg.norm(delta.weights):.4e}, rank {solution.rank}"
    )
    return adapted, delta
