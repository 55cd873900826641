import numpy as np
import pytest

from adaptation.models import ResidueVariant
from datasets.models import ImageTensor, PairedDataset
from exceptions import ArgumentError, ShapeError, TrainingError, UnsupportedModelError
from networks.models import Activation, Cnn, ConvKernel, ConvLayer, Layer, Mlp
from services.align import align_nearest
from services.convadapt import (
    cnn_forward,
    cnn_jvp,
    cnn_latent,
    cnn_mse_loss,
    conv_forward,
    fold,
    im2col,
    init_cnn,
    kernel_as_matrix,
    lva_conv_last_layer,
    matrix_as_kernel,
    psnr,
    refit_last_kernel,
    train_cnn,
    unfold,
)
from services.lva import lva_one_layer
from services.train import TrainConfig
from tests.conftest import philox


def _loop_conv(kernel: ConvKernel, image: np.ndarray) -> np.ndarray:
    s, p = kernel.stride, kernel.padding
    padded = np.pad(image, [(0, 0), (p, p), (p, p)])
    out_h, out_w = kernel.output_size(image.shape[1], image.shape[2])
    out = np.zeros((kernel.out_channels, out_h, out_w))
    for b in range(kernel.out_channels):
        for k in range(out_h):
            for l in range(out_w):
                total = kernel.bias[b]
                for i in range(kernel.kernel_h):
                    for j in range(kernel.kernel_w):
                        for a in range(kernel.in_channels):
                            total += padded[a, k * s + i, l * s + j] * kernel.weights[i, j, a, b]
                out[b, k, l] = total
    return out


def _random_kernel(rng, kh, kw, cin, cout, stride=1, padding=0) -> ConvKernel:
    return ConvKernel(rng.standard_normal((kh, kw, cin, cout)), rng.standard_normal(cout), stride, padding)


def _image_pairs(cnn: Cnn, seed: int, count: int, size: int, noise: float = 0.05) -> PairedDataset:
    rng = philox(seed)
    images = rng.uniform(0.0, 1.0, size=(count, cnn.in_channels, size, size))
    labels = cnn_forward(cnn, images) + noise * rng.standard_normal((count, cnn.out_channels, size, size))
    return PairedDataset(images.reshape(count, -1), labels.reshape(count, -1))


def test_identity_kernel_returns_image():
    image = ImageTensor(philox(0).standard_normal((3, 5, 4)))
    kernel = ConvKernel(np.eye(3).reshape(1, 1, 3, 3), np.zeros(3))
    np.testing.assert_array_equal(conv_forward(kernel, image).data, image.data)


def test_all_ones_kernel_on_ones_image():
    kernel = ConvKernel(np.ones((3, 3, 1, 1)), np.zeros(1), padding=1)
    out = conv_forward(kernel, ImageTensor(np.ones((1, 3, 3)))).data[0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_direct_convolution_matches_loops():
    rng = philox(1)
    kernel = _random_kernel(rng, 3, 2, 2, 3, stride=2, padding=1)
    image = rng.standard_normal((2, 6, 5))
    np.testing.assert_allclose(conv_forward(kernel, ImageTensor(image)).data, _loop_conv(kernel, image), atol=1e-12)


def test_im2col_row_and_column_order():
    image = ImageTensor(np.arange(18.0).reshape(2, 3, 3))
    patches = im2col(image, 2, 2)
    assert patches.matrix.shape == (4, 8)
    assert (patches.out_height, patches.out_width) == (2, 2)
    np.testing.assert_array_equal(patches.positions, [[0, 0], [0, 1], [1, 0], [1, 1]])
    # columns run over (i, j, channel): c0[0,0], c1[0,0], c0[0,1], c1[0,1], ...
    np.testing.assert_array_equal(patches.matrix[0], [0, 9, 1, 10, 3, 12, 4, 13])
    np.testing.assert_array_equal(patches.matrix[3], [4, 13, 5, 14, 7, 16, 8, 17])
    assert patches.position_index[2] == (1, 0)


def test_kernel_matrix_column_order():
    weights = np.arange(2 * 3 * 2 * 4, dtype=np.float64).reshape(2, 3, 2, 4)
    matrix = kernel_as_matrix(ConvKernel(weights, np.zeros(4)))
    assert matrix.shape == (4, 12)
    for i in range(2):
        for j in range(3):
            for a in range(2):
                for b in range(4):
                    assert matrix[b, (i * 3 + j) * 2 + a] == weights[i, j, a, b]


def test_kernel_matrix_round_trip():
    kernel = _random_kernel(philox(2), 3, 5, 2, 4, stride=2, padding=1)
    restored = matrix_as_kernel(kernel_as_matrix(kernel), 3, 5, kernel.bias, 2, 1)
    np.testing.assert_array_equal(restored.weights, kernel.weights)
    np.testing.assert_array_equal(restored.bias, kernel.bias)
    with pytest.raises(ShapeError):
        matrix_as_kernel(np.zeros((2, 7)), 2, 2)


@pytest.mark.parametrize("case", range(50))
def test_unfolded_product_equals_convolution(case):
    rng = philox(100 + case)
    kh, kw = (int(v) for v in rng.integers(1, 4, size=2))
    cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
    stride = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 3))
    height = int(rng.integers(kh, 8))
    width = int(rng.integers(kw, 8))
    kernel = _random_kernel(rng, kh, kw, cin, cout, stride, padding)
    image = rng.standard_normal((cin, height, width))

    direct = conv_forward(kernel, ImageTensor(image)).data
    patches = im2col(ImageTensor(image), kh, kw, stride, padding)
    product = patches.matrix @ kernel_as_matrix(kernel).T + kernel.bias
    np.testing.assert_allclose(
        product.reshape(patches.out_height, patches.out_width, cout).transpose(2, 0, 1), direct, atol=1e-12
    )
    np.testing.assert_allclose(direct, _loop_conv(kernel, image), atol=1e-12)


@pytest.mark.parametrize("stride, padding", [(1, 0), (1, 2), (2, 1), (3, 0)])
def test_fold_is_adjoint_of_unfold(stride, padding):
    rng = philox(stride * 10 + padding)
    shape = (2, 3, 7, 6)
    x = rng.standard_normal(shape)
    cols = unfold(x, 3, 2, stride, padding)
    y = rng.standard_normal(cols.shape)
    assert np.sum(cols * y) == pytest.approx(np.sum(x * fold(y, shape, 3, 2, stride, padding)), rel=1e-12)


def test_oversized_kernel_raises():
    with pytest.raises(ShapeError):
        im2col(ImageTensor(np.zeros((1, 2, 2))), 3, 3)
    with pytest.raises(ArgumentError):
        unfold(np.zeros((1, 1, 4, 4)), 2, 2, stride=0)


def _pointwise_pair(seed: int):
    """A 1x1-kernel CNN on 1x1 images and the equivalent MLP."""
    rng = philox(seed)
    first = _random_kernel(rng, 1, 1, 3, 5)
    last = _random_kernel(rng, 1, 1, 5, 2)
    cnn = Cnn((ConvLayer(first, Activation.tanh()), ConvLayer(last)))
    mlp = Mlp((
        Layer(kernel_as_matrix(first), first.bias, Activation.tanh()),
        Layer(kernel_as_matrix(last), last.bias, Activation.identity()),
    ))
    return cnn, mlp


@pytest.mark.parametrize("variant", list(ResidueVariant))
def test_pointwise_cnn_adaptation_matches_mlp(variant):
    cnn, mlp = _pointwise_pair(3)
    source = _image_pairs(cnn, 4, 30, 1)
    target = _image_pairs(cnn, 5, 20, 1, noise=0.2)
    alignment = align_nearest(source, target)

    adapted, delta = lva_conv_last_layer(cnn, alignment, source, target, (1, 1), variant=variant)
    _, mlp_delta = lva_one_layer(mlp, alignment, source, target, variant)
    np.testing.assert_allclose(kernel_as_matrix(delta), mlp_delta.d_weight, atol=1e-10)
    np.testing.assert_allclose(delta.bias, mlp_delta.d_bias, atol=1e-10)
    np.testing.assert_array_equal(adapted.layers[0].kernel.weights, cnn.layers[0].kernel.weights)


def test_exact_fit_leaves_kernel_unchanged():
    cnn = init_cnn((3, 3), (1, 2, 1), seed=6)
    images = philox(7).uniform(size=(4, 1, 6, 6))
    data = PairedDataset(images.reshape(4, -1), cnn_forward(cnn, images).reshape(4, -1))
    alignment = align_nearest(data, data)
    adapted, delta = lva_conv_last_layer(cnn, alignment, data, data, (6, 6))
    assert np.abs(delta.weights).max() < 1e-12
    assert np.abs(delta.bias).max() < 1e-12
    np.testing.assert_allclose(adapted.layers[-1].kernel.weights, cnn.layers[-1].kernel.weights, atol=1e-12)


def test_last_kernel_adaptation_reduces_target_loss():
    cnn = init_cnn((3, 3), (1, 4, 1), seed=8)
    source = _image_pairs(cnn, 9, 6, 6)
    target_cnn = cnn.replace_layer(1, ConvLayer(
        ConvKernel(1.5 * cnn.layers[1].kernel.weights, cnn.layers[1].kernel.bias + 0.1, 1, 1)
    ))
    target = _image_pairs(target_cnn, 10, 5, 6, noise=0.01)
    alignment = align_nearest(source, target)
    adapted, _ = lva_conv_last_layer(cnn, alignment, source, target, (6, 6))
    assert cnn_mse_loss(adapted, target, (6, 6)) < cnn_mse_loss(cnn, target, (6, 6))


def test_non_affine_last_cnn_layer_rejected():
    cnn = init_cnn((1,), (1, 1), seed=0)
    relu_cnn = Cnn((ConvLayer(cnn.layers[0].kernel, Activation.relu()),))
    data = _image_pairs(cnn, 1, 3, 2)
    with pytest.raises(UnsupportedModelError):
        lva_conv_last_layer(relu_cnn, align_nearest(data, data), data, data, (2, 2))
    with pytest.raises(UnsupportedModelError):
        refit_last_kernel(relu_cnn, data, (2, 2))


def test_cnn_jvp_matches_finite_differences():
    cnn = init_cnn((3, 3), (2, 3, 1), seed=11, hidden=Activation.tanh())
    rng = philox(12)
    image = rng.standard_normal((1, 2, 5, 5))
    tangent = rng.standard_normal((1, 2, 5, 5))
    h = 1e-6
    numeric = (cnn_forward(cnn, image + h * tangent) - cnn_forward(cnn, image - h * tangent)) / (2 * h)
    np.testing.assert_allclose(cnn_jvp(cnn, image, tangent), numeric, atol=1e-7)


def test_latent_depth_validation():
    cnn = init_cnn((3,), (1, 1), seed=0)
    with pytest.raises(ArgumentError):
        cnn_latent(cnn, np.zeros((1, 1, 4, 4)), 2)
    with pytest.raises(ShapeError):
        cnn_forward(cnn, np.zeros((1, 2, 4, 4)))


def test_train_cnn_reduces_loss_and_freezes_prefix():
    cnn = init_cnn((3, 3), (1, 4, 1), seed=13)
    reference_net = init_cnn((3, 3), (1, 4, 1), seed=14)
    data = _image_pairs(reference_net, 15, 8, 6, noise=0.0)
    before = cnn_mse_loss(cnn, data, (6, 6))

    trained, report = train_cnn(cnn, data, (6, 6), TrainConfig(learning_rate=1e-2, epochs=40, batch_size=4))
    assert report.final_loss < before
    assert len(report.loss_history) == 40

    tuned, _ = train_cnn(cnn, data, (6, 6), TrainConfig(epochs=5, trainable_layers=frozenset({1})))
    np.testing.assert_array_equal(tuned.layers[0].kernel.weights, cnn.layers[0].kernel.weights)
    with pytest.raises(ArgumentError):
        train_cnn(cnn, data, (6, 6), TrainConfig(trainable_layers=frozenset({0})))


def test_train_cnn_parameter_overflow_raises_training_error():
    cnn = init_cnn((1,), (1, 1), seed=3)
    images = philox(4).uniform(0.0, 1.0, size=(4, 36))
    data = PairedDataset(images, 3.0 * images)
    with pytest.raises(TrainingError) as info:
        train_cnn(cnn, data, (6, 6), TrainConfig(optimizer='sgd', learning_rate=1e307, epochs=3))
    assert info.value.last_finite_epoch == -1


def test_refit_last_kernel_does_not_increase_loss():
    cnn = init_cnn((3, 3), (1, 4, 1), seed=16)
    data = _image_pairs(init_cnn((3, 3), (1, 4, 1), seed=17), 18, 6, 6)
    refit = refit_last_kernel(cnn, data, (6, 6))
    assert cnn_mse_loss(refit, data, (6, 6)) <= cnn_mse_loss(cnn, data, (6, 6))


def test_psnr():
    assert psnr(0.01 * 256, 256) == pytest.approx(20.0)
    assert psnr(0.0, 256) == float('inf')


@pytest.mark.parametrize("sizes, channels", [((4,), (1, 1)), ((3, 3), (1, 1)), ((), (1,))])
def test_init_cnn_validation(sizes, channels):
    with pytest.raises(ArgumentError):
        init_cnn(sizes, channels, seed=0)
