import numpy as np
import pytest

from adaptation.models import LayerDelta, ResidueVariant
from datasets.models import Alignment, PairedDataset
from exceptions import ArgumentError, ShapeError, UnsupportedModelError
from networks.models import Activation, Layer, Mlp
from services.align import align_nearest
from services.net import forward, latent
from services.lva import TwoLayerRegression, lva_one_layer, lva_two_layer, transferal_residue
from services.train import mse_loss
from tests.conftest import linear_mlp, philox, random_mlp, random_pair


def _exact_source(net: Mlp, seed: int, n: int = 25) -> PairedDataset:
    x = philox(seed).uniform(-1.0, 1.0, size=(n, net.in_dim))
    return PairedDataset(x, forward(net, x), 'exact')


def _one_layer_objective(net, target, residue, delta):
    z = latent(net, target.inputs, net.depth - 1)
    diff = z @ delta.d_weight.T + delta.d_bias - residue.q
    return float(np.sum(diff * diff))


def test_exact_fit_on_identical_domains_leaves_net_unchanged(tanh_net):
    data = _exact_source(tanh_net, 1)
    alignment = align_nearest(data, data)
    residue = transferal_residue(tanh_net, alignment, data, data)
    assert np.abs(residue.q).max() < 1e-14

    adapted, delta = lva_one_layer(tanh_net, alignment, data, data)
    assert np.abs(delta.d_weight).max() < 1e-12
    assert np.abs(delta.d_bias).max() < 1e-12
    assert delta.target_layer == tanh_net.depth - 1
    for original, copy in zip(tanh_net.layers, adapted.layers):
        np.testing.assert_allclose(original.weight, copy.weight, atol=1e-12)
        np.testing.assert_allclose(original.bias, copy.bias, atol=1e-12)


def test_identical_domains_residue_is_pretrain_error(tanh_net, domain_pair):
    source, _ = domain_pair
    alignment = align_nearest(source, source)
    residue = transferal_residue(tanh_net, alignment, source, source)
    assert not np.any(residue.label_shift)
    np.testing.assert_allclose(residue.jacobian_correction, 0.0, atol=1e-14)
    np.testing.assert_allclose(residue.q, source.labels - forward(tanh_net, source.inputs), atol=1e-14)


@pytest.mark.parametrize("variant", list(ResidueVariant))
def test_residue_decomposition(tanh_net, domain_pair, variant):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    residue = transferal_residue(tanh_net, alignment, source, target, variant)
    j = alignment.source_index
    np.testing.assert_array_equal(
        residue.q, residue.label_shift - residue.jacobian_correction + residue.pretrain_error
    )
    np.testing.assert_array_equal(residue.label_shift, target.labels - source.labels[j])
    np.testing.assert_array_equal(residue.pretrain_error, source.labels[j] - forward(tanh_net, source.inputs[j]))
    assert residue.variant is variant


def test_residue_of_linear_net_by_hand():
    weight = np.array([[2.0, -1.0], [0.5, 3.0]])
    bias = np.array([0.1, -0.4])
    net = linear_mlp(weight, bias)
    source = PairedDataset([[1.0, 0.0], [0.0, 1.0]], [[2.0, 0.0], [0.0, 3.0]])
    target = PairedDataset([[1.0, 0.5]], [[1.0, 1.0]])
    alignment = align_nearest(source, target)
    j = alignment.source_index[0]
    residue = transferal_residue(net, alignment, source, target)

    x, y = source.inputs[j], source.labels[j]
    xt, yt = target.inputs[0], target.labels[0]
    expected = (yt - y) - weight @ (xt - x) + (y - (weight @ x + bias))
    np.testing.assert_allclose(residue.q[0], expected, atol=1e-14)
    # for an affine net the expansion is exact
    np.testing.assert_allclose(residue.q[0], yt - (weight @ xt + bias), atol=1e-14)


def test_variants_agree_on_linear_net():
    hidden = Layer(np.array([[1.0, 0.5], [-0.3, 2.0], [0.7, 0.1]]), np.array([0.2, 0.0, -0.1]), Activation.identity())
    last = Layer(np.array([[1.0, -1.0, 0.5]]), np.array([0.3]), Activation.identity())
    net = Mlp((hidden, last))
    source, target = random_pair(4, net)
    alignment = align_nearest(source, target)
    a = transferal_residue(net, alignment, source, target, ResidueVariant.LATENT)
    b = transferal_residue(net, alignment, source, target, ResidueVariant.INPUT)
    np.testing.assert_allclose(a.q, b.q, atol=1e-12)


def test_one_layer_on_affine_net_is_target_regression():
    rng = philox(12)
    net = linear_mlp(rng.standard_normal((2, 3)), rng.standard_normal(2))
    source, target = random_pair(13, net)
    _, delta = lva_one_layer(net, align_nearest(source, target), source, target)

    design = np.hstack([target.inputs, np.ones((target.size, 1))])
    coefficients = np.linalg.lstsq(design, target.labels, rcond=None)[0]
    np.testing.assert_allclose(net.layers[0].weight + delta.d_weight, coefficients[:3].T, atol=1e-10)
    np.testing.assert_allclose(net.layers[0].bias + delta.d_bias, coefficients[3], atol=1e-10)


def test_one_layer_matches_scalar_grid_search():
    hidden = Layer(np.array([[1.0]]), np.array([0.0]), Activation.tanh())
    last = Layer(np.array([[1.0]]), np.array([0.0]), Activation.identity())
    net = Mlp((hidden, last))
    x = np.array([[-1.0], [0.2], [1.5]])
    z = np.tanh(x)
    y = forward(net, x) + 0.5 * z - 0.3 + np.array([[0.01], [-0.02], [0.015]])
    data = PairedDataset(x, y)
    alignment = align_nearest(data, data)
    residue = transferal_residue(net, alignment, data, data)
    _, delta = lva_one_layer(net, alignment, data, data)

    grid = np.arange(-2000, 2001) * 1e-3
    q = residue.q[:, 0]
    zs = z[:, 0]
    best_value, best_point = np.inf, None
    for a in grid:
        values = np.sum((a * zs[:, None] + grid[None, :] - q[:, None]) ** 2, axis=0)
        k = int(np.argmin(values))
        if values[k] < best_value:
            best_value, best_point = values[k], (a, grid[k])

    solved = _one_layer_objective(net, data, residue, delta)
    assert solved <= best_value + 1e-12
    assert abs(delta.d_weight[0, 0] - best_point[0]) <= 5e-3
    assert abs(delta.d_bias[0] - best_point[1]) <= 5e-3


@pytest.mark.parametrize("seed", range(5))
def test_one_layer_solution_is_stationary(seed):
    net = random_mlp(seed)
    source, target = random_pair(seed + 20, net)
    alignment = align_nearest(source, target)
    residue = transferal_residue(net, alignment, source, target)
    _, delta = lva_one_layer(net, alignment, source, target)

    z = latent(net, target.inputs, net.depth - 1)
    design = np.hstack([z, np.ones((target.size, 1))])
    residual = design @ np.vstack([delta.d_weight.T, delta.d_bias]) - residue.q
    np.testing.assert_allclose(design.T @ residual, 0.0, atol=1e-9)

    best = _one_layer_objective(net, target, residue, delta)
    rng = philox(seed + 40)
    n_weight = delta.d_weight.size
    for _ in range(100):
        step = rng.standard_normal(n_weight + delta.d_bias.size)
        step *= 1e-3 / np.linalg.norm(step)
        nudged = LayerDelta(
            delta.d_weight + step[:n_weight].reshape(delta.d_weight.shape),
            delta.d_bias + step[n_weight:],
            delta.target_layer,
        )
        assert _one_layer_objective(net, target, residue, nudged) >= best


def test_label_scale_carries_through_the_delta(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    _, delta = lva_one_layer(tanh_net, alignment, source, target)

    s = 2.5
    last = tanh_net.layers[-1]
    scaled_net = tanh_net.replace_layer(tanh_net.depth - 1, Layer(s * last.weight, s * last.bias, last.activation))
    scaled_alignment = Alignment(
        source_index=alignment.source_index,
        pair_distances=alignment.pair_distances,
        epsilon_data=alignment.epsilon_data,
        delta_x=alignment.delta_x,
        delta_y=s * alignment.delta_y,
    )
    _, scaled_delta = lva_one_layer(
        scaled_net, scaled_alignment, source.scaled_labels(s), target.scaled_labels(s)
    )
    np.testing.assert_allclose(scaled_delta.d_weight, s * delta.d_weight, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scaled_delta.d_bias, s * delta.d_bias, rtol=1e-9, atol=1e-12)


def test_without_bias_column(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    residue = transferal_residue(tanh_net, alignment, source, target)
    _, delta = lva_one_layer(tanh_net, alignment, source, target, bias_column=False)
    assert not np.any(delta.d_bias)

    z = latent(tanh_net, target.inputs, tanh_net.depth - 1)
    expected = np.linalg.lstsq(z, residue.q, rcond=None)[0].T
    np.testing.assert_allclose(delta.d_weight, expected, atol=1e-10)


def test_ridge_matches_closed_form_and_shrinks(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    residue = transferal_residue(tanh_net, alignment, source, target)
    z = latent(tanh_net, target.inputs, tanh_net.depth - 1)

    _, plain = lva_one_layer(tanh_net, alignment, source, target, bias_column=False)
    _, ridged = lva_one_layer(tanh_net, alignment, source, target, ridge=0.5, bias_column=False)
    expected = np.linalg.solve(z.T @ z + 0.5 * np.eye(z.shape[1]), z.T @ residue.q).T
    np.testing.assert_allclose(ridged.d_weight, expected, atol=1e-10)
    assert np.linalg.norm(ridged.d_weight) < np.linalg.norm(plain.d_weight)


def test_non_affine_last_layer_is_rejected(domain_pair):
    net = Mlp((
        Layer(np.ones((3, 2)), np.zeros(3), Activation.tanh()),
        Layer(np.ones((2, 3)), np.zeros(2), Activation.relu()),
    ))
    source, target = domain_pair
    alignment = align_nearest(source, target)
    with pytest.raises(UnsupportedModelError):
        lva_one_layer(net, alignment, source, target)
    with pytest.raises(UnsupportedModelError):
        lva_two_layer(net, alignment, source, target, sweeps=1)
    with pytest.raises(UnsupportedModelError):
        TwoLayerRegression(linear_mlp(np.eye(2)), alignment, source, target)


def test_alignment_must_cover_target(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target.head(5))
    with pytest.raises(ShapeError):
        lva_one_layer(tanh_net, alignment, source, target)


def test_delta_shape_is_checked(tanh_net):
    delta = LayerDelta(np.zeros((3, 3)), np.zeros(3), target_layer=tanh_net.depth - 1)
    with pytest.raises(ShapeError):
        delta.apply_to(tanh_net)


@pytest.mark.parametrize("variant", list(ResidueVariant))
def test_two_layer_with_zero_sweeps_is_one_layer(tanh_net, domain_pair, variant):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    one, one_delta = lva_one_layer(tanh_net, alignment, source, target, variant)
    two, (hidden_delta, last_delta) = lva_two_layer(
        tanh_net, alignment, source, target, sweeps=0, variant=variant
    )
    for a, b in zip(one.layers, two.layers):
        np.testing.assert_array_equal(a.weight, b.weight)
        np.testing.assert_array_equal(a.bias, b.bias)
    assert hidden_delta.is_zero
    assert hidden_delta.target_layer == tanh_net.depth - 2
    np.testing.assert_array_equal(last_delta.d_weight, one_delta.d_weight)


@pytest.mark.parametrize("seed", range(20))
def test_two_layer_objective_is_monotone(seed):
    net = random_mlp(seed, hidden=Activation.tanh() if seed % 2 else Activation.leaky_relu(0.1))
    source, target = random_pair(seed + 200, net, shift=0.2)
    alignment = align_nearest(source, target)
    solver = TwoLayerRegression(net, alignment, source, target)
    adapted, deltas = solver.run(sweeps=3)

    for trace in solver.objective_trace:
        assert len(trace) == 4
        for before, after in zip(trace, trace[1:]):
            assert after <= before + 1e-9 * (1.0 + abs(before))
    history = solver.loss_history
    for before, after in zip(history, history[1:]):
        assert after <= before
    one, _ = lva_one_layer(net, alignment, source, target)
    assert mse_loss(adapted, target) <= mse_loss(one, target)

    rebuilt = deltas[1].apply_to(deltas[0].apply_to(net))
    np.testing.assert_allclose(forward(rebuilt, target.inputs), forward(adapted, target.inputs), atol=1e-10)


def test_two_layer_keeps_exact_fit(tanh_net):
    data = _exact_source(tanh_net, 2)
    alignment = align_nearest(data, data)
    adapted, deltas = lva_two_layer(tanh_net, alignment, data, data, sweeps=2)
    for delta in deltas:
        assert np.linalg.norm(delta.d_weight) < 1e-12
        assert np.linalg.norm(delta.d_bias) < 1e-12
    np.testing.assert_allclose(forward(adapted, data.inputs), data.labels, atol=1e-12)


def test_negative_sweeps_rejected(tanh_net, domain_pair):
    source, target = domain_pair
    with pytest.raises(ArgumentError):
        lva_two_layer(tanh_net, align_nearest(source, target), source, target, sweeps=-1)
