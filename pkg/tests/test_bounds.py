import numpy as np
import pytest
from pydantic import ValidationError

from adaptation.models import TheoryReport
from datasets.models import JointMetric, PairedDataset
from exceptions import ArgumentError
from networks.models import Activation, Layer
from services.align import align_nearest
from services.bounds import verify_generalization_bound, verify_transfer_bound
from services.lva import lva_one_layer, lva_two_layer
from services.net import forward, init_mlp, lipschitz_profile
from services.train import mse_loss
from tests.conftest import philox, random_mlp, random_pair


def _transfer_case(seed: int):
    hidden = Activation.relu() if seed % 2 else Activation.tanh()
    net = init_mlp([2, 6, 5, 1], hidden, seed)
    source, target = random_pair(seed + 1000, net, shift=0.05 * (seed % 5))
    return net, source, target, align_nearest(source, target)


@pytest.mark.parametrize("seed", range(100))
def test_transfer_bound_holds_after_one_layer(seed):
    net, source, target, alignment = _transfer_case(seed)
    adapted, _ = lva_one_layer(net, alignment, source, target)
    report = verify_transfer_bound(net, adapted, 1, alignment, source, target)
    assert report.holds
    assert report.prefix_shared
    assert report.observed_loss <= report.rhs_bound


@pytest.mark.parametrize("seed", range(0, 100, 5))
def test_transfer_bound_holds_after_two_layers(seed):
    net, source, target, alignment = _transfer_case(seed)
    adapted, _ = lva_two_layer(net, alignment, source, target, sweeps=2)
    report = verify_transfer_bound(net, adapted, 2, alignment, source, target)
    assert report.holds
    assert report.layers_adapted == 2


def test_transfer_report_fields_rederive(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    adapted, delta = lva_one_layer(tanh_net, alignment, source, target)
    report = verify_transfer_bound(tanh_net, adapted, 1, alignment, source, target)

    profile = lipschitz_profile(tanh_net)
    assert report.c_prefix == pytest.approx(profile.prefix(tanh_net.depth - 1))
    assert report.c_suffix == pytest.approx(profile.per_layer[-1])
    assert report.c_delta == pytest.approx(np.linalg.norm(delta.d_weight, 2), rel=1e-8)
    assert report.c_xtilde == pytest.approx(np.max(np.linalg.norm(target.inputs, axis=1)))
    assert report.epsilon_pretrained == pytest.approx(np.sqrt(source.size * mse_loss(tanh_net, source)))
    joint = np.hstack([alignment.delta_x, alignment.delta_y])
    assert report.epsilon_data == pytest.approx(np.linalg.norm(joint, axis=1).max())

    v1 = 2 * (report.c_delta ** 2 * report.c_prefix ** 2 * report.c_xtilde ** 2
              + report.c_suffix ** 2 * report.c_prefix ** 2 * report.epsilon_data ** 2)
    assert report.v1_bound == pytest.approx(v1, rel=1e-12)
    rhs = 3 * (report.epsilon_pretrained ** 2 + report.epsilon_data ** 2 + v1)
    assert report.rhs_bound == pytest.approx(rhs, rel=1e-12)
    assert report.observed_loss == pytest.approx(mse_loss(adapted, target))
    assert report.cdelta_leq_edata == (report.c_delta <= report.epsilon_data)

    j = alignment.source_index
    diff = forward(adapted, target.inputs) - forward(tanh_net, source.inputs[j])
    assert report.v1_observed == pytest.approx(np.mean(np.sum(diff ** 2, axis=1)))


def test_epsilon_data_ignores_label_weight(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target, JointMetric(label_weight=5.0))
    adapted, _ = lva_one_layer(tanh_net, alignment, source, target)
    report = verify_transfer_bound(tanh_net, adapted, 1, alignment, source, target)
    plain = np.linalg.norm(np.hstack([alignment.delta_x, alignment.delta_y]), axis=1).max()
    assert report.epsilon_data == pytest.approx(plain, rel=1e-12)


def test_unchanged_net_on_identical_domain():
    net = random_mlp(3)
    source, _ = random_pair(4, net)
    alignment = align_nearest(source, source)
    report = verify_transfer_bound(net, net, 1, alignment, source, source)
    assert report.epsilon_data == 0.0
    assert report.c_delta == 0.0
    assert report.v1_bound == 0.0
    assert report.rhs_bound == pytest.approx(3 * report.epsilon_pretrained ** 2)
    assert report.holds


def test_changed_prefix_is_reported(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    first = tanh_net.layers[0]
    moved = tanh_net.replace_layer(0, Layer(first.weight + 0.1, first.bias, first.activation))
    report = verify_transfer_bound(tanh_net, moved, 1, alignment, source, target)
    assert report.prefix_shared is False


def test_transfer_argument_errors(tanh_net, relu_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    with pytest.raises(ArgumentError):
        verify_transfer_bound(tanh_net, relu_net, 1, alignment, source, target)
    with pytest.raises(ArgumentError):
        verify_transfer_bound(tanh_net, tanh_net, 0, alignment, source, target)
    with pytest.raises(ArgumentError):
        verify_transfer_bound(tanh_net, tanh_net, tanh_net.depth + 1, alignment, source, target)
    with pytest.raises(ArgumentError):
        verify_transfer_bound(tanh_net, tanh_net, 1, alignment, source, target.head(3))


@pytest.mark.parametrize("seed", range(100))
def test_generalization_bound_holds(seed):
    net = random_mlp(seed, sizes=(2, 5, 1))
    rng = philox(seed + 500)
    adapt_set = PairedDataset(
        rng.uniform(-1, 1, size=(30, 2)), rng.standard_normal((30, 1)), 'adapt'
    )
    count = 10 + seed % 20
    test_set = PairedDataset(
        adapt_set.inputs[:count] + 1e-3 * rng.standard_normal((count, 2)),
        adapt_set.labels[:count] + 1e-3 * rng.standard_normal((count, 1)),
        'test',
    )
    report = verify_generalization_bound(net, adapt_set, test_set)
    assert report.holds
    assert report.kind == 'generalization'
    assert report.n_adapt == 30 and report.n_test == count

    c_g = lipschitz_profile(net).prefix(net.depth)
    rhs = 3 * (c_g ** 2 + 1) * report.epsilon_data ** 2 + 3 * (30 / count) * report.adapt_loss
    assert report.rhs_bound == pytest.approx(rhs, rel=1e-12)


def test_generalization_on_own_data_is_scaled_training_loss(tanh_net, domain_pair):
    source, _ = domain_pair
    report = verify_generalization_bound(tanh_net, source, source)
    assert report.epsilon_data == 0.0
    assert report.rhs_bound == pytest.approx(3 * report.adapt_loss)
    assert report.observed_loss == pytest.approx(report.adapt_loss)


def test_generalization_rejects_larger_test_set(tanh_net, domain_pair):
    source, target = domain_pair
    with pytest.raises(ArgumentError):
        verify_generalization_bound(tanh_net, target, source)


def test_report_validator_rejects_inconsistent_holds():
    with pytest.raises(ValidationError):
        TheoryReport(epsilon_data=0.1, c_suffix=1.0, rhs_bound=1.0, observed_loss=2.0, holds=True)
    with pytest.raises(ValidationError):
        TheoryReport(epsilon_data=0.1, c_suffix=1.0, rhs_bound=1.0, observed_loss=1.0, holds=False)


def test_report_json_uses_aliases(tanh_net, domain_pair):
    source, target = domain_pair
    alignment = align_nearest(source, target)
    adapted, _ = lva_one_layer(tanh_net, alignment, source, target)
    payload = verify_transfer_bound(tanh_net, adapted, 1, alignment, source, target).to_json_dict()
    for key in ('epsilon_pretrained', 'epsilon_data', 'C_Fprefix', 'C_F', 'C_deltaF',
                'C_xtilde', 'v1_bound', 'rhs', 'lhs', 'holds', 'cdelta_leq_edata'):
        assert key in payload
    assert 'n_test' not in payload
    assert TheoryReport.model_validate(payload).rhs_bound == payload['rhs']

    generalization = verify_generalization_bound(tanh_net, source, target).to_json_dict()
    assert generalization['kind'] == 'generalization'
    assert 'C_Fprefix' not in generalization
