"""Numeric checks of the finetuned-loss and generalization bounds."""

import logging

import numpy as np

from adaptation.models import BOUND_SLACK, TheoryReport
from datasets.models import Alignment, PairedDataset
from exceptions import ArgumentError
from networks.models import Mlp
from services.align import align_nearest
from services.linalg import spectral_norm
from services.net import forward, lipschitz_profile
from services.train import mse_loss


logger = logging.getLogger(__name__)


def _pair_deviation(alignment: Alignment) -> float:
    """
    Largest plain Euclidean (x, y) distance over aligned pairs.

    Unweighted: JointMetric.label_weight only affects which pairs are matched.
    """
    joint = np.hstack([alignment.delta_x, alignment.delta_y])
    return float(np.max(np.sqrt(np.sum(joint * joint, axis=1))))


def _prefix_shared(f: Mlp, g: Mlp, frozen: int) -> bool:
    return all(
        np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)
        for a, b in zip(f.layers[:frozen], g.layers[:frozen])
    )


def verify_transfer_bound(
    f: Mlp,
    g: Mlp,
    r: int,
    alignment: Alignment,
    source: PairedDataset,
    target: PairedDataset,
) -> TheoryReport:
    """
    Check the finetuned loss of g on the target set against its bound.

    Args:
        f: Pretrained network
        g: Network obtained from f by changing its last r layers
        r: Number of trailing layers that were adapted
        alignment: Target-to-source matching used for epsilon_data
        source: Source data f was trained on
        target: Target data g was adapted to

    Returns:
        TheoryReport(kind='transfer')
    """
    if not f.same_structure(g):
        raise ArgumentError("f and g must have the same layer shapes and activations")
    if not 1 <= r <= f.depth:
        raise ArgumentError(f"r must lie in 1..{f.depth}, got {r}")
    if alignment.size != target.size:
        raise ArgumentError(
            f"alignment covers {alignment.size} samples but the target set has {target.size}"
        )
    frozen = f.depth - r
    shared = _prefix_shared(f, g, frozen)
    if not shared:
        logger.warning(f"f and g differ within the first {frozen} layers; the bound assumes they do not")

    profile_f = lipschitz_profile(f)
    profile_g = lipschitz_profile(g)
    c_prefix = profile_f.prefix(frozen)
    c_suffix = profile_f.segment(frozen, f.depth)
    if r == 1:
        c_delta = spectral_norm(g.layers[-1].weight - f.layers[-1].weight)
    else:
        c_delta = profile_g.segment(frozen, g.depth) + c_suffix

    epsilon_pretrained = float(np.sqrt(source.size * mse_loss(f, source)))
    epsilon_data = _pair_deviation(alignment)
    c_xtilde = float(np.max(np.linalg.norm(target.inputs, axis=1)))

    v1_bound = 2.0 * (
        c_delta ** 2 * c_prefix ** 2 * c_xtilde ** 2
        + c_suffix ** 2 * c_prefix ** 2 * epsilon_data ** 2
    )
    rhs = 3.0 * (epsilon_pretrained ** 2 + epsilon_data ** 2 + v1_bound)
    observed = mse_loss(g, target)

    v1 = forward(g, target.inputs) - forward(f, source.inputs[alignment.source_index])
    report = TheoryReport(
        kind='transfer',
        epsilon_pretrained=epsilon_pretrained,
        epsilon_data=epsilon_data,
        c_prefix=c_prefix,
        c_suffix=c_suffix,
        c_delta=c_delta,
        c_xtilde=c_xtilde,
        v1_bound=v1_bound,
        rhs_bound=rhs,
        observed_loss=observed,
        holds=observed <= rhs + BOUND_SLACK,
        cdelta_leq_edata=c_delta <= epsilon_data,
        prefix_shared=shared,
        v1_observed=float(np.mean(np.sum(v1 * v1, axis=1))),
        layers_adapted=r,
    )
    if report.holds:
        logger.info(f"Transfer bound holds: loss {observed:.6e} <= {rhs:.6e}")
    else:
        logger.warning(f"Transfer bound violated: loss {observed:.6e} > {rhs:.6e}")
    return report


def verify_generalization_bound(
    g: Mlp,
    adapt_set: PairedDataset,
    test_set: PairedDataset,
) -> TheoryReport:
    """
    Check the test loss of g against 3 (C_g^2 + 1) eps^2 + 3 (N / N_test) L_adapt.

    eps is the deviation of the test set from the adaptation set under
    nearest-sample alignment.
    """
    if test_set.size > adapt_set.size:
        raise ArgumentError(
            f"test set ({test_set.size}) must not be larger than the adaptation set ({adapt_set.size})"
        )
    alignment = align_nearest(adapt_set, test_set)
    epsilon_test = _pair_deviation(alignment)
    c_g = lipschitz_profile(g).prefix(g.depth)
    adapt_loss = mse_loss(g, adapt_set)
    observed = mse_loss(g, test_set)
    rhs = (
        3.0 * (c_g ** 2 * epsilon_test ** 2 + epsilon_test ** 2)
        + 3.0 * (adapt_set.size / test_set.size) * adapt_loss
    )

    report = TheoryReport(
        kind='generalization',
        epsilon_data=epsilon_test,
        c_suffix=c_g,
        rhs_bound=rhs,
        observed_loss=observed,
        holds=observed <= rhs + BOUND_SLACK,
        adapt_loss=adapt_loss,
        n_adapt=adapt_set.size,
        n_test=test_set.size,
    )
    if report.holds:
        logger.info(f"Generalization bound holds: test loss {observed:.6e} <= {rhs:.6e}")
    else:
        logger.warning(f"Generalization bound violated: test loss {observed:.6e} > {rhs:.6e}")
    return report
