"""
Layer variational adaptation.

The finetuning loss on aligned target samples is expanded to first order
around the pretrained net, leaving a linear regression of a transferal
residue q onto the target latents. The last-layer correction is then the
least-squares solution; the two-layer scheme alternates such regressions
over the last two layers.
"""

import logging
from typing import Optional

import numpy as np

from adaptation.models import LayerDelta, ResidueVariant, TransferalResidue
from datasets.models import Alignment, PairedDataset
from exceptions import ArgumentError, ShapeError, UnsupportedModelError
from networks.models import Layer, Mlp
from services.linalg import least_squares
from services.net import forward, jvp, latent


logger = logging.getLogger(__name__)


# Constants
MAX_STEP_HALVINGS = 8


def _check_inputs(net: Mlp, alignment: Alignment, source: PairedDataset, target: PairedDataset) -> None:
    for data in (source, target):
        if data.dx != net.in_dim or data.dy != net.out_dim:
            raise ShapeError(
                f"dataset '{data.name}' dims ({data.dx}, {data.dy}) do not match network "
                f"({net.in_dim}, {net.out_dim})"
            )
    if alignment.size != target.size:
        raise ShapeError(
            f"alignment covers {alignment.size} samples but the target set has {target.size}"
        )
    if alignment.source_index.min() < 0 or alignment.source_index.max() >= source.size:
        raise ShapeError(f"alignment indexes outside the {source.size}-sample source set")
    if alignment.delta_x.shape != target.inputs.shape or alignment.delta_y.shape != target.labels.shape:
        raise ShapeError("alignment deltas do not match the target set")


def _require_affine_last_layer(net: Mlp) -> None:
    last = net.layers[-1]
    if not last.activation.is_identity:
        raise UnsupportedModelError(
            f"last layer activation is {last.activation.kind.value}; "
            f"layer variation needs an affine (identity) last layer"
        )


def transferal_residue(
    net: Mlp,
    alignment: Alignment,
    source: PairedDataset,
    target: PairedDataset,
    variant: ResidueVariant = ResidueVariant.LATENT,
) -> TransferalResidue:
    """
    Residue q_i the last-layer variation must regress onto.

    For target sample i aligned with source sample j:
        q_i = (y~_i - y_j) - J (shift) + (y_j - f(x_j))
    where J (shift) is J(f_n)(z_j) (z~_i - z_j) on the penultimate latents
    for the LATENT variant and J(f)(x_j) (x~_i - x_j) for the INPUT variant.
    """
    variant = ResidueVariant(variant)
    _check_inputs(net, alignment, source, target)
    index = alignment.source_index
    x_source = source.inputs[index]
    y_source = source.labels[index]
    depth = net.depth

    label_shift = np.array(alignment.delta_y)
    pretrain_error = y_source - forward(net, x_source)
    if variant is ResidueVariant.LATENT:
        z_source = latent(net, x_source, depth - 1)
        z_shift = latent(net, target.inputs, depth - 1) - z_source
        correction = jvp(net, z_source, z_shift, depth - 1, depth)
    else:
        correction = jvp(net, x_source, alignment.delta_x, 0, depth)

    q = label_shift - correction + pretrain_error
    return TransferalResidue(
        q=q,
        label_shift=label_shift,
        jacobian_correction=correction,
        pretrain_error=pretrain_error,
        variant=variant,
    )


def _solve_affine(latents: np.ndarray, targets: np.ndarray, ridge: float, bias_column: bool):
    """Least-squares (dW, db) with latents @ dW.T + db ~ targets."""
    design = np.hstack([latents, np.ones((latents.shape[0], 1))]) if bias_column else latents
    solution = least_squares(design, targets, ridge)
    coefficients = solution.coefficients
    d = latents.shape[1]
    d_weight = coefficients[:d].T
    d_bias = coefficients[d] if bias_column else np.zeros(coefficients.shape[1])
    return d_weight, d_bias, solution


def lva_one_layer(
    net: Mlp,
    alignment: Alignment,
    source: PairedDataset,
    target: PairedDataset,
    variant: ResidueVariant = ResidueVariant.LATENT,
    ridge: float = 0.0,
    bias_column: bool = True,
) -> tuple[Mlp, LayerDelta]:
    """
    Closed-form last-layer adaptation.

    Solves min over (dW, db) of sum_i ||dW z~_i + db - q_i||^2 (+ ridge) with
    z~_i the penultimate latents of the target inputs.

    Args:
        net: Pretrained network with an identity last activation
        alignment: Target-to-source matching
        source: Source (pretraining) data
        target: Target (adaptation) data
        variant: Jacobian used in the residue
        ridge: Tikhonov weight of the least-squares solve
        bias_column: Append a constant column so db is solved too

    Returns:
        (adapted net, applied LayerDelta)
    """
    _require_affine_last_layer(net)
    residue = transferal_residue(net, alignment, source, target, variant)
    latents = latent(net, target.inputs, net.depth - 1)
    d_weight, d_bias, solution = _solve_affine(latents, residue.q, ridge, bias_column)

    delta = LayerDelta(
        d_weight=d_weight,
        d_bias=d_bias,
        target_layer=net.depth - 1,
        rank=solution.rank,
        condition_estimate=solution.condition_estimate,
        rank_deficient=solution.rank_deficient,
    )
    adapted = delta.apply_to(net)
    logger.info(
        f"LVA one-layer ({residue.variant.value}) on {target.size} target samples: "
        f"|dW|_F={np.linalg.norm(d_weight):.4e}, rank {solution.rank}"
    )
    return adapted, delta


def _target_loss(net: Mlp, target: PairedDataset) -> float:
    residual = forward(net, target.inputs) - target.labels
    return float(np.mean(np.sum(residual * residual, axis=1)))


class TwoLayerRegression:
    """
    Iterative regression over the last two layers.

    Starting from the one-layer solution, every sweep linearizes the net
    around its current layers A z + a (second to last, activation sigma)
    and W h + c (last, affine). With U the inputs of the second-to-last
    layer, D = sigma'(U A^T + a) and Z = sigma(U A^T + a), the increments
    minimize

        sum_i || [Z_i, 1] dC + W (D_i * (dA U_i + da)) - r_i ||^2
            + ridge * (||dC||^2 + ||dA||^2 + ||da||^2)

    where r is the current target residual and products of increments are
    dropped. Each sweep takes three exact block steps: dC with the others at
    zero, dA with da at zero, then da. The resulting (dA, da) is applied
    with the last layer re-solved exactly; the step is halved until the
    target loss does not increase.

    The sweeps linearize at the target inputs pushed through the current
    net, not at the aligned source latents, so the residue variant only
    selects the one-layer starting point. The last-layer re-solve always
    includes the bias column.

    Attributes:
        objective_trace: Per sweep, the linearized objective before and
            after each block step
        loss_history: Target mean loss after initialization and every
            accepted sweep
    """

    def __init__(
        self,
        net: Mlp,
        alignment: Alignment,
        source: PairedDataset,
        target: PairedDataset,
        ridge: float = 0.0,
        variant: ResidueVariant = ResidueVariant.LATENT,
    ):
        if net.depth < 2:
            raise UnsupportedModelError("two-layer adaptation needs at least two layers")
        _require_affine_last_layer(net)
        if ridge < 0:
            raise ArgumentError(f"ridge must be nonnegative, got {ridge}")
        self.net = net
        self.alignment = alignment
        self.source = source
        self.target = target
        self.ridge = ridge
        self.variant = ResidueVariant(variant)
        self.objective_trace: list[list[float]] = []
        self.loss_history: list[float] = []

    def _linearization(self, net: Mlp):
        hidden = net.layers[-2]
        last = net.layers[-1]
        inputs = latent(net, self.target.inputs, net.depth - 2)
        pre = hidden.pre_activation(inputs)
        slopes = hidden.activation.derivative(pre)
        features = hidden.activation.apply(pre)
        residual = self.target.labels - (features @ last.weight.T + last.bias)
        return inputs, slopes, features, residual

    def _objective(self, fitted: np.ndarray, residual: np.ndarray, *blocks) -> float:
        diff = fitted - residual
        penalty = sum(float(np.sum(block * block)) for block in blocks)
        return float(np.sum(diff * diff)) + self.ridge * penalty

    def _sweep(self, net: Mlp) -> tuple[np.ndarray, np.ndarray]:
        """Block steps of one sweep; returns the (dA, da) increments."""
        weight = net.layers[-1].weight
        inputs, slopes, features, residual = self._linearization(net)
        count, dy = residual.shape
        hidden_dim, input_dim = net.layers[-2].weight.shape

        augmented = np.hstack([features, np.ones((count, 1))])
        d_bias = np.zeros(hidden_dim)

        def hidden_term(da_weight, da_bias):
            return (slopes * (inputs @ da_weight.T + da_bias)) @ weight.T

        trace = [self._objective(np.zeros_like(residual), residual)]

        # last layer increments
        d_c = least_squares(augmented, residual, self.ridge).coefficients
        last_fit = augmented @ d_c
        trace.append(self._objective(last_fit, residual, d_c))

        # second-to-last weight with its bias increment held at zero
        design = np.einsum('ok,ik,il->iokl', weight, slopes, inputs).reshape(count * dy, hidden_dim * input_dim)
        rhs = (residual - last_fit).reshape(-1)
        d_a = least_squares(design, rhs, self.ridge).coefficients.reshape(hidden_dim, input_dim)
        weight_fit = hidden_term(d_a, d_bias)
        trace.append(self._objective(last_fit + weight_fit, residual, d_c, d_a))

        # second-to-last bias
        design = np.einsum('ok,ik->iok', weight, slopes).reshape(count * dy, hidden_dim)
        rhs = (residual - last_fit - weight_fit).reshape(-1)
        d_bias = least_squares(design, rhs, self.ridge).coefficients[:, 0]
        fitted = last_fit + hidden_term(d_a, d_bias)
        trace.append(self._objective(fitted, residual, d_c, d_a, d_bias))

        self.objective_trace.append(trace)
        return d_a, d_bias

    def _candidate(self, net: Mlp, d_a: np.ndarray, d_bias: np.ndarray, step: float) -> Mlp:
        hidden = net.layers[-2]
        moved = net.replace_layer(
            net.depth - 2,
            Layer(hidden.weight + step * d_a, hidden.bias + step * d_bias, hidden.activation),
        )
        # re-solve the last layer exactly for the moved features
        features = latent(moved, self.target.inputs, net.depth - 1)
        last = moved.layers[-1]
        residual = self.target.labels - (features @ last.weight.T + last.bias)
        d_weight, d_c, _ = _solve_affine(features, residual, self.ridge, bias_column=True)
        return moved.replace_layer(
            net.depth - 1, Layer(last.weight + d_weight, last.bias + d_c, last.activation)
        )

    def run(self, sweeps: int) -> tuple[Mlp, list[LayerDelta]]:
        """
        Run `sweeps` rounds from the one-layer solution.

        Returns:
            (adapted net, [delta of layer n-2, delta of layer n-1]) with both
            deltas relative to the pretrained net
        """
        if sweeps < 0:
            raise ArgumentError(f"sweeps must be >= 0, got {sweeps}")
        self.objective_trace = []
        current, last_delta = lva_one_layer(
            self.net, self.alignment, self.source, self.target, self.variant, self.ridge
        )
        loss = _target_loss(current, self.target)
        self.loss_history = [loss]
        depth = self.net.depth

        moved_any = False
        for sweep in range(sweeps):
            d_a, d_bias = self._sweep(current)
            if not (np.any(d_a) or np.any(d_bias)):
                logger.debug(f"sweep {sweep + 1}: zero increment, stopping")
                break

            accepted: Optional[Mlp] = None
            step = 1.0
            for _ in range(MAX_STEP_HALVINGS + 1):
                candidate = self._candidate(current, d_a, d_bias, step)
                candidate_loss = _target_loss(candidate, self.target)
                if candidate_loss <= loss:
                    accepted = candidate
                    break
                step *= 0.5
            if accepted is None:
                logger.debug(f"sweep {sweep + 1}: no step decreased the target loss, stopping")
                break

            current, loss = accepted, candidate_loss
            moved_any = True
            self.loss_history.append(loss)
            logger.debug(f"sweep {sweep + 1}: step {step:g}, target loss {loss:.6e}")

        original = self.net.layers
        hidden_delta = LayerDelta(
            d_weight=current.layers[-2].weight - original[-2].weight,
            d_bias=current.layers[-2].bias - original[-2].bias,
            target_layer=depth - 2,
        )
        if moved_any:
            last_delta = LayerDelta(
                d_weight=current.layers[-1].weight - original[-1].weight,
                d_bias=current.layers[-1].bias - original[-1].bias,
                target_layer=depth - 1,
            )
        logger.info(
            f"LVA two-layer: {len(self.loss_history) - 1} accepted sweeps of {sweeps}, "
            f"target loss {self.loss_history[0]:.6e} -> {loss:.6e}"
        )
        return current, [hidden_delta, last_delta]


def lva_two_layer(
    net: Mlp,
    alignment: Alignment,
    source: PairedDataset,
    target: PairedDataset,
    sweeps: int,
    ridge: float = 0.0,
    variant: ResidueVariant = ResidueVariant.LATENT,
) -> tuple[Mlp, list[LayerDelta]]:
    """Two-layer adaptation; sweeps = 0 returns the one-layer solution."""
    return TwoLayerRegression(net, alignment, source, target, ridge, variant).run(sweeps)
