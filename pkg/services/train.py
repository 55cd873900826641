"""Gradient-descent pretraining and layer-restricted finetuning."""

import logging
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from datasets.models import PairedDataset
from exceptions import ArgumentError, ShapeError, TrainingError
from networks.models import Layer, Mlp
from services.net import forward, forward_trace, latent


logger = logging.getLogger(__name__)


# Constants
LOG_EVERY_EPOCHS = 500


class OptimizerKind(str, Enum):
    SGD = 'sgd'
    ADAM = 'adam'


class TrainConfig(BaseModel):
    """
    Gradient-descent settings.

    Attributes:
        learning_rate: Step size (> 0)
        epochs: Passes over the data (>= 1)
        batch_size: Mini-batch size; None trains on the full batch
        optimizer: SGD or Adam
        beta1, beta2, eps: Adam moment parameters
        seed: Keys the per-epoch shuffling PRNG
        trainable_layers: 0-based indices of layers to update; empty = all
    """
    model_config = ConfigDict(frozen=True)

    learning_rate: float = Field(default=1e-3, gt=0.0)
    epochs: int = Field(default=1, ge=1)
    batch_size: Optional[int] = Field(default=None, ge=1)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    seed: int = Field(default=0, ge=0, lt=2**64)
    trainable_layers: frozenset[int] = frozenset()


class TrainReport(BaseModel):
    """
    Outcome of a training run.

    final_loss is the mean squared loss over the training set;
    epsilon_trained = sqrt(N * final_loss) is the same error in sum convention.
    """
    loss_history: list[float]
    final_loss: float = Field(ge=0.0)
    epsilon_trained: float = Field(ge=0.0)
    samples: int = Field(ge=1)


class Sgd:
    """Plain gradient descent."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        for param, grad in zip(params, grads):
            param -= self.learning_rate * grad


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, learning_rate: float, beta1: float, beta2: float, eps: float, shapes):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(shape) for shape in shapes]
        self.v = [np.zeros(shape) for shape in shapes]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for param, grad, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.eps)


def make_optimizer(cfg: TrainConfig, params: Sequence[np.ndarray]):
    if cfg.optimizer is OptimizerKind.SGD:
        return Sgd(cfg.learning_rate)
    return Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps, [p.shape for p in params])


def batch_order(seed: int, epoch: int, count: int, batch_size: Optional[int]) -> list[np.ndarray]:
    """
    Mini-batch index lists for one epoch.

    Shuffling uses the counter-based Philox generator keyed by (seed, epoch);
    full-batch training keeps the natural order.
    """
    if batch_size is None or batch_size >= count:
        return [np.arange(count)]
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    order = rng.permutation(count)
    return [order[start:start + batch_size] for start in range(0, count, batch_size)]


def _check_data(net: Mlp, data: PairedDataset) -> None:
    if data.dx != net.in_dim or data.dy != net.out_dim:
        raise ShapeError(
            f"dataset dims ({data.dx}, {data.dy}) do not match network "
            f"({net.in_dim}, {net.out_dim})"
        )


def mse_loss(net: Mlp, data: PairedDataset) -> float:
    """(1/N) sum_i ||f(x_i) - y_i||^2."""
    if data.size == 0:
        raise ArgumentError("loss of an empty dataset")
    _check_data(net, data)
    residual = forward(net, data.inputs) - data.labels
    return float(np.mean(np.sum(residual * residual, axis=1)))


def _backprop(layers: Sequence[Layer], pres: list, posts: list, dout: np.ndarray) -> list:
    """Parameter gradients [(dW, db), ...] given dLoss/dOutput."""
    grads = [None] * len(layers)
    delta = dout
    for k in range(len(layers) - 1, -1, -1):
        delta = delta * layers[k].activation.derivative(pres[k])
        grads[k] = (delta.T @ posts[k], delta.sum(axis=0))
        if k > 0:
            delta = delta @ layers[k].weight
    return grads


def loss_gradients(net: Mlp, inputs: np.ndarray, labels: np.ndarray) -> tuple[float, list]:
    """
    Mean squared loss and its analytic gradients for every layer.

    Returns:
        (loss, [(dW_1, db_1), ..., (dW_n, db_n)])
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    pres, posts = forward_trace(net, inputs)
    residual = posts[-1] - labels
    count = inputs.shape[0]
    loss = float(np.sum(residual * residual) / count)
    grads = _backprop(net.layers, pres, posts, 2.0 * residual / count)
    return loss, grads


def _trainable_suffix(net: Mlp, trainable: frozenset[int]) -> int:
    """First trainable layer index, checking the set is a suffix."""
    indices = sorted(trainable)
    if indices[0] < 0 or indices[-1] >= net.depth:
        raise ArgumentError(f"trainable layers {indices} out of range for {net.depth} layers")
    start = indices[0]
    if indices != list(range(start, net.depth)):
        raise ArgumentError(
            f"trainable layers {indices} must be a suffix of 0..{net.depth - 1}"
        )
    return start


def _run_gradient_descent(net: Mlp, data: PairedDataset, cfg: TrainConfig, start: int):
    _check_data(net, data)
    # frozen prefix latents never change
    prefix = latent(net, data.inputs, start)
    labels = data.labels
    count = data.size

    suffix = list(net.layers[start:])
    params = []
    for layer in suffix:
        params.extend([np.array(layer.weight), np.array(layer.bias)])
    optimizer = make_optimizer(cfg, params)

    history = []
    last_finite = None
    for epoch in range(cfg.epochs):
        total = 0.0
        for batch in batch_order(cfg.seed, epoch, count, cfg.batch_size):
            layers = [
                Layer(params[2 * k], params[2 * k + 1], layer.activation)
                for k, layer in enumerate(suffix)
            ]
            z = prefix[batch]
            pres, posts = [], [z]
            for layer in layers:
                pre = layer.pre_activation(z)
                z = layer.activation.apply(pre)
                pres.append(pre)
                posts.append(z)
            residual = z - labels[batch]
            batch_loss = float(np.sum(residual * residual))
            if not np.isfinite(batch_loss):
                raise TrainingError("training diverged", epoch - 1, last_finite)
            total += batch_loss
            grads = _backprop(layers, pres, posts, 2.0 * residual / len(batch))
            optimizer.step(params, [g for pair in grads for g in pair])
            # parameters can overflow before the loss does
            if not all(np.all(np.isfinite(p)) for p in params):
                raise TrainingError("training diverged", epoch - 1, last_finite)

        epoch_loss = total / count
        history.append(epoch_loss)
        last_finite = epoch_loss
        if (epoch + 1) % LOG_EVERY_EPOCHS == 0:
            logger.debug(f"epoch {epoch + 1}/{cfg.epochs}: loss {epoch_loss:.6e}")

    trained = net
    for k, layer in enumerate(suffix):
        trained = trained.replace_layer(
            start + k, Layer(params[2 * k], params[2 * k + 1], layer.activation)
        )

    final_loss = mse_loss(trained, data)
    if not np.isfinite(final_loss):
        raise TrainingError("training diverged", cfg.epochs - 1, last_finite)
    report = TrainReport(
        loss_history=history,
        final_loss=final_loss,
        epsilon_trained=float(np.sqrt(count * final_loss)),
        samples=count,
    )
    return trained, report


def pretrain(net: Mlp, data: PairedDataset, cfg: TrainConfig) -> tuple[Mlp, TrainReport]:
    """Train every layer on the source data."""
    if cfg.trainable_layers:
        raise ArgumentError("pretraining updates all layers; leave trainable_layers empty")
    trained, report = _run_gradient_descent(net, data, cfg, start=0)
    logger.info(
        f"Pretrained {net.depth}-layer net for {cfg.epochs} epochs on '{data.name}': "
        f"final loss {report.final_loss:.6e}"
    )
    return trained, report


def finetune_gd(net: Mlp, data: PairedDataset, cfg: TrainConfig) -> tuple[Mlp, TrainReport]:
    """Train only the trailing layers listed in cfg.trainable_layers; the rest stay fixed."""
    if not cfg.trainable_layers:
        raise ArgumentError("finetuning needs a nonempty trainable layer set")
    start = _trainable_suffix(net, cfg.trainable_layers)
    trained, report = _run_gradient_descent(net, data, cfg, start=start)
    logger.info(
        f"Finetuned layers {start}..{net.depth - 1} for {cfg.epochs} epochs on "
        f"'{data.name}': final loss {report.final_loss:.6e}"
    )
    return trained, report


def suffix_layers(net: Mlp, count: int) -> frozenset[int]:
    """Indices of the last `count` layers."""
    if not 1 <= count <= net.depth:
        raise ArgumentError(f"cannot select {count} trailing layers of {net.depth}")
    return frozenset(range(net.depth - count, net.depth))
