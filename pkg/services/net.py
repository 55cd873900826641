"""Feedforward network evaluation, Jacobians, Lipschitz bounds and model files."""

import json
import logging
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ValidationError

from exceptions import ArgumentError, ModelFormatError, ShapeError
from networks.documents import ActivationDocument, LayerDocument, MlpDocument
from networks.models import Activation, Layer, LipschitzProfile, Mlp
from services.linalg import spectral_norm


logger = logging.getLogger(__name__)


def _as_batch(net: Mlp, x, dim: Optional[int] = None) -> tuple[np.ndarray, bool]:
    """Return x as an (N, d) batch and whether it was a single vector."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"expected a vector or an (N, d) batch, got shape {arr.shape}")
    expected = net.in_dim if dim is None else dim
    if arr.shape[1] != expected:
        raise ShapeError(f"input has dimension {arr.shape[1]}, expected {expected}")
    return arr, single


def _check_range(net: Mlp, from_layer: int, to_layer: int) -> None:
    if not 0 <= from_layer <= to_layer <= net.depth:
        raise ArgumentError(
            f"layer range ({from_layer}, {to_layer}] is invalid for a {net.depth}-layer net"
        )


def _input_dim(net: Mlp, k: int) -> int:
    return net.sizes[k]


def forward_trace(net: Mlp, inputs: np.ndarray, start: int = 0) -> tuple[list, list]:
    """
    Run layers start.. on a batch, keeping intermediate values.

    Returns:
        (pre_activations, activations) where activations[0] is the input and
        activations[k + 1] is the output of layer start + k
    """
    pres = []
    posts = [inputs]
    z = inputs
    for layer in net.layers[start:]:
        pre = layer.pre_activation(z)
        z = layer.activation.apply(pre)
        pres.append(pre)
        posts.append(z)
    return pres, posts


def forward(net: Mlp, x) -> np.ndarray:
    """Evaluate f = f_n o ... o f_1 on a vector or an (N, d) batch."""
    z, single = _as_batch(net, x)
    for layer in net.layers:
        z = layer(z)
    return z[0] if single else z


def latent(net: Mlp, x, upto: int) -> np.ndarray:
    """Output of the first `upto` layers; upto = 0 returns x itself."""
    _check_range(net, 0, upto)
    z, single = _as_batch(net, x)
    for layer in net.layers[:upto]:
        z = layer(z)
    return z[0] if single else z


def jvp(net: Mlp, x, tangent, from_layer: int, to_layer: int) -> np.ndarray:
    """
    Forward-mode Jacobian-vector product of layers (from_layer, to_layer].

    x holds points in the input space of layer from_layer (i.e. latents
    F_{from_layer}(.)), tangent the directions; both may be batches.
    """
    _check_range(net, from_layer, to_layer)
    if from_layer == to_layer:
        raise ArgumentError("empty layer range")
    dim = _input_dim(net, from_layer)
    z, single = _as_batch(net, x, dim)
    t, _ = _as_batch(net, tangent, dim)
    if t.shape[0] != z.shape[0]:
        raise ShapeError(f"{z.shape[0]} points but {t.shape[0]} tangents")

    for layer in net.layers[from_layer:to_layer]:
        pre = layer.pre_activation(z)
        t = layer.activation.derivative(pre) * (t @ layer.weight.T)
        z = layer.activation.apply(pre)
    return t[0] if single else t


def jacobian(net: Mlp, x, from_layer: int, to_layer: int) -> np.ndarray:
    """
    Exact Jacobian of layers (from_layer, to_layer] at latent(net, x, from_layer).

    x is a point in the network's input space. jacobian(net, x, 0, n) is
    J(f)(x) and jacobian(net, x, n - 1, n) is J(f_n)(z).
    """
    _check_range(net, from_layer, to_layer)
    if from_layer == to_layer:
        raise ArgumentError("empty layer range")
    z = np.asarray(latent(net, x, from_layer), dtype=np.float64)
    if z.ndim != 1:
        raise ShapeError("jacobian takes a single point")

    # accumulate diag(sigma'(pre_k)) W_k products, starting from the identity
    jac = np.eye(z.shape[0])
    for layer in net.layers[from_layer:to_layer]:
        pre = layer.pre_activation(z)
        jac = layer.activation.derivative(pre)[:, None] * (layer.weight @ jac)
        z = layer.activation.apply(pre)
    return jac


def lipschitz_profile(net: Mlp) -> LipschitzProfile:
    """Per-layer bounds ||W_j|| * Lip(sigma_j) and their prefix products."""
    per_layer = [
        spectral_norm(layer.weight) * layer.activation.lipschitz
        for layer in net.layers
    ]
    return LipschitzProfile(
        per_layer=per_layer,
        prefix_products=[float(p) for p in np.cumprod(per_layer)],
    )


def init_mlp(
    sizes: Sequence[int],
    hidden: Activation,
    seed: int,
    output: Optional[Activation] = None,
) -> Mlp:
    """
    Build a seeded network with uniform(+-1/sqrt(fan_in)) weights and biases.

    Args:
        sizes: Layer widths including input and output, e.g. [1, 64, 64, 64, 1]
        hidden: Activation of every layer but the last
        seed: PRNG seed
        output: Activation of the last layer (Identity by default)
    """
    if len(sizes) < 2 or min(sizes) < 1:
        raise ArgumentError(f"invalid layer sizes {list(sizes)}")
    output = output or Activation.identity()
    rng = np.random.Generator(np.random.Philox(seed))
    layers = []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        bias = rng.uniform(-bound, bound, size=fan_out)
        activation = output if k == len(sizes) - 2 else hidden
        layers.append(Layer(weight, bias, activation))
    return Mlp(tuple(layers))


# --- Model files ---

def _activation_document(activation: Activation) -> ActivationDocument:
    return ActivationDocument(kind=activation.kind, slope=activation.slope)


def _activation_from_document(doc: ActivationDocument, context: str) -> Activation:
    try:
        return Activation(doc.kind, doc.slope)
    except ArgumentError as e:
        raise ModelFormatError(str(e), context=context) from e


def parse_document(text: str, schema: type[BaseModel]) -> BaseModel:
    """
    Parse JSON text into a document model.

    Raises:
        ModelFormatError: with line/column context for JSON syntax errors and
            the field path for schema violations
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(e.msg, context=f"line {e.lineno} column {e.colno}") from e
    try:
        return schema.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        path = '.'.join(str(part) for part in first['loc']) or '<document>'
        raise ModelFormatError(first['msg'], context=f"field {path}") from e


def dump_document(doc: BaseModel) -> str:
    """Serialize a document; floats use Python's shortest round-trip repr."""
    return json.dumps(doc.model_dump(mode='json', exclude_none=True), indent=2) + '\n'


def serialize(net: Mlp) -> str:
    """Model JSON text for an Mlp."""
    doc = MlpDocument(layers=[
        LayerDocument(
            weight=layer.weight.tolist(),
            bias=layer.bias.tolist(),
            activation=_activation_document(layer.activation),
        )
        for layer in net.layers
    ])
    return dump_document(doc)


def mlp_from_document(doc: MlpDocument) -> Mlp:
    layers = []
    for k, layer_doc in enumerate(doc.layers):
        context = f"field layers.{k}"
        rows = {len(row) for row in layer_doc.weight}
        if len(rows) != 1:
            raise ModelFormatError("weight rows have unequal lengths", context=context)
        try:
            layers.append(Layer(
                np.array(layer_doc.weight),
                np.array(layer_doc.bias),
                _activation_from_document(layer_doc.activation, context),
            ))
        except (ShapeError, ValueError) as e:
            raise ModelFormatError(str(e), context=context) from e
    try:
        return Mlp(tuple(layers))
    except (ShapeError, ArgumentError) as e:
        raise ModelFormatError(str(e), context='field layers') from e


def deserialize(text: str) -> Mlp:
    """Parse model JSON text into an Mlp."""
    doc = parse_document(text, MlpDocument)
    net = mlp_from_document(doc)
    logger.debug(f"Loaded {net.depth}-layer network with sizes {net.sizes}")
    return net
