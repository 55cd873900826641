"""Model files of either kind ('mlp' or 'cnn') on disk."""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from exceptions import ArgumentError, ModelFormatError, ShapeError, UnsupportedModelError
from networks.documents import ActivationDocument, CnnDocument, ConvLayerDocument, MlpDocument
from networks.models import Activation, Cnn, ConvKernel, ConvLayer, Mlp
from services.net import dump_document, mlp_from_document, parse_document, serialize


logger = logging.getLogger(__name__)


Network = Union[Mlp, Cnn]


def serialize_cnn(cnn: Cnn) -> str:
    doc = CnnDocument(kind='cnn', layers=[
        ConvLayerDocument(
            kernel=layer.kernel.weights.tolist(),
            bias=layer.kernel.bias.tolist(),
            stride=layer.kernel.stride,
            padding=layer.kernel.padding,
            activation=ActivationDocument(kind=layer.activation.kind, slope=layer.activation.slope),
        )
        for layer in cnn.layers
    ])
    return dump_document(doc)


def cnn_from_document(doc: CnnDocument) -> Cnn:
    layers = []
    for k, layer_doc in enumerate(doc.layers):
        context = f"field layers.{k}"
        try:
            kernel = ConvKernel(
                np.array(layer_doc.kernel), np.array(layer_doc.bias),
                layer_doc.stride, layer_doc.padding,
            )
            activation = Activation(layer_doc.activation.kind, layer_doc.activation.slope)
        except (ShapeError, ArgumentError, ValueError) as e:
            raise ModelFormatError(str(e), context=context) from e
        layers.append(ConvLayer(kernel, activation))
    try:
        return Cnn(tuple(layers))
    except (ShapeError, ArgumentError) as e:
        raise ModelFormatError(str(e), context='field layers') from e


def _document_kind(text: str) -> str:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFormatError(e.msg, context=f"line {e.lineno} column {e.colno}") from e
    if not isinstance(raw, dict):
        raise ModelFormatError("a model document must be a JSON object", context='field <document>')
    return raw.get('kind', 'mlp')


def deserialize_network(text: str) -> Network:
    """Parse a model document of either kind."""
    kind = _document_kind(text)
    if kind == 'cnn':
        return cnn_from_document(parse_document(text, CnnDocument))
    if kind == 'mlp':
        return mlp_from_document(parse_document(text, MlpDocument))
    raise ModelFormatError(f"unknown model kind '{kind}'", context='field kind')


def serialize_network(net: Network) -> str:
    return serialize_cnn(net) if isinstance(net, Cnn) else serialize(net)


def save_model(net: Network, path: Path) -> None:
    Path(path).write_text(serialize_network(net))
    logger.info(f"Wrote {type(net).__name__} with {net.depth} layers to {path}")


def load_model(path: Path) -> Network:
    net = deserialize_network(Path(path).read_text())
    logger.info(f"Loaded {type(net).__name__} with {net.depth} layers from {path}")
    return net


def load_mlp(path: Path) -> Mlp:
    net = load_model(path)
    if not isinstance(net, Mlp):
        raise UnsupportedModelError(f"{path} holds a CNN; this command needs a fully-connected model")
    return net


def load_cnn(path: Path) -> Cnn:
    net = load_model(path)
    if not isinstance(net, Cnn):
        raise UnsupportedModelError(f"{path} holds a fully-connected model; this command needs a CNN")
    return net
