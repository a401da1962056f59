"""Sequential network, cross-entropy losses and the backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from gswxray.core import GrayImage
from gswxray.nn.layers import (
    Conv3x3,
    Dense,
    Dropout,
    GlobalAveragePool,
    Layer,
    MaxPool2x2,
    ReLU,
    ShapeError,
    Sigmoid,
    Softmax,
    make_layer,
)

PROB_EPS = 1e-12
BACKBONE = ("conv1", "relu1", "pool1", "conv2", "relu2", "pool2", "conv3", "relu3")
HEAD = ("fc1", "fc2")


class Network:
    def __init__(self, layers: Sequence[Layer], input_shape: tuple[int, int], class_names: Sequence[str]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)  # (height, width); one channel
        self.class_names = tuple(class_names)
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        if len(self.class_names) < 2:
            raise ValueError("need at least two classes")
        self.check_shapes()

    @property
    def head_kind(self) -> str:
        return self.layers[-1].kind

    @property
    def loss_kind(self) -> str:
        return "binary" if self.head_kind == "sigmoid" else "categorical"

    def check_shapes(self) -> tuple[int, ...]:
        shape: tuple[int, ...] = (*self.input_shape, 1)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if self.layers[-1].kind not in ("sigmoid", "softmax"):
            raise ShapeError("final layer must be sigmoid or softmax")
        if shape != (len(self.class_names),):
            raise ShapeError(f"network emits {shape}, expected {len(self.class_names)} class probabilities")
        return shape

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def named_parameters(self):
        for layer in self.layers:
            for pname in layer.param_names:
                yield (layer.name, pname), layer.params[pname]

    def parameters(self) -> dict[tuple[str, str], np.ndarray]:
        return dict(self.named_parameters())

    def set_parameters(self, params: dict[tuple[str, str], np.ndarray]) -> None:
        for (lname, pname), value in params.items():
            layer = self.layer(lname)
            if layer.params[pname].shape != value.shape:
                raise ShapeError(f"{lname}/{pname}: shape {value.shape} != {layer.params[pname].shape}")
            layer.params[pname] = np.array(value, dtype=np.float64)

    def freeze(self, names, frozen: bool = True) -> None:
        for name in names:
            self.layer(name).frozen = frozen

    def unfreeze_all(self) -> None:
        for layer in self.layers:
            layer.frozen = False

    def frozen_keys(self) -> set[tuple[str, str]]:
        return {(layer.name, p) for layer in self.layers if layer.frozen for p in layer.param_names}

    def architecture(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "class_names": list(self.class_names),
            "layers": [{"name": layer.name, "kind": layer.kind, **layer.config()} for layer in self.layers],
        }

    @classmethod
    def from_architecture(cls, arch: dict) -> "Network":
        layers = []
        for spec in arch["layers"]:
            spec = dict(spec)
            layers.append(make_layer(spec.pop("kind"), spec.pop("name"), **spec))
        return cls(layers, tuple(arch["input_shape"]), arch["class_names"])


def build_classifier(
    input_shape: tuple[int, int] = (64, 64),
    class_names: Sequence[str] = ("Normal", "GSW"),
    head: str | None = None,
    widths: tuple[int, int, int] = (8, 16, 32),
    hidden: int = 16,
    dropout: float = 0.5,
    seed: int = 0,
) -> Network:
    """conv-relu-pool x2, conv-relu, GAP, dropout, dense-relu-dense, sigmoid/softmax.

    A two-class problem defaults to a single-logit sigmoid head.
    """
    k = len(class_names)
    head = head or ("sigmoid" if k == 2 else "softmax")
    if head == "sigmoid" and k != 2:
        raise ValueError("sigmoid head is for exactly two classes")
    c1, c2, c3 = widths
    layers: list[Layer] = [
        Conv3x3("conv1", 1, c1),
        ReLU("relu1"),
        MaxPool2x2("pool1"),
        Conv3x3("conv2", c1, c2),
        ReLU("relu2"),
        MaxPool2x2("pool2"),
        Conv3x3("conv3", c2, c3),
        ReLU("relu3"),
        GlobalAveragePool("gap"),
        Dropout("dropout", dropout),
        Dense("fc1", c3, hidden),
        ReLU("relu4"),
        Dense("fc2", hidden, 1 if head == "sigmoid" else k),
        Sigmoid("out") if head == "sigmoid" else Softmax("out"),
    ]
    net = Network(layers, input_shape, class_names)
    init_parameters(net, seed)
    return net


def init_parameters(net: Network, seed: int, names: Sequence[str] | None = None) -> None:
    """He fan-in initialization for weights, zero biases."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if not layer.param_names or (names is not None and layer.name not in names):
            continue
        w = layer.params["W"]
        fan_in = int(np.prod(w.shape[1:])) if layer.kind == "conv3x3" else w.shape[0]
        layer.params["W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
        layer.params["b"] = np.zeros_like(layer.params["b"])


def as_batch(images, input_shape: tuple[int, int]) -> np.ndarray:
    """Stack GrayImages (or a uint8/float array) into a standardized ``(N, H, W, 1)`` float batch."""
    if isinstance(images, np.ndarray):
        x = images.astype(np.float64)
        if images.dtype == np.uint8:
            x = x / 255.0
        if x.ndim == 3:
            x = x[..., None]
    else:
        x = np.stack([np.asarray(img.pixels if isinstance(img, GrayImage) else img) for img in images])
        x = x.astype(np.float64)[..., None] / 255.0
    if x.ndim != 4 or x.shape[3] != 1 or x.shape[1:3] != tuple(input_shape):
        raise ShapeError(f"batch shape {x.shape} does not match input (N, {input_shape[0]}, {input_shape[1]}, 1)")
    return standardize(x)


def standardize(x: np.ndarray) -> np.ndarray:
    """Per-image zero mean, unit variance (flat images only centered)."""
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    std = x.std(axis=(1, 2, 3), keepdims=True)
    return (x - mean) / np.where(std > 1e-8, std, 1.0)


@dataclass
class Trace:
    """Per-layer caches and outputs retained by a forward pass."""

    caches: list = field(default_factory=list)
    outputs: dict[str, np.ndarray] = field(default_factory=dict)
    training: bool = False


def forward(net: Network, images, training: bool = False, rng=None, dropout_masks=None):
    """Return ``(probabilities, trace)``; probabilities are ``(N, K)``."""
    x = as_batch(images, net.input_shape)
    ctx = {"rng": rng if rng is not None else np.random.default_rng(0), "dropout_masks": dropout_masks or {}}
    trace = Trace(training=training)
    for layer in net.layers:
        x, cache = layer.forward(x, training, ctx)
        trace.caches.append(cache)
        trace.outputs[layer.name] = x
    return x, trace


def label_indices(net: Network, labels) -> np.ndarray:
    idx = []
    for lab in labels:
        if isinstance(lab, str):
            if lab not in net.class_names:
                raise ValueError(f"label {lab!r} not in class set {net.class_names}")
            idx.append(net.class_names.index(lab))
        else:
            lab = int(lab)
            if not 0 <= lab < len(net.class_names):
                raise ValueError(f"label index {lab} outside class set")
            idx.append(lab)
    return np.asarray(idx, dtype=np.int64)


def loss(probs: np.ndarray, labels, kind: str) -> float:
    """Mean cross-entropy with probabilities clamped to ``[eps, 1 - eps]``.

    ``labels`` are class indices; for ``binary`` index 1 is the positive class.
    """
    y = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if y.shape != (n,) or y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError("labels outside the class set")
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    if kind == "binary":
        if k != 2:
            raise ValueError("binary loss needs two-column probabilities")
        q = p[:, 1]
        return float(np.mean(-(y * np.log(q) + (1 - y) * np.log(1.0 - q))))
    if kind == "categorical":
        return float(np.mean(-np.log(p[np.arange(n), y])))
    raise ValueError(f"unknown loss kind {kind!r}")


def backward(net: Network, trace: Trace | None, labels) -> dict[tuple[str, str], np.ndarray]:
    """Gradients of the mean cross-entropy for every unfrozen parameter.

    The output activation and its loss are differentiated together, so the
    logit gradient is ``(p - y) / N``.
    """
    if trace is None or len(trace.caches) != len(net.layers):
        raise RuntimeError("backward needs the trace of a forward pass over the same network")
    probs = trace.outputs[net.layers[-1].name]
    y = label_indices(net, labels)
    n = probs.shape[0]
    if net.head_kind == "sigmoid":
        dx = ((probs[:, 1] - y) / n)[:, None]
    else:
        onehot = np.zeros_like(probs)
        onehot[np.arange(n), y] = 1.0
        dx = (probs - onehot) / n

    # deepest layer that still needs an incoming gradient
    trainable = [i for i, layer in enumerate(net.layers) if layer.param_names and not layer.frozen]
    stop = min(trainable) if trainable else len(net.layers)
    grads: dict[tuple[str, str], np.ndarray] = {}
    for i in range(len(net.layers) - 2, stop - 1, -1):
        layer = net.layers[i]
        dx, g = layer.backward(dx, trace.caches[i], need_dx=i > stop)
        if not layer.frozen:
            for pname, value in g.items():
                grads[(layer.name, pname)] = value
    return grads


def predict_proba(net: Network, images, batch_size: int = 64) -> np.ndarray:
    x = as_batch(images, net.input_shape)
    out = [forward(net, x[i : i + batch_size])[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, len(net.class_names)))


def classify(net: Network, image) -> tuple[str, float]:
    """Most probable class; ties go to the first class in declared order."""
    probs = predict_proba(net, [image])[0]
    k = int(np.argmax(probs))
    return net.class_names[k], float(probs[k])


def classify_batch(net: Network, images) -> list[tuple[str, float]]:
    probs = predict_proba(net, images)
    ks = probs.argmax(axis=1)
    return [(net.class_names[k], float(p[k])) for k, p in zip(ks, probs)]
