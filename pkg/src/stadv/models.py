"""Classifiers: the three MNIST architectures and a small residual network.

Layers are plain objects with a parameter manifest and a forward method; a
:class:`Classifier` owns the ordered layer list plus a name -> ndarray weight
map. Images enter as (N, H, W, C) batches and are moved to (N, C, H, W)
internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Conv",
    "Dense",
    "Relu",
    "Dropout",
    "ResidualBlock",
    "GlobalAvgPool",
    "Classifier",
    "build_model",
    "predict",
    "MODEL_NAMES",
]


class Layer:
    name = ""

    def params(self, in_shape):
        """Mapping of parameter suffix -> (shape, fan_in) for an input (C,H,W)."""
        return {}

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x, p, train, rng):
        raise NotImplementedError

    def describe(self):
        return type(self).__name__


@dataclass
class Conv(Layer):
    filters: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0

    def params(self, in_shape):
        c = in_shape[0]
        fan_in = c * self.kh * self.kw
        return {"w": ((self.filters, c, self.kh, self.kw), fan_in), "b": ((self.filters,), 0)}

    def out_shape(self, in_shape):
        c, h, w = in_shape
        hp, wp = h + 2 * self.padding, w + 2 * self.padding
        if hp < self.kh or wp < self.kw:
            raise T.ShapeError(f"{self.describe()} geometry", in_shape)
        return (self.filters, (hp - self.kh) // self.stride + 1, (wp - self.kw) // self.stride + 1)

    def forward(self, x, p, train, rng):
        y = T.conv2d(x, p["w"], self.stride, self.padding)
        return T.bias_add(y, p["b"], axis=1)

    def describe(self):
        return f"Conv({self.filters},{self.kh},{self.kw})"


@dataclass
class Dense(Layer):
    units: int

    def params(self, in_shape):
        fan_in = int(np.prod(in_shape))
        return {"w": ((fan_in, self.units), fan_in), "b": ((self.units,), 0)}

    def out_shape(self, in_shape):
        return (self.units,)

    def forward(self, x, p, train, rng):
        if x.ndim != 2:
            x = x.reshape(x.shape[0], -1)
        return T.bias_add(x @ p["w"], p["b"], axis=1)

    def describe(self):
        return f"FC({self.units})"


@dataclass
class Relu(Layer):
    def forward(self, x, p, train, rng):
        return T.relu(x)


@dataclass
class Dropout(Layer):
    rate: float

    def forward(self, x, p, train, rng):
        if not train or self.rate == 0:
            return x
        keep = rng.random(x.shape) >= self.rate
        return x * (keep / (1.0 - self.rate))

    def describe(self):
        return f"Dropout({self.rate})"


@dataclass
class ResidualBlock(Layer):
    """relu(conv3x3 -> relu -> conv3x3 + shortcut); 1x1 projection when shapes change."""

    filters: int
    stride: int = 1

    def _project(self, in_shape):
        return self.stride != 1 or in_shape[0] != self.filters

    def params(self, in_shape):
        c = in_shape[0]
        f = self.filters
        out = {
            "w1": ((f, c, 3, 3), c * 9),
            "b1": ((f,), 0),
            "w2": ((f, f, 3, 3), f * 9),
            "b2": ((f,), 0),
        }
        if self._project(in_shape):
            out["ws"] = ((f, c, 1, 1), c)
        return out

    def out_shape(self, in_shape):
        c, h, w = in_shape
        return (self.filters, (h + 2 - 3) // self.stride + 1, (w + 2 - 3) // self.stride + 1)

    def forward(self, x, p, train, rng):
        y = T.relu(T.bias_add(T.conv2d(x, p["w1"], self.stride, 1), p["b1"]))
        y = T.bias_add(T.conv2d(y, p["w2"], 1, 1), p["b2"])
        short = T.conv2d(x, p["ws"], self.stride, 0) if "ws" in p else x
        return T.relu(y + short)

    def describe(self):
        return f"Residual({self.filters},stride={self.stride})"


@dataclass
class GlobalAvgPool(Layer):
    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x, p, train, rng):
        return T.avgpool2d(x, x.shape[2], stride=1).reshape(x.shape[0], x.shape[1])

    def describe(self):
        return "GlobalAvgPool"


@dataclass
class Classifier:
    """An architecture plus its weights.

    ``forward`` returns pre-softmax logits. Weights are float64 arrays keyed
    ``"<index>.<suffix>"``; geometry is validated when the object is built.
    """

    name: str
    layers: list
    input_shape: tuple  # (H, W, C)
    num_classes: int = 10
    pixel_range: tuple = (0.0, 1.0)
    weights: dict = field(default_factory=dict)
    notes: str = ""

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self._manifest = {}
        h, w, c = self.input_shape
        shape = (c, h, w)
        for i, layer in enumerate(self.layers):
            for suffix, (pshape, fan_in) in layer.params(shape).items():
                self._manifest[f"{i}.{suffix}"] = (tuple(pshape), fan_in)
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise T.ShapeError(f"{self.name}: final layer must emit {self.num_classes} logits", shape)
        for key, value in self.weights.items():
            if key not in self._manifest or self._manifest[key][0] != np.shape(value):
                raise T.ShapeError(f"{self.name}: weight {key}", np.shape(value))

    @property
    def manifest(self):
        """Parameter name -> shape, in layer order."""
        return {k: v[0] for k, v in self._manifest.items()}

    def parameter_count(self):
        return int(sum(np.prod(s) for s in self.manifest.values()))

    def init_weights(self, seed=0):
        """Fan-in scaled normal init (He) for weights, zeros for biases."""
        rng = np.random.default_rng(seed)
        self.weights = {}
        for key, (shape, fan_in) in self._manifest.items():
            if fan_in:
                self.weights[key] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            else:
                self.weights[key] = np.zeros(shape)
        return self

    def summary(self):
        """Human-readable layer table; a conv/dense followed by ReLU reads 'X + Relu'."""
        rows = []
        for layer in self.layers:
            if isinstance(layer, Relu) and rows:
                rows[-1] += " + Relu"
            else:
                rows.append(layer.describe())
        rows[-1] += " + Softmax"
        return rows

    def forward(self, x, train=False, rng=None, params=None):
        """Logits for an (N,H,W,C) batch.

        ``params`` maps weight names to :class:`Tensor` objects when weight
        gradients are wanted; otherwise weights enter as constants.
        """
        x = T.as_tensor(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(f"{self.name} input (expected N x {self.input_shape})", x.shape)
        if train and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        if params is None:
            params = {k: Tensor(v) for k, v in self.weights.items()}
        out = x.transpose(0, 3, 1, 2)
        for i, layer in enumerate(self.layers):
            prefix = f"{i}."
            p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
            out = layer.forward(out, p, train, rng)
        return out

    def logits(self, x, mode="eval", rng=None):
        """Plain-array logits for an (N,H,W,C) batch or a single (H,W,C) image."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        out = self.forward(x[None] if single else x, train=mode == "train", rng=rng).data
        return out[0] if single else out

    def copy(self):
        clone = Classifier(
            self.name,
            list(self.layers),
            self.input_shape,
            self.num_classes,
            self.pixel_range,
            {},
            self.notes,
        )
        clone.weights = {k: v.copy() for k, v in self.weights.items()}
        return clone


def predict(model, x):
    """Argmax of eval-mode logits; ties go to the lowest class index.

    Accepts a single (H,W,C) image (returns int) or a batch (returns array).
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    batch = x[None] if single else x
    labels = []
    for start in range(0, len(batch), 256):
        z = model.forward(batch[start : start + 256]).data
        labels.append(np.argmax(z, axis=1))
    out = np.concatenate(labels) if labels else np.zeros(0, dtype=np.intp)
    return int(out[0]) if single else out


def _mnist_a():
    return [
        Conv(64, 5, 5), Relu(),
        Conv(64, 5, 5), Relu(),
        Dropout(0.25),
        Dense(128), Relu(),
        Dropout(0.5),
        Dense(10),
    ]  # fmt: skip


def _mnist_b():
    return [
        Conv(64, 8, 8), Relu(),
        Dropout(0.2),
        Conv(128, 6, 6), Relu(),
        Conv(128, 5, 5), Relu(),
        Dropout(0.5),
        Dense(10),
    ]  # fmt: skip


def _mnist_c():
    return [
        Conv(128, 3, 3), Relu(),
        Conv(64, 3, 3), Relu(),
        Dropout(0.25),
        Dense(128), Relu(),
        Dropout(0.5),
        Dense(10),
    ]  # fmt: skip


def _resnet_small():
    return [
        Conv(16, 3, 3, padding=1), Relu(),
        ResidualBlock(16, 1),
        ResidualBlock(32, 2),
        ResidualBlock(64, 2),
        GlobalAvgPool(),
        Dense(10),
    ]  # fmt: skip


_BUILDERS = {
    "A": (_mnist_a, (28, 28, 1), ""),
    "B": (_mnist_b, (28, 28, 1), ""),
    "C": (_mnist_c, (28, 28, 1), ""),
    "resnet_small": (
        _resnet_small,
        (32, 32, 3),
        "desk-scale stand-in for ResNet32 / wide ResNet34 on CIFAR-10",
    ),
}

MODEL_NAMES = tuple(_BUILDERS)


def build_model(name, seed=0):
    """Construct a named architecture with freshly initialised weights."""
    if name not in _BUILDERS:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    make, shape, notes = _BUILDERS[name]
    return Classifier(name, make(), shape, notes=notes).init_weights(seed)
