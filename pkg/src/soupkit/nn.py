"""Layers and the small classifier architectures the rest of the library uses.

Architectures are registered by name so checkpoints can be rebuilt from their
metadata alone. Parameter initialization is deterministic given the build
seed; all parameters are created in a fixed construction order, which fixes
the parameter-vector schema for a given architecture and input shape.
"""

import math

import numpy as np

from . import tensor as T
from .rng import derive_rng


class Layer:
    def forward(self, x):
        raise NotImplementedError

    def named_parameters(self):
        return []

    def __call__(self, x):
        return self.forward(x)


class Linear(Layer):
    def __init__(self, in_features, out_features, rng):
        bound = math.sqrt(6.0 / in_features)
        w = rng.uniform(-bound, bound, size=(in_features, out_features))
        self.weight = T.Tensor(w, requires_grad=True)
        self.bias = T.Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x):
        return T.add(T.matmul(x, self.weight), self.bias)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, ksize, rng, stride=1, padding=0):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * ksize * ksize
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(out_channels, in_channels, ksize, ksize))
        self.weight = T.Tensor(w, requires_grad=True)
        self.bias = T.Tensor(np.zeros((out_channels, 1, 1)), requires_grad=True)

    def forward(self, x):
        return T.add(T.conv2d(x, self.weight, self.stride, self.padding), self.bias)

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class ReLU(Layer):
    def forward(self, x):
        return T.relu(x)


class AvgPool2d(Layer):
    def __init__(self, k):
        self.k = k

    def forward(self, x):
        return T.avg_pool2d(x, self.k)


class Flatten(Layer):
    def forward(self, x):
        return T.flatten(x)


class Model:
    """A feedforward stack with stable parameter naming."""

    def __init__(self, arch, input_shape, n_classes, named_layers):
        self.arch = arch
        self.input_shape = tuple(int(v) for v in input_shape)
        self.n_classes = int(n_classes)
        self.named_layers = list(named_layers)

    def forward(self, x):
        for _, layer in self.named_layers:
            x = layer(x)
        return x

    def __call__(self, x):
        return self.forward(x)

    def named_parameters(self):
        out = []
        for lname, layer in self.named_layers:
            for pname, tensor in layer.named_parameters():
                out.append(("%s.%s" % (lname, pname), tensor))
        return out

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def n_parameters(self):
        return sum(p.size for _, p in self.named_parameters())


def _build_linear(input_shape, n_classes, rng):
    c, h, w = input_shape
    return [
        ("flatten", Flatten()),
        ("fc1", Linear(c * h * w, n_classes, rng)),
    ]


def _build_mlp64(input_shape, n_classes, rng):
    c, h, w = input_shape
    return [
        ("flatten", Flatten()),
        ("fc1", Linear(c * h * w, 64, rng)),
        ("act1", ReLU()),
        ("fc2", Linear(64, n_classes, rng)),
    ]


def _build_cnn8(input_shape, n_classes, rng):
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise ValueError("cnn8 needs spatial dims divisible by 4, got %s"
                         % (tuple(input_shape),))
    return [
        ("conv1", Conv2d(c, 8, 3, rng, padding=1)),
        ("act1", ReLU()),
        ("pool1", AvgPool2d(2)),
        ("conv2", Conv2d(8, 16, 3, rng, padding=1)),
        ("act2", ReLU()),
        ("pool2", AvgPool2d(2)),
        ("flatten", Flatten()),
        ("fc1", Linear(16 * (h // 4) * (w // 4), n_classes, rng)),
    ]


ARCHITECTURES = {
    "linear": _build_linear,
    "mlp64": _build_mlp64,
    "cnn8": _build_cnn8,
}


def build_model(arch, input_shape, n_classes, seed=0):
    """Construct a named architecture with seed-deterministic initialization."""
    if arch not in ARCHITECTURES:
        raise ValueError("unknown architecture %r (known: %s)"
                         % (arch, ", ".join(sorted(ARCHITECTURES))))
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3:
        raise ValueError("input_shape must be (channels, height, width), got %s"
                         % (input_shape,))
    rng = derive_rng(seed, "init", arch)
    layers = ARCHITECTURES[arch](input_shape, n_classes, rng)
    return Model(arch, input_shape, n_classes, layers)
