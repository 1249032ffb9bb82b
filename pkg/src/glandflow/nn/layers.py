"""Layers with explicit forward/backward passes over float64 NHWC arrays.

Every layer is stateless: parameters live in a :class:`ParamSet` keyed by the
layer's dotted name, so one network object can be evaluated against many
parameter sets.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels


@dataclass
class ParamSet:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    rng_seed: int = 0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.rng_seed)

    def merged(self, other: "ParamSet") -> "ParamSet":
        clash = set(self.tensors) & set(other.tensors)
        if clash:
            raise ValueError(f"duplicate parameter names: {sorted(clash)}")
        return ParamSet({**self.tensors, **other.tensors}, self.rng_seed)

    def equals(self, other: "ParamSet") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Per-name streams keep initialisation stable when layers are added or removed.
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Layer:
    name = ""

    def bind(self, name: str) -> "Layer":
        self.name = name
        return self

    def param_specs(self) -> dict[str, tuple[tuple[int, ...], int]]:
        """Map full parameter name -> (shape, fan_in); fan_in 0 means zero init."""
        return {}

    def forward(self, params: ParamSet, x: np.ndarray):
        raise NotImplementedError

    def backward(self, params: ParamSet, cache, dy: np.ndarray):
        raise NotImplementedError

    def __call__(self, params: ParamSet, x: np.ndarray) -> np.ndarray:
        return self.forward(params, x)[0]


def init_params(net: Layer, seed: int) -> ParamSet:
    """He-normal weights, zero biases, each drawn from a stream derived from (seed, name)."""
    tensors = {}
    for name, (shape, fan_in) in sorted(net.param_specs().items()):
        if fan_in:
            tensors[name] = _param_rng(seed, name).normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        else:
            tensors[name] = np.zeros(shape)
    return ParamSet(tensors, seed)


def _add_grads(total: dict, new: dict) -> dict:
    for k, v in new.items():
        total[k] = total[k] + v if k in total else v
    return total


class Identity(Layer):
    def forward(self, params, x):
        return x, None

    def backward(self, params, cache, dy):
        return dy, {}


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int):
        self.n_in, self.n_out = n_in, n_out

    def param_specs(self):
        return {
            f"{self.name}.w": ((self.n_in, self.n_out), self.n_in),
            f"{self.name}.b": ((self.n_out,), 0),
        }

    def forward(self, params, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"{self.name}: expected {self.n_in} inputs, got {x.shape[-1]}")
        return x @ params[f"{self.name}.w"] + params[f"{self.name}.b"], x

    def backward(self, params, x, dy):
        grads = {f"{self.name}.w": x.T @ dy, f"{self.name}.b": dy.sum(axis=0)}
        return dy @ params[f"{self.name}.w"].T, grads


class Conv3x3(Layer):
    """Stride-1, zero-padded 3x3 convolution on (N, H, W, C) inputs."""

    def __init__(self, c_in: int, c_out: int):
        self.c_in, self.c_out = c_in, c_out

    def param_specs(self):
        return {
            f"{self.name}.w": ((3, 3, self.c_in, self.c_out), 9 * self.c_in),
            f"{self.name}.b": ((self.c_out,), 0),
        }

    def forward(self, params, x):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ValueError(f"{self.name}: expected (N,H,W,{self.c_in}) input, got {x.shape}")
        y = _kernels.conv3x3_forward(x, params[f"{self.name}.w"], params[f"{self.name}.b"])
        return y, x

    def backward(self, params, x, dy):
        dx, dw, db = _kernels.conv3x3_backward(x, params[f"{self.name}.w"], dy)
        return dx, {f"{self.name}.w": dw, f"{self.name}.b": db}


class ReLU(Layer):
    def forward(self, params, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, params, active, dy):
        return dy * active, {}


class Tanh(Layer):
    def forward(self, params, x):
        y = np.tanh(x)
        return y, y

    def backward(self, params, y, dy):
        return dy * (1.0 - y * y), {}


class MaxPool2(Layer):
    """2x2 max pooling; ties route the gradient to the first position in scan order."""

    def forward(self, params, x):
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"{self.name}: MaxPool2 needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        idx = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(self, params, cache, dy):
        shape, idx = cache
        n, h, w, c = shape
        onehot = idx[..., None] == np.arange(4)
        blocks = onehot * dy[..., None]
        dx = blocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)
        return dx, {}


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def forward(self, params, x):
        return x.repeat(2, axis=1).repeat(2, axis=2), x.shape

    def backward(self, params, shape, dy):
        n, h, w, c = shape
        return dy.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)), {}


class Flatten(Layer):
    def forward(self, params, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, shape, dy):
        return dy.reshape(shape), {}


class Sequential(Layer):
    def __init__(self, *layers: Layer, name: str = ""):
        self.layers = list(layers)
        if name:
            self.bind(name)

    def bind(self, name):
        self.name = name
        for i, layer in enumerate(self.layers):
            layer.bind(f"{name}.{i}")
        return self

    def param_specs(self):
        specs = {}
        for layer in self.layers:
            specs.update(layer.param_specs())
        return specs

    def forward(self, params, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x, caches

    def backward(self, params, caches, dy):
        grads: dict = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            dy, g = layer.backward(params, cache, dy)
            _add_grads(grads, g)
        return dy, grads


class Residual(Layer):
    """y = x + F(x). With F = two conv3x3+ReLU layers this is the standard residual block."""

    def __init__(self, inner: Layer):
        self.inner = inner

    def bind(self, name):
        self.name = name
        self.inner.bind(f"{name}.f")
        return self

    def param_specs(self):
        return self.inner.param_specs()

    def forward(self, params, x):
        fx, cache = self.inner.forward(params, x)
        if fx.shape != x.shape:
            raise ValueError(f"{self.name}: residual branch changes shape {x.shape} -> {fx.shape}")
        return x + fx, cache

    def backward(self, params, cache, dy):
        dx, grads = self.inner.backward(params, cache, dy)
        return dy + dx, grads


def residual_block(channels: int) -> Residual:
    return Residual(Sequential(Conv3x3(channels, channels), ReLU(), Conv3x3(channels, channels), ReLU()))
