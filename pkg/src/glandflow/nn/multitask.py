"""Encoder stem shared by a task branch and an auxiliary nuclear-mask decoder."""

from __future__ import annotations

import numpy as np

from .layers import Layer, ParamSet, init_params
from .losses import sigmoid_cross_entropy


class StemNet(Layer):
    """``task(stem(x))`` with an optional side output ``decoder(stem(x))``.

    The decoder emits one logit per input pixel and is trained against a
    binary nuclei mask; its loss is added with weight ``aux_weight``.
    """

    def __init__(self, stem: Layer, task: Layer, decoder: Layer, name: str):
        self.stem, self.task, self.decoder = stem, task, decoder
        self.bind(name)

    def bind(self, name):
        self.name = name
        self.stem.bind(f"{name}.stem")
        self.task.bind(f"{name}.task")
        self.decoder.bind(f"{name}.decoder")
        return self

    def param_specs(self):
        return {**self.stem.param_specs(), **self.task.param_specs(), **self.decoder.param_specs()}

    def init(self, seed: int) -> ParamSet:
        return init_params(self, seed)

    def forward(self, params, x, with_aux: bool = False):
        s, c_stem = self.stem.forward(params, x)
        y, c_task = self.task.forward(params, s)
        aux, c_dec = (None, None)
        if with_aux:
            aux, c_dec = self.decoder.forward(params, s)
        return (y, aux), (c_stem, c_task, c_dec)

    def backward(self, params, cache, dy):
        d_task, d_aux = dy
        c_stem, c_task, c_dec = cache
        ds, grads = self.task.backward(params, c_task, d_task)
        if d_aux is not None:
            ds_aux, g_dec = self.decoder.backward(params, c_dec, d_aux)
            ds = ds + ds_aux
            grads.update(g_dec)
        dx, g_stem = self.stem.backward(params, c_stem, ds)
        grads.update(g_stem)
        return dx, grads


def aux_loss(aux_logits: np.ndarray, nuclei: np.ndarray, weight: float):
    """Weighted pixelwise BCE between decoder logits (N,H,W,1) and a nuclei mask (N,H,W)."""
    loss, grad = sigmoid_cross_entropy(aux_logits[..., 0], nuclei.astype(np.float64))
    return weight * loss, (weight * grad)[..., None]
