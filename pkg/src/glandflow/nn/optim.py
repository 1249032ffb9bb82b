"""Learning-rate schedule, plain SGD, and a seeded minibatch training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import Layer, ParamSet, init_params
from .losses import softmax_cross_entropy


class DivergenceError(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float = 1e-4
    decay_every_epochs: int = 10
    decay_factor: float = 0.5
    max_epochs: int = 2000

    def __post_init__(self):
        if self.initial_lr <= 0 or self.decay_every_epochs <= 0:
            raise ValueError("initial_lr and decay_every_epochs must be positive")
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay_factor must lie in (0, 1)")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")

    def lr(self, epoch: int) -> float:
        return self.initial_lr * self.decay_factor ** (epoch // self.decay_every_epochs)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        return cls(**{k: d[k] for k in ("initial_lr", "decay_every_epochs", "decay_factor", "max_epochs") if k in d})

    def to_dict(self) -> dict:
        return {
            "initial_lr": self.initial_lr,
            "decay_every_epochs": self.decay_every_epochs,
            "decay_factor": self.decay_factor,
            "max_epochs": self.max_epochs,
        }


# 1e-4 decayed every 10 epochs, stopping at 2000 epochs.
PAPER_SCHEDULE = TrainSchedule(1e-4, 10, 0.5, 2000)


def sgd_step(params: ParamSet, grads: dict, schedule: TrainSchedule, epoch: int) -> ParamSet:
    lr = schedule.lr(epoch)
    missing = set(grads) - set(params.tensors)
    if missing:
        raise KeyError(f"gradients for unknown parameters: {sorted(missing)}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r} at epoch {epoch}", epoch)
    new = params.copy()
    for name, g in grads.items():
        new.tensors[name] -= lr * g
    return new


def fit(params, n_items, step_fn, schedule, seed, batch_size=16, log=None):
    """Generic epoch loop.

    ``step_fn(params, batch_indices, rng)`` returns ``(losses: dict, grads)``.
    Returns the trained params and a dict of per-epoch mean loss curves.
    """
    if n_items == 0:
        raise ValueError("no training data")
    rng = np.random.default_rng(seed)
    curves: dict[str, list[float]] = {}
    for epoch in range(schedule.max_epochs):
        order = rng.permutation(n_items)
        sums: dict[str, float] = {}
        for start in range(0, n_items, batch_size):
            batch = order[start:start + batch_size]
            losses, grads = step_fn(params, batch, rng)
            for k, v in losses.items():
                if not math.isfinite(v):
                    raise DivergenceError(f"loss {k!r} became {v} at epoch {epoch}", epoch)
                sums[k] = sums.get(k, 0.0) + v * len(batch)
            params = sgd_step(params, grads, schedule, epoch)
        for k, v in sums.items():
            curves.setdefault(k, []).append(v / n_items)
        if log is not None:
            log(epoch, {k: c[-1] for k, c in curves.items()})
    return params, curves


def train(net: Layer, inputs: np.ndarray, targets: np.ndarray, schedule: TrainSchedule,
          seed: int, batch_size: int = 16):
    """Softmax cross-entropy training of ``net`` on (inputs, class targets)."""
    if len(inputs) == 0:
        raise ValueError("no training data")
    params = init_params(net, seed)

    def step(p, batch, rng):
        logits, cache = net.forward(p, inputs[batch])
        loss, dlogits = softmax_cross_entropy(logits, targets[batch])
        _, grads = net.backward(p, cache, dlogits)
        return {"loss": loss}, grads

    params, curves = fit(params, len(inputs), step, schedule, seed, batch_size)
    return params, curves.get("loss", [])
