"""Central-difference gradient verification with kink detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ParamSet


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    excluded: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)
    worst: tuple[str, tuple[int, ...]] | None = None


def check_gradients(fn, arrays: dict, analytic: dict, *, h: float = 1e-5, samples: int = 20,
                    seed: int = 0, kink_tol: float = 1e-6) -> GradCheckResult:
    """Compare ``analytic`` gradients with central differences of scalar ``fn(arrays)``.

    Up to ``samples`` coordinates per array are perturbed in place. The
    relative error is |analytic - numeric| / max(1, |analytic|). A coordinate
    is treated as sitting on a kink (and excluded) when the central estimates
    at h and h/2 disagree, or when the forward/backward difference gap fails
    to halve with the step, either beyond ``kink_tol``.
    """
    rng = np.random.default_rng(seed)
    worst_err, worst = 0.0, None
    checked = 0
    excluded = []
    f0 = fn(arrays)
    for name in sorted(arrays):
        arr = arrays[name]
        grad = analytic[name]
        flat_n = arr.size
        picks = np.arange(flat_n) if flat_n <= samples else rng.choice(flat_n, samples, replace=False)
        for flat in picks:
            idx = np.unravel_index(int(flat), arr.shape)
            orig = arr[idx]
            vals = {}
            for step in (h, -h, h / 2, -h / 2):
                arr[idx] = orig + step
                vals[step] = fn(arrays)
            arr[idx] = orig
            central = (vals[h] - vals[-h]) / (2 * h)
            central_half = (vals[h / 2] - vals[-h / 2]) / h
            gap = (vals[h] - 2 * f0 + vals[-h]) / h          # forward minus backward slope
            gap_half = (vals[h / 2] - 2 * f0 + vals[-h / 2]) / (h / 2)
            a = float(grad[idx])
            scale = max(1.0, abs(a))
            if abs(central - central_half) > kink_tol * scale or abs(gap - 2 * gap_half) > kink_tol * scale:
                excluded.append((name, tuple(int(i) for i in idx)))
                continue
            err = abs(a - central) / scale
            checked += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (name, tuple(int(i) for i in idx))
    return GradCheckResult(worst_err, checked, excluded, worst)


def grad_check(net: Layer, params: ParamSet, x: np.ndarray, loss, **kwargs) -> GradCheckResult:
    """Check ``net``'s parameter and input gradients under ``loss(y) -> (value, dy)``."""
    arrays = {k: v.copy() for k, v in params.tensors.items()}
    arrays["__input__"] = np.array(x, dtype=np.float64, copy=True)

    def fn(arrs):
        p = ParamSet({k: v for k, v in arrs.items() if k != "__input__"}, params.rng_seed)
        y, _ = net.forward(p, arrs["__input__"])
        return loss(y)[0]

    p = ParamSet({k: v for k, v in arrays.items() if k != "__input__"}, params.rng_seed)
    y, cache = net.forward(p, arrays["__input__"])
    _, dy = loss(y)
    dx, grads = net.backward(p, cache, dy)
    analytic = dict(grads)
    analytic["__input__"] = dx
    return check_gradients(fn, arrays, analytic, **kwargs)
