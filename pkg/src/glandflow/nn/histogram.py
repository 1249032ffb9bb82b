"""Soft (triangular-kernel) histogram pooling over sets of feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class HistogramSpec:
    num_features: int = 128
    num_bins: int = 5
    bin_centers: tuple[float, ...] | None = None
    bin_width: float | None = None

    def __post_init__(self):
        if self.num_features < 1 or self.num_bins < 1:
            raise ValueError("num_features and num_bins must be positive")
        if self.bin_centers is None:
            if self.num_bins == 1:
                centers, width = (0.0,), 1.0
            else:
                centers = tuple(np.linspace(-1.0, 1.0, self.num_bins).tolist())
                width = 2.0 / (self.num_bins - 1)
            object.__setattr__(self, "bin_centers", centers)
            if self.bin_width is None:
                object.__setattr__(self, "bin_width", width)
        if len(self.bin_centers) != self.num_bins:
            raise ValueError("need one center per bin")
        if np.any(np.diff(self.bin_centers) <= 0):
            raise ValueError("bin centers must be strictly increasing")
        if self.bin_width is None or self.bin_width <= 0:
            raise ValueError("bin width must be positive")

    @property
    def centers(self) -> np.ndarray:
        return np.asarray(self.bin_centers, dtype=np.float64)


def _memberships(features: np.ndarray, spec: HistogramSpec):
    dist = features[:, :, None] - spec.centers          # (m, n, k)
    member = np.maximum(0.0, 1.0 - np.abs(dist) / spec.bin_width)
    return dist, member


def soft_histogram_pool(features: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    """Pool ``m`` feature vectors of length ``n`` into an (n, k) histogram.

    Entry (f, j) is the mean hat-kernel membership of feature f in bin j.
    Memberships are sorted along the set axis before summation, so any
    permutation of the rows gives a bit-identical result.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty (m, n) array")
    if features.shape[1] != spec.num_features:
        raise ValueError(f"expected {spec.num_features} features, got {features.shape[1]}")
    _, member = _memberships(features, spec)
    return np.sort(member, axis=0).sum(axis=0) / features.shape[0]


def soft_histogram_pool_backward(features: np.ndarray, spec: HistogramSpec, dout: np.ndarray) -> np.ndarray:
    """Gradient wrt ``features`` given dL/d(histogram) of shape (n, k)."""
    dist, member = _memberships(features, spec)
    # Derivative of the hat is -sign(dist)/w inside the support, 0 outside (and at the apex).
    slope = np.where(member > 0, -np.sign(dist) / spec.bin_width, 0.0)
    return (slope * dout[None]).sum(axis=2) / features.shape[0]


class SetHistogramPool:
    """Batched pooling over consecutive row-groups of a feature matrix.

    ``offsets`` has G+1 entries; set g owns rows offsets[g]:offsets[g+1].
    Output is (G, n*k), flattened feature-major.
    """

    def __init__(self, spec: HistogramSpec):
        self.spec = spec

    def forward(self, features: np.ndarray, offsets):
        out = np.stack([
            soft_histogram_pool(features[a:b], self.spec).ravel()
            for a, b in zip(offsets[:-1], offsets[1:])
        ])
        return out, (features, offsets)

    def backward(self, cache, dy: np.ndarray) -> np.ndarray:
        features, offsets = cache
        n, k = self.spec.num_features, self.spec.num_bins
        dx = np.zeros_like(features)
        for g, (a, b) in enumerate(zip(offsets[:-1], offsets[1:])):
            dx[a:b] = soft_histogram_pool_backward(features[a:b], self.spec, dy[g].reshape(n, k))
        return dx
