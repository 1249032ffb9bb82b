"""Pure-Python/numpy reference implementations of the hot kernels."""

from collections import deque

import numpy as np

_OFFSETS4 = ((-1, 0), (0, -1), (0, 1), (1, 0))
_OFFSETS8 = _OFFSETS4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


def label_components(bits, connectivity=4):
    """Flood-fill labelling; ids start at 1 in row-major order of each component's first pixel."""
    bits = np.asarray(bits, dtype=bool)
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    offsets = _OFFSETS4 if connectivity == 4 else _OFFSETS8
    h, w = bits.shape
    grid = bits.tolist()
    labels = [[0] * w for _ in range(h)]
    next_id = 0
    for r in range(h):
        row = grid[r]
        for c in range(w):
            if not row[c] or labels[r][c]:
                continue
            next_id += 1
            labels[r][c] = next_id
            queue = deque([(r, c)])
            while queue:
                y, x = queue.popleft()
                for dy, dx in offsets:
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and grid[yy][xx] and not labels[yy][xx]:
                        labels[yy][xx] = next_id
                        queue.append((yy, xx))
    return np.array(labels, dtype=np.int32).reshape(h, w)


def grow_regions(labels, epi):
    """Synchronous 4-neighbour growth of positive labels into unlabelled ``epi`` pixels.

    In each layer an eligible pixel takes the smallest label among its
    labelled neighbours as they stood at the start of the layer.
    """
    labels = np.array(labels, dtype=np.int32, copy=True)
    epi = np.asarray(epi, dtype=bool)
    big = np.iinfo(np.int32).max
    h, w = labels.shape
    while True:
        padded = np.full((h + 2, w + 2), big, dtype=np.int32)
        padded[1:-1, 1:-1] = np.where(labels > 0, labels, big)
        best = np.minimum.reduce([
            padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:],
        ])
        grow = epi & (labels == 0) & (best < big)
        if not grow.any():
            return labels
        labels[grow] = best[grow]


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution. x: (N,H,W,C), w: (3,3,C,F), b: (F,)."""
    n, h, wd, c = x.shape
    f = w.shape[3]
    xp = np.zeros((n, h + 2, wd + 2, c))
    xp[:, 1:-1, 1:-1] = x
    out = np.empty((n * h * wd, f))
    out[:] = b
    for dy in range(3):
        for dx in range(3):
            shifted = xp[:, dy:dy + h, dx:dx + wd].reshape(-1, c)
            out += shifted @ w[dy, dx]
    return out.reshape(n, h, wd, f)


def conv3x3_backward(x, w, dy_out):
    """Gradients of ``conv3x3_forward`` wrt x, w and b."""
    n, h, wd, c = x.shape
    f = w.shape[3]
    xp = np.zeros((n, h + 2, wd + 2, c))
    xp[:, 1:-1, 1:-1] = x
    g = dy_out.reshape(-1, f)
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for dy in range(3):
        for dx in range(3):
            shifted = xp[:, dy:dy + h, dx:dx + wd].reshape(-1, c)
            dw[dy, dx] = shifted.T @ g
            dxp[:, dy:dy + h, dx:dx + wd] += (g @ w[dy, dx].T).reshape(n, h, wd, c)
    db = g.sum(axis=0)
    return dxp[:, 1:-1, 1:-1].copy(), dw, db
