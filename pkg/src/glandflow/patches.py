"""Sliding-window patch extraction over a gland's bounding box."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def window_starts(lo: int, hi: int, size: int, stride: int, limit: int) -> list[int]:
    """Window origins covering [lo, hi) along one axis, clamped to [0, limit - size].

    Extents no longer than ``size`` get one window centred on them; longer
    extents get origins lo, lo+stride, ... plus a final window flush with hi.
    """
    if stride < 1:
        raise ValueError("stride must be positive")
    extent = hi - lo
    if extent <= size:
        starts = [lo - (size - extent) // 2]
    else:
        starts = list(range(lo, hi - size, stride)) + [hi - size]
    top = max(limit - size, 0)
    out: list[int] = []
    for s in starts:
        s = min(max(s, 0), top)
        if s not in out:
            out.append(s)
    return out


@dataclass
class Windows:
    patches: np.ndarray      # (m, size, size, 3) uint8, non-gland pixels zeroed
    masks: np.ndarray        # (m, size, size) bool gland membership
    coverage: np.ndarray     # (m,) gland fraction of each window
    origins: np.ndarray      # (m, 2) top-left (row, col) in the tile

    @property
    def areas(self) -> np.ndarray:
        return self.masks.reshape(len(self.masks), -1).sum(axis=1)


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    h, w = arr.shape[:2]
    if h >= size and w >= size:
        return arr
    pad = [(0, max(size - h, 0)), (0, max(size - w, 0))] + [(0, 0)] * (arr.ndim - 2)
    return np.pad(arr, pad)


def extract_windows(pixels: np.ndarray, gland_mask: np.ndarray, size: int, stride: int,
                    min_coverage: float) -> Windows:
    if not gland_mask.any():
        raise ValueError("gland is empty")
    pixels = _pad_to(pixels, size)
    gland_mask = _pad_to(gland_mask, size)
    h, w = gland_mask.shape
    rows = np.flatnonzero(gland_mask.any(axis=1))
    cols = np.flatnonzero(gland_mask.any(axis=0))
    r_starts = window_starts(int(rows[0]), int(rows[-1]) + 1, size, stride, h)
    c_starts = window_starts(int(cols[0]), int(cols[-1]) + 1, size, stride, w)
    area = size * size
    kept = []
    for r in r_starts:
        for c in c_starts:
            m = gland_mask[r:r + size, c:c + size]
            cov = m.sum() / area
            if cov >= min_coverage:
                kept.append((r, c, cov))
    if not kept:
        ys, xs = np.nonzero(gland_mask)
        cy, cx = int(np.floor(ys.mean())), int(np.floor(xs.mean()))
        r = min(max(cy - size // 2, 0), h - size)
        c = min(max(cx - size // 2, 0), w - size)
        kept.append((r, c, gland_mask[r:r + size, c:c + size].sum() / area))
    patches, masks = [], []
    for r, c, _ in kept:
        m = gland_mask[r:r + size, c:c + size]
        patches.append(pixels[r:r + size, c:c + size] * m[..., None])
        masks.append(m)
    return Windows(
        patches=np.stack(patches).astype(np.uint8),
        masks=np.stack(masks),
        coverage=np.array([k[2] for k in kept], dtype=np.float64),
        origins=np.array([(k[0], k[1]) for k in kept], dtype=np.int64),
    )


def canonical_order(patches: np.ndarray) -> list[int]:
    """Content-defined ordering of a patch stack (lexicographic on raw bytes)."""
    return sorted(range(len(patches)), key=lambda i: patches[i].tobytes())
