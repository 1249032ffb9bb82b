"""Raster data model, PNG I/O, augmentation and the dark-decile nuclear mask."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image


class RasterFormatError(ValueError):
    """Raised for unreadable rasters, unsupported bit depths or shape mismatches."""


class Magnification(enum.Enum):
    X20 = 20
    X10 = 10


class GlandClass(enum.IntEnum):
    ST = 0
    BN = 1
    LG = 2
    HG = 3


class MaskKind(enum.Enum):
    EPITHELIUM = "epithelium"
    BOUNDARY = "boundary"
    NUCLEI = "nuclei"
    GLAND_PIXELS = "gland_pixels"


PIXEL_SIZE_UM = {Magnification.X20: 0.5, Magnification.X10: 1.0}

# Minimum edge length for tiles entering the segmentation pipeline.
MIN_PIPELINE_TILE = 32


@dataclass(frozen=True)
class Tile:
    pixels: np.ndarray
    magnification: Magnification = Magnification.X20
    pixel_size_um: float = 0.5
    id: str = ""

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise RasterFormatError(f"tile pixels must be HxWx3, got {px.shape}")
        if px.dtype != np.uint8:
            raise RasterFormatError(f"tile pixels must be uint8, got {px.dtype}")
        if self.pixel_size_um <= 0:
            raise ValueError("pixel_size_um must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]


@dataclass(frozen=True)
class LabelMap:
    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise RasterFormatError("label map must be 2-D")
        if self.labels.size and int(self.labels.max()) > int(GlandClass.HG):
            raise RasterFormatError("label values must lie in {ST, BN, LG, HG}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    kind: MaskKind = MaskKind.GLAND_PIXELS

    def __post_init__(self):
        if self.bits.ndim != 2 or self.bits.dtype != bool:
            raise RasterFormatError("binary mask must be a 2-D bool array")

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


# --------------------------------------------------------------------------
# I/O
# --------------------------------------------------------------------------

def load_tile(path, magnification: Magnification = Magnification.X20, tile_id: str | None = None) -> Tile:
    path = Path(path)
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise RasterFormatError(f"cannot read raster {path}: {exc}") from exc
    if mode != "RGB":
        raise RasterFormatError(f"{path}: expected 8-bit RGB, got mode {mode!r}")
    return Tile(
        pixels=np.ascontiguousarray(arr, dtype=np.uint8),
        magnification=magnification,
        pixel_size_um=PIXEL_SIZE_UM[magnification],
        id=tile_id if tile_id is not None else path.stem,
    )


def save_tile(tile: Tile, path) -> None:
    Image.fromarray(np.ascontiguousarray(tile.pixels)).save(path, format="PNG")


def save_mask(mask: BinaryMask | LabelMap, path, shape: tuple[int, int] | None = None) -> None:
    """Write a binary mask (0/255) or a label map (class index) as 8-bit PNG.

    ``shape``, when given, is the owning tile's shape and is checked.
    """
    if shape is not None and tuple(mask.shape) != tuple(shape):
        raise RasterFormatError(f"mask shape {mask.shape} does not match tile shape {shape}")
    if isinstance(mask, BinaryMask):
        arr = mask.bits.astype(np.uint8) * 255
    else:
        arr = mask.labels.astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8)).save(path, format="PNG")


def _load_gray8(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise RasterFormatError(f"cannot read raster {path}: {exc}") from exc
    if mode != "L":
        raise RasterFormatError(f"{path}: expected 8-bit single channel, got mode {mode!r}")
    return np.array(arr, dtype=np.uint8)


def load_mask(path, kind: MaskKind = MaskKind.GLAND_PIXELS) -> BinaryMask:
    arr = _load_gray8(path)
    if not np.all((arr == 0) | (arr == 255)):
        raise RasterFormatError(f"{path}: binary masks hold only 0 and 255")
    return BinaryMask(arr == 255, kind)


def load_labels(path) -> LabelMap:
    return LabelMap(_load_gray8(path))


def save_uint16(arr: np.ndarray, path) -> None:
    """16-bit single-channel PNG (instance rasters, score maps)."""
    arr = np.ascontiguousarray(arr, dtype=np.uint16)
    Image.fromarray(arr.astype("<u2")).save(path, format="PNG")


def load_uint16(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except (OSError, SyntaxError) as exc:
        raise RasterFormatError(f"cannot read raster {path}: {exc}") from exc
    if mode not in ("I;16", "I", "I;16B", "L"):
        raise RasterFormatError(f"{path}: expected 16-bit single channel, got mode {mode!r}")
    return np.array(arr, dtype=np.uint16)


def load_palette(path) -> np.ndarray:
    """Palette file: three lines of 256 integers (R, G, B counts)."""
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    try:
        palette = np.array([[int(v) for v in row] for row in rows], dtype=np.int64)
    except ValueError as exc:
        raise RasterFormatError(f"{path}: palette entries must be integers") from exc
    if palette.shape != (3, 256):
        raise RasterFormatError(f"{path}: palette must be 3x256, got {palette.shape}")
    return palette


def save_palette(palette: np.ndarray, path) -> None:
    palette = np.asarray(palette, dtype=np.int64)
    if palette.shape != (3, 256):
        raise ValueError("palette must be 3x256")
    Path(path).write_text("\n".join(" ".join(str(int(v)) for v in row) for row in palette) + "\n")


def palette_of(tile: Tile) -> np.ndarray:
    return np.stack([np.bincount(tile.pixels[..., c].ravel(), minlength=256) for c in range(3)])


# --------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    rot90: int = 0          # quarter turns, counter-clockwise
    flip_h: bool = False    # mirror columns
    flip_v: bool = False    # mirror rows
    noise_sigma: float = 0.0

    @classmethod
    def random(cls, rng: np.random.Generator, noise_sigma: float = 0.0) -> "AugmentSpec":
        return cls(
            rot90=int(rng.integers(4)),
            flip_h=bool(rng.integers(2)),
            flip_v=bool(rng.integers(2)),
            noise_sigma=noise_sigma,
        )


def _geometric(arr: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    out = np.rot90(arr, k=spec.rot90 % 4, axes=(0, 1))
    if spec.flip_h:
        out = out[:, ::-1]
    if spec.flip_v:
        out = out[::-1]
    return np.ascontiguousarray(out)


def augment(tile: Tile, labels: LabelMap | None, spec: AugmentSpec, seed: int):
    """Apply rotation/flips to tile and labels alike, then seeded Gaussian noise to the tile.

    Noise is drawn from ``np.random.default_rng(seed).normal(0, sigma, pixels.shape)``
    on the geometrically transformed pixels, rounded and clamped to [0, 255].
    """
    if spec.noise_sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if labels is not None and labels.shape != tile.shape:
        raise RasterFormatError("labels and tile shapes differ")
    pixels = _geometric(tile.pixels, spec)
    if spec.noise_sigma > 0:
        noise = np.random.default_rng(seed).normal(0.0, spec.noise_sigma, size=pixels.shape)
        pixels = np.clip(np.rint(pixels + noise), 0, 255).astype(np.uint8)
    new_tile = replace(tile, pixels=pixels)
    new_labels = None if labels is None else LabelMap(_geometric(labels.labels, spec))
    return new_tile, new_labels


def augment_array(arr: np.ndarray, spec: AugmentSpec) -> np.ndarray:
    """Geometric part of ``augment`` for auxiliary rasters (masks, score targets)."""
    return _geometric(arr, spec)


def histogram_match(source: Tile, target_palette: np.ndarray) -> Tile:
    """Per-channel CDF matching of ``source`` onto a 3x256 target histogram.

    Each source intensity v maps to the smallest u with T(u) >= S(v). CDF
    comparisons are done on integer counts so the mapping is exact.
    """
    target = np.asarray(target_palette, dtype=np.int64)
    if target.shape != (3, 256):
        raise ValueError("target palette must be 3x256")
    if np.any(target < 0) or np.any(target.sum(axis=1) <= 0):
        raise ValueError("empty palette: every channel needs a positive total count")
    out = np.empty_like(source.pixels)
    for c in range(3):
        channel = source.pixels[..., c]
        src_cum = np.cumsum(np.bincount(channel.ravel(), minlength=256)).astype(np.int64)
        tgt_cum = np.cumsum(target[c])
        n_src, n_tgt = int(src_cum[-1]), int(tgt_cum[-1])
        # S(v) <= T(u)  <=>  src_cum[v] * n_tgt <= tgt_cum[u] * n_src
        lut = np.searchsorted(tgt_cum * n_src, src_cum * n_tgt, side="left")
        lut = np.minimum(lut, 255).astype(np.uint8)
        out[..., c] = lut[channel]
    return replace(source, pixels=out)


# --------------------------------------------------------------------------
# Resolution and self-supervised targets
# --------------------------------------------------------------------------

def downsample2x(tile: Tile) -> Tile:
    """20X -> 10X by 2x2 box mean, rounded half up."""
    h, w = tile.shape
    if h % 2 or w % 2:
        raise ValueError(f"downsample2x needs even dimensions, got {h}x{w}")
    if tile.magnification is not Magnification.X20:
        raise ValueError("only 20X tiles can be downsampled")
    blocks = tile.pixels.astype(np.uint16).reshape(h // 2, 2, w // 2, 2, 3).sum(axis=(1, 3))
    pixels = ((blocks + 2) // 4).astype(np.uint8)
    return replace(
        tile,
        pixels=pixels,
        magnification=Magnification.X10,
        pixel_size_um=tile.pixel_size_um * 2,
    )


def downsample_mask2x(bits: np.ndarray) -> np.ndarray:
    """A 10X pixel is set when at least two of its four 20X pixels are set."""
    h, w = bits.shape
    if h % 2 or w % 2:
        raise ValueError("mask dimensions must be even")
    return bits.reshape(h // 2, 2, w // 2, 2).sum(axis=(1, 3)) >= 2


def luminance(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.uint16).sum(axis=-1) // 3


def darkest_decile_mask(tile: Tile) -> BinaryMask:
    """Mark exactly floor(N/10) lowest-luminance pixels; ties go to earlier scan positions."""
    h, w = tile.shape
    if h * w == 0:
        raise ValueError("tile is empty")
    lum = luminance(tile.pixels).ravel()
    n_marked = (h * w) // 10
    order = np.argsort(lum, kind="stable")
    bits = np.zeros(h * w, dtype=bool)
    bits[order[:n_marked]] = True
    return BinaryMask(bits.reshape(h, w), MaskKind.NUCLEI)
