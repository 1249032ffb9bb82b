"""Score maps -> individual gland instances.

Steps: binarize epithelium and boundary scores, subtract the boundary,
label connected components, drop small ones, and grow the survivors back
over the full epithelium.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from . import _kernels
from .imaging import (
    MIN_PIPELINE_TILE,
    BinaryMask,
    MaskKind,
    RasterFormatError,
    Tile,
    load_uint16,
    save_uint16,
)


class ScoreKind(enum.Enum):
    EPITHELIUM = "epithelium"
    BOUNDARY = "boundary"


@dataclass(frozen=True)
class ScoreMap:
    values: np.ndarray
    kind: ScoreKind

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError("score map must be 2-D")
        if v.size and (np.isnan(v).any() or v.min() < 0.0 or v.max() > 1.0):
            raise ValueError("score values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class SegmentationConfig:
    binarize_threshold: float = 0.5
    min_component_area_px: int = 64
    connectivity: int = 4

    def __post_init__(self):
        if not 0.0 < self.binarize_threshold < 1.0:
            raise ValueError("binarize_threshold must lie in (0, 1)")
        if self.min_component_area_px < 1:
            raise ValueError("min_component_area_px must be positive")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")

    @classmethod
    def from_dict(cls, d: dict) -> "SegmentationConfig":
        return cls(**{k: d[k] for k in ("binarize_threshold", "min_component_area_px", "connectivity") if k in d})


@dataclass
class GlandInstance:
    """One gland. ``pixels`` is an (N, 2) array of (row, col) in row-major order;
    ``bbox`` is (r0, c0, r1, c1) with exclusive r1/c1."""

    id: int
    pixels: np.ndarray
    tile_id: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)

    @property
    def area_px(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        if self.area_px == 0:
            raise ValueError(f"gland {self.id} is empty")
        lo = self.pixels.min(axis=0)
        hi = self.pixels.max(axis=0) + 1
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])

    @property
    def centroid(self) -> tuple[float, float]:
        m = self.pixels.mean(axis=0)
        return float(m[0]), float(m[1])

    def mask(self, shape) -> np.ndarray:
        bits = np.zeros(shape, dtype=bool)
        bits[self.pixels[:, 0], self.pixels[:, 1]] = True
        return bits


class PixelScorer(Protocol):
    def score(self, tile: Tile) -> tuple[ScoreMap, ScoreMap]: ...


class MapScorer:
    """Scorer that returns precomputed epithelium/boundary maps."""

    def __init__(self, epithelium: ScoreMap | np.ndarray, boundary: ScoreMap | np.ndarray):
        self.epithelium = epithelium if isinstance(epithelium, ScoreMap) else ScoreMap(np.asarray(epithelium, float), ScoreKind.EPITHELIUM)
        self.boundary = boundary if isinstance(boundary, ScoreMap) else ScoreMap(np.asarray(boundary, float), ScoreKind.BOUNDARY)

    def score(self, tile):
        return self.epithelium, self.boundary

    @classmethod
    def from_files(cls, epithelium_path, boundary_path) -> "MapScorer":
        return cls(load_score_map(epithelium_path, ScoreKind.EPITHELIUM), load_score_map(boundary_path, ScoreKind.BOUNDARY))


class ConstantScorer:
    def __init__(self, value: float = 0.0):
        self.value = value

    def score(self, tile):
        h, w = tile.shape
        return (ScoreMap(np.full((h, w), self.value), ScoreKind.EPITHELIUM),
                ScoreMap(np.full((h, w), self.value), ScoreKind.BOUNDARY))


def load_score_map(path, kind: ScoreKind) -> ScoreMap:
    raw = load_uint16(path)
    return ScoreMap(raw.astype(np.float64) / 65535.0, kind)


def save_score_map(score: ScoreMap, path) -> None:
    save_uint16(np.rint(score.values * 65535.0).astype(np.uint16), path)


# --------------------------------------------------------------------------

def score_pixels(tile: Tile, scorer: PixelScorer) -> tuple[ScoreMap, ScoreMap]:
    epi, bnd = scorer.score(tile)
    if epi.shape != tile.shape or bnd.shape != tile.shape:
        raise RasterFormatError(f"scorer output {epi.shape}/{bnd.shape} does not match tile {tile.shape}")
    return epi, bnd


def subtract_boundary(epi: ScoreMap, bnd: ScoreMap, cfg: SegmentationConfig = SegmentationConfig()) -> BinaryMask:
    if epi.shape != bnd.shape:
        raise ValueError("epithelium and boundary maps differ in shape")
    t = cfg.binarize_threshold
    return BinaryMask((epi.values >= t) & ~(bnd.values >= t), MaskKind.GLAND_PIXELS)


def instances_from_labels(labels: np.ndarray, tile_id: str = "") -> list[GlandInstance]:
    """Split a positive-id raster into instances (pixels row-major within each)."""
    flat = labels.ravel()
    nz = np.flatnonzero(flat)
    if nz.size == 0:
        return []
    ids = flat[nz]
    order = np.argsort(ids, kind="stable")
    nz, ids = nz[order], ids[order]
    uniq, starts = np.unique(ids, return_index=True)
    bounds = list(starts) + [len(nz)]
    w = labels.shape[1]
    out = []
    for gid, a, b in zip(uniq, bounds[:-1], bounds[1:]):
        lin = nz[a:b]
        out.append(GlandInstance(int(gid), np.stack([lin // w, lin % w], axis=1), tile_id))
    return out


def instances_to_labels(instances, shape) -> np.ndarray:
    labels = np.zeros(shape, dtype=np.int32)
    for inst in instances:
        r, c = inst.pixels[:, 0], inst.pixels[:, 1]
        if np.any(labels[r, c] != 0):
            raise ValueError("instances overlap")
        labels[r, c] = inst.id
    return labels


def connected_components(mask: BinaryMask, cfg: SegmentationConfig = SegmentationConfig(),
                         tile_id: str = "") -> list[GlandInstance]:
    labels = _kernels.label_components(mask.bits, cfg.connectivity)
    return instances_from_labels(labels, tile_id)


def remove_small(instances, cfg: SegmentationConfig = SegmentationConfig()) -> list[GlandInstance]:
    return [g for g in instances if g.area_px >= cfg.min_component_area_px]


def region_grow(instances, epi_mask: BinaryMask) -> list[GlandInstance]:
    """Grow instances layer by layer over unassigned epithelium (smallest id wins ties)."""
    if not instances:
        return []
    shape = epi_mask.shape
    labels = instances_to_labels(instances, shape)
    if np.any((labels > 0) & ~epi_mask.bits):
        raise ValueError("instance pixel lies outside the epithelium mask")
    grown = _kernels.grow_regions(labels, epi_mask.bits)
    by_id = {g.id: g for g in _grown_instances(grown, instances)}
    return [by_id[g.id] for g in instances]


def _grown_instances(labels, originals):
    tile_ids = {g.id: g.tile_id for g in originals}
    extras = {g.id: g.extra for g in originals}
    out = instances_from_labels(labels)
    for g in out:
        g.tile_id = tile_ids[g.id]
        g.extra = dict(extras[g.id])
    return out


def segment_tile(tile: Tile, scorer: PixelScorer, cfg: SegmentationConfig = SegmentationConfig()) -> list[GlandInstance]:
    h, w = tile.shape
    if h < MIN_PIPELINE_TILE or w < MIN_PIPELINE_TILE:
        raise RasterFormatError(f"tile {tile.id!r} is {h}x{w}; pipeline tiles need at least {MIN_PIPELINE_TILE}px per side")
    epi, bnd = score_pixels(tile, scorer)
    seeds = remove_small(connected_components(subtract_boundary(epi, bnd, cfg), cfg, tile.id), cfg)
    epi_mask = BinaryMask(epi.values >= cfg.binarize_threshold, MaskKind.EPITHELIUM)
    return region_grow(seeds, epi_mask)


# --------------------------------------------------------------------------
# Instance export: 16-bit id raster + JSON sidecar
# --------------------------------------------------------------------------

def write_instances(instances, shape, raster_path, sidecar_path, tile_id: str = "") -> None:
    labels = instances_to_labels(instances, shape)
    if labels.max(initial=0) > 65535:
        raise ValueError("too many instances for a 16-bit raster")
    save_uint16(labels.astype(np.uint16), raster_path)
    records = []
    for g in sorted(instances, key=lambda g: g.id):
        rec = {"id": g.id, "area": g.area_px, "bbox": list(g.bbox)}
        rec.update(g.extra)
        records.append(rec)
    doc = {"tile_id": tile_id, "shape": list(shape), "instances": records}
    Path(sidecar_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_instances(raster_path, sidecar_path) -> tuple[list[GlandInstance], dict]:
    labels = load_uint16(raster_path).astype(np.int32)
    doc = json.loads(Path(sidecar_path).read_text())
    tile_id = doc.get("tile_id", "")
    instances = {g.id: g for g in instances_from_labels(labels, tile_id)}
    out = []
    for rec in doc["instances"]:
        g = instances.get(rec["id"])
        if g is None:
            raise RasterFormatError(f"sidecar lists instance {rec['id']} absent from raster")
        g.extra = {k: v for k, v in rec.items() if k not in ("id", "area", "bbox")}
        out.append(g)
    return out, doc
