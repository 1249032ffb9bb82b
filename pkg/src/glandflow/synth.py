"""Synthetic tiles with known ground truth for desk-scale training and testing.

The textures are caricatures of the diagnostic cues: benign glands have an
undulated lumen edge and a two-layer wall of small nuclei (basal + luminal);
cancer glands have a smooth edge and larger scattered nuclei without the
basal layer. Low-grade glands have exactly one lumen, high-grade glands are
either solid or have several small lumina.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .imaging import (
    BinaryMask,
    GlandClass,
    LabelMap,
    MaskKind,
    RasterFormatError,
    Tile,
    load_labels,
    load_mask,
    load_tile,
    load_uint16,
    save_mask,
    save_tile,
    save_uint16,
)
from .segmentation import GlandInstance, instances_from_labels, instances_to_labels


class GenerationError(RuntimeError):
    pass


STROMA_RGB = (232, 172, 202)
LUMEN_RGB = (246, 240, 246)
BENIGN_CYTO_RGB = (208, 152, 206)
CANCER_CYTO_RGB = (188, 126, 192)
NUCLEUS_RGB = (72, 44, 118)
NUCLEOLUS_RGB = (40, 20, 72)

GLAND_CLASSES = (GlandClass.BN, GlandClass.LG, GlandClass.HG)


@dataclass(frozen=True)
class SynthSpec:
    tile_size: int = 128
    glands_per_tile: tuple[int, int] = (2, 4)
    class_mix: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    radius_range: tuple[int, int] = (13, 18)
    min_gap: int = 3
    noise_sigma: float = 4.0
    undulation: float = 0.22
    benign_nucleus_spacing: float = 4.0
    cancer_nucleus_area: float = 55.0
    hg_lumen_counts: tuple[int, ...] = (0, 2, 3)
    seed: int = 0

    def __post_init__(self):
        if self.tile_size < 1 or self.tile_size % 2:
            raise ValueError("tile_size must be a positive even integer")
        lo, hi = self.glands_per_tile
        if lo < 0 or hi < lo:
            raise ValueError("glands_per_tile must be a non-negative range")
        if len(self.class_mix) != 3 or any(p < 0 for p in self.class_mix) or not math.isclose(sum(self.class_mix), 1.0, abs_tol=1e-9):
            raise ValueError("class_mix must be three probabilities summing to 1")
        if self.radius_range[0] < 8 or self.radius_range[1] < self.radius_range[0]:
            raise ValueError("radius_range must start at 8 px or more")
        if any(n == 1 for n in self.hg_lumen_counts):
            raise ValueError("high-grade glands have 0 or at least 2 lumina")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("glands_per_tile", "class_mix", "radius_range", "hg_lumen_counts"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class SynthSample:
    tile: Tile
    labels: LabelMap
    instances: list[tuple[GlandInstance, GlandClass]]
    epithelium: BinaryMask
    boundary: BinaryMask
    nuclei: BinaryMask
    lumina: dict[int, int] = field(default_factory=dict)


def _polar(shape, cy, cx):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    return np.hypot(dy, dx), np.arctan2(dy, dx)


def _disc(shape, cy, cx, radius):
    r, _ = _polar(shape, cy, cx)
    return r <= radius


def boundary_band(gland: np.ndarray, width: int = 2) -> np.ndarray:
    """Gland pixels within ``width`` 4-steps of a non-gland pixel (tile edge counts as outside)."""
    inner = gland.copy()
    for _ in range(width):
        p = np.pad(inner, 1, constant_values=False)
        inner = p[1:-1, 1:-1] & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return gland & ~inner


def fill_holes(bits: np.ndarray) -> np.ndarray:
    """``bits`` plus every background pixel not 4-connected to the tile border."""
    bg = _kernels.label_components(np.pad(~bits, 1, constant_values=True), 4)
    return bits | ((bg != bg[0, 0]) & (bg != 0))[1:-1, 1:-1]


def count_holes(gland: np.ndarray) -> int:
    """Background components enclosed by the gland (4-connected background)."""
    r0, c0, r1, c1 = _bbox(gland)
    crop = np.pad(gland[r0:r1, c0:c1], 1, constant_values=False)
    bg = _kernels.label_components(~crop, 4)
    return int(bg.max()) - 1  # the padded frame is one component touching the border


def _bbox(bits):
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    return rows[0], cols[0], rows[-1] + 1, cols[-1] + 1


def _draw_gland(rng, shape, cls, cy, cx, radius, spec: SynthSpec):
    """Return (gland mask, lumen mask, nuclei mask, nucleolus mask, lumen count)."""
    r, theta = _polar(shape, cy, cx)
    outer = r <= radius * (1.0 + 0.04 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi)))
    lumen = np.zeros(shape, dtype=bool)
    lumina = 1
    if cls == GlandClass.BN:
        k = int(rng.integers(5, 8))
        lumen_r = 0.5 * radius * (1.0 + spec.undulation * np.sin(k * theta + rng.uniform(0, 2 * np.pi)))
        lumen = r < lumen_r
    elif cls == GlandClass.LG:
        lumen = r < 0.5 * radius
    else:
        lumina = int(rng.choice(spec.hg_lumen_counts))
        phase = rng.uniform(0, 2 * np.pi)
        for i in range(lumina):
            a = phase + 2 * np.pi * i / lumina
            lumen |= _disc(shape, cy + 0.45 * radius * np.sin(a), cx + 0.45 * radius * np.cos(a), 0.22 * radius)
    gland = outer & ~lumen
    # keep the main 4-connected piece so the instance is connected
    comp = _kernels.label_components(gland, 4)
    if comp.max() > 1:
        sizes = np.bincount(comp.ravel())
        sizes[0] = 0
        gland = comp == int(sizes.argmax())
    nuclei = np.zeros(shape, dtype=bool)
    nucleoli = np.zeros(shape, dtype=bool)
    if cls == GlandClass.BN:
        # two layers of small nuclei: basal (outer) and luminal (inner)
        band_outer = gland & (r >= radius - 3.0) & (r <= radius - 1.0)
        band_inner = gland & (r >= lumen_r + 1.0) & (r <= lumen_r + 2.5) & ~band_outer
        for band in (band_outer, band_inner):
            for y, x in _spaced_points(rng, band, spec.benign_nucleus_spacing):
                nuclei |= _plus(shape, y, x)
    else:
        interior = gland & ~boundary_band(gland, 2)
        target = max(1, int(gland.sum() / spec.cancer_nucleus_area))
        for y, x in _spaced_points(rng, interior, 5.0, limit=target):
            nuclei |= _disc(shape, y, x, 2.0)
            nucleoli[y, x] = True
    nuclei &= gland
    nucleoli &= nuclei
    return gland, lumen & outer, nuclei, nucleoli, (0 if cls == GlandClass.HG and lumina == 0 else lumina)


def _plus(shape, y, x):
    m = np.zeros(shape, dtype=bool)
    for dy, dx in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
        yy, xx = y + dy, x + dx
        if 0 <= yy < shape[0] and 0 <= xx < shape[1]:
            m[yy, xx] = True
    return m


def _spaced_points(rng, region, spacing, limit=None):
    cand = np.argwhere(region)
    if len(cand) == 0:
        return []
    cand = cand[rng.permutation(len(cand))]
    chosen: list[tuple[int, int]] = []
    s2 = spacing * spacing
    for y, x in cand:
        if all((y - a) ** 2 + (x - b) ** 2 >= s2 for a, b in chosen):
            chosen.append((int(y), int(x)))
            if limit is not None and len(chosen) >= limit:
                break
    return chosen


def _place(rng, spec: SynthSpec, radii):
    size = spec.tile_size
    centers = []
    for rad in radii:
        margin = rad + 2
        if 2 * margin >= size:
            return None
        for _ in range(200):
            cy, cx = rng.uniform(margin, size - margin, size=2)
            if all(math.hypot(cy - y, cx - x) >= rad + r2 + spec.min_gap + 2 for (y, x), r2 in zip(centers, radii)):
                centers.append((cy, cx))
                break
        else:
            return None
    return centers


def generate_one(spec: SynthSpec, index: int) -> SynthSample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.tile_size
    shape = (size, size)
    n = int(rng.integers(spec.glands_per_tile[0], spec.glands_per_tile[1] + 1))
    classes = [GLAND_CLASSES[i] for i in rng.choice(3, size=n, p=list(spec.class_mix))]
    radii = [float(rng.uniform(*spec.radius_range)) for _ in range(n)]
    for _ in range(20):
        centers = _place(rng, spec, radii)
        if centers is not None:
            break
    else:
        raise GenerationError(f"could not pack {n} glands into a {size}px tile")

    img = np.empty(shape + (3,), dtype=np.float64)
    img[:] = STROMA_RGB
    yy, xx = np.mgrid[0:size, 0:size]
    img += (6.0 * np.sin(0.35 * yy + 0.15 * xx + rng.uniform(0, 6.3)))[..., None]  # faint fibres
    labels = np.zeros(shape, dtype=np.uint8)
    inst_raster = np.zeros(shape, dtype=np.int32)
    nuclei = np.zeros(shape, dtype=bool)
    lumina = {}
    for gid, (cls, rad, (cy, cx)) in enumerate(zip(classes, radii, centers), start=1):
        gland, lumen, nuc, nucleoli, n_lumina = _draw_gland(rng, shape, cls, cy, cx, rad, spec)
        cyto = BENIGN_CYTO_RGB if cls == GlandClass.BN else CANCER_CYTO_RGB
        img[lumen] = LUMEN_RGB
        img[gland] = cyto
        img[nuc] = NUCLEUS_RGB
        img[nucleoli] = NUCLEOLUS_RGB
        labels[gland] = int(cls)
        inst_raster[gland] = gid
        nuclei |= nuc
        lumina[gid] = n_lumina
    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    tile_id = f"synth_{spec.seed}_{index:04d}"
    instances = instances_from_labels(inst_raster, tile_id)
    for g in instances:
        g.extra = {"class": GlandClass(int(labels[tuple(g.pixels[0])])).name}
    gland_bits = inst_raster > 0
    bnd = np.zeros(shape, dtype=bool)
    for g in instances:
        m = g.mask(shape)
        # outer perimeter only: lumen edges do not separate glands
        bnd |= boundary_band(fill_holes(m), 2) & m
    return SynthSample(
        tile=Tile(pixels, id=tile_id),
        labels=LabelMap(labels),
        instances=[(g, GlandClass[g.extra["class"]]) for g in instances],
        epithelium=BinaryMask(gland_bits, MaskKind.EPITHELIUM),
        boundary=BinaryMask(bnd, MaskKind.BOUNDARY),
        nuclei=BinaryMask(nuclei, MaskKind.NUCLEI),
        lumina=lumina,
    )


def generate(spec: SynthSpec, n_tiles: int, start: int = 0) -> list[SynthSample]:
    """Tiles ``start .. start+n_tiles-1``; tile i depends only on (spec.seed, i)."""
    return [generate_one(spec, i) for i in range(start, start + n_tiles)]


def synthetic_palette(sample: SynthSample, rng: np.random.Generator, strength: float = 0.08) -> np.ndarray:
    """A stain-shifted palette: the tile's own histogram under random per-channel gain/offset."""
    out = np.zeros((3, 256), dtype=np.int64)
    for c in range(3):
        gain = 1.0 + rng.uniform(-strength, strength)
        offset = rng.uniform(-20 * strength, 20 * strength) * 10
        vals = np.clip(np.rint(sample.tile.pixels[..., c].astype(float) * gain + offset), 0, 255).astype(int)
        out[c] = np.bincount(vals.ravel(), minlength=256)
    return out


# --------------------------------------------------------------------------
# Dataset directories
# --------------------------------------------------------------------------

def write_sample(sample: SynthSample, root) -> None:
    root = Path(root)
    (root / "tiles").mkdir(parents=True, exist_ok=True)
    (root / "truth").mkdir(parents=True, exist_ok=True)
    tid = sample.tile.id
    save_tile(sample.tile, root / "tiles" / f"{tid}.png")
    truth = root / "truth"
    save_mask(sample.labels, truth / f"{tid}.labels.png")
    save_mask(sample.epithelium, truth / f"{tid}.epithelium.png")
    save_mask(sample.boundary, truth / f"{tid}.boundary.png")
    save_mask(sample.nuclei, truth / f"{tid}.nuclei.png")
    raster = instances_to_labels([g for g, _ in sample.instances], sample.tile.shape)
    save_uint16(raster.astype(np.uint16), truth / f"{tid}.instances.png")
    doc = {
        "tile_id": tid,
        "shape": list(sample.tile.shape),
        "instances": [
            {"id": g.id, "area": g.area_px, "bbox": list(g.bbox), "class": cls.name,
             "lumina": sample.lumina.get(g.id)}
            for g, cls in sample.instances
        ],
    }
    (truth / f"{tid}.instances.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_dataset(samples, root, spec: SynthSpec | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "tiles").mkdir(exist_ok=True)
    for s in samples:
        write_sample(s, root)
    if spec is not None:
        (root / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def tile_paths(root) -> list[Path]:
    return sorted((Path(root) / "tiles").glob("*.png"))


def has_truth(root, tile_id: str) -> bool:
    return (Path(root) / "truth" / f"{tile_id}.instances.json").exists()


def read_sample(root, tile_id: str) -> SynthSample:
    root = Path(root)
    truth = root / "truth"
    tile = load_tile(root / "tiles" / f"{tile_id}.png")
    doc = json.loads((truth / f"{tile_id}.instances.json").read_text())
    raster = load_uint16(truth / f"{tile_id}.instances.png").astype(np.int32)
    by_id = {g.id: g for g in instances_from_labels(raster, tile_id)}
    instances = []
    lumina = {}
    for rec in doc["instances"]:
        g = by_id.get(rec["id"])
        if g is None:
            raise RasterFormatError(f"{tile_id}: instance {rec['id']} missing from raster")
        g.extra = {"class": rec["class"]}
        instances.append((g, GlandClass[rec["class"]]))
        lumina[g.id] = rec.get("lumina")
    return SynthSample(
        tile=tile,
        labels=load_labels(truth / f"{tile_id}.labels.png"),
        instances=instances,
        epithelium=load_mask(truth / f"{tile_id}.epithelium.png", MaskKind.EPITHELIUM),
        boundary=load_mask(truth / f"{tile_id}.boundary.png", MaskKind.BOUNDARY),
        nuclei=load_mask(truth / f"{tile_id}.nuclei.png", MaskKind.NUCLEI),
        lumina=lumina,
    )


def read_dataset(root) -> list[SynthSample]:
    return [read_sample(root, p.stem) for p in tile_paths(root)]
