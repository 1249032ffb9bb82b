"""Low vs high grade classification of cancerous glands at 10X.

A small residual CNN classifies 64x64 patches of the downsampled gland and
the patch probabilities are pooled into one call per gland, weighting each
patch by the number of gland pixels it covers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imaging import (
    AugmentSpec,
    GlandClass,
    Magnification,
    Tile,
    augment_array,
    darkest_decile_mask,
    downsample2x,
    downsample_mask2x,
)
from .nn import (
    Conv3x3,
    Dense,
    Flatten,
    MaxPool2,
    ParamSet,
    ReLU,
    Sequential,
    TrainSchedule,
    Upsample2,
    fit,
    residual_block,
    softmax,
    softmax_cross_entropy,
)
from .nn.multitask import StemNet, aux_loss
from .patches import canonical_order, extract_windows
from .segmentation import GlandInstance

DESK_SCHEDULE = TrainSchedule(initial_lr=0.05, decay_every_epochs=10, decay_factor=0.7, max_epochs=40)

@dataclass(frozen=True)
class GraderConfig:
    patch_size: int = 64
    stride: int = 32
    min_coverage: float = 0.3
    channels: int = 8
    hidden: int = 32
    aux_weight: float = 0.5
    batch_size: int = 8

    @classmethod
    def from_dict(cls, d: dict) -> "GraderConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GradePrediction:
    gland_id: int
    p_low: float
    p_high: float
    label: str  # "LG" or "HG"
    patch_probs: tuple[tuple[float, float], ...] = ()


@dataclass
class GradePatches:
    gland_id: int
    patches: np.ndarray        # (m, 64, 64, 3) uint8 at 10X
    areas: np.ndarray          # (m,) gland pixels per patch
    nuclei: np.ndarray | None = None

    def __len__(self):
        return len(self.patches)


def build_net(cfg: GraderConfig) -> StemNet:
    c = cfg.channels
    s = cfg.patch_size // 8
    stem = Sequential(Conv3x3(3, c), ReLU(), MaxPool2())
    task = Sequential(
        residual_block(c), MaxPool2(),
        residual_block(c), MaxPool2(),
        Flatten(), Dense(s * s * c, cfg.hidden), ReLU(), Dense(cfg.hidden, 2),
    )
    decoder = Sequential(Upsample2(), Conv3x3(c, 1))
    return StemNet(stem, task, decoder, "grader")


def to_10x(tile: Tile) -> Tile:
    if tile.magnification is Magnification.X10:
        return tile
    h, w = tile.shape
    if h % 2 or w % 2:
        pixels = np.pad(tile.pixels, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
        tile = Tile(pixels, tile.magnification, tile.pixel_size_um, tile.id)
    return downsample2x(tile)


def _mask_10x(mask20: np.ndarray) -> np.ndarray:
    h, w = mask20.shape
    if h % 2 or w % 2:
        mask20 = np.pad(mask20, ((0, h % 2), (0, w % 2)))
    return downsample_mask2x(mask20)


def extract_grade_patches(tile: Tile, gland: GlandInstance, cfg: GraderConfig = GraderConfig(),
                          nuclei20: np.ndarray | None = None) -> GradePatches:
    """Cut 10X windows over ``gland`` (given in 20X coordinates of ``tile``)."""
    if tile.magnification is not Magnification.X20:
        raise ValueError("grading expects the 20X tile; it is downsampled here")
    if gland.area_px == 0:
        raise ValueError(f"gland {gland.id} is empty")
    mask20 = gland.mask(tile.shape)
    mask10 = _mask_10x(mask20)
    if not mask10.any():
        # very thin glands can vanish under the 2-of-4 rule; keep any touched pixel
        rr, cc = np.nonzero(mask20)
        mask10[rr // 2, cc // 2] = True
    t10 = to_10x(tile)
    win = extract_windows(t10.pixels, mask10, cfg.patch_size, cfg.stride, cfg.min_coverage)
    nuc = None
    if nuclei20 is not None:
        n10 = _mask_10x(nuclei20 & mask20)
        size = cfg.patch_size
        padded = np.zeros((max(n10.shape[0], size), max(n10.shape[1], size)), dtype=bool)
        padded[:n10.shape[0], :n10.shape[1]] = n10
        nuc = np.stack([padded[r:r + size, c:c + size] for r, c in win.origins])
    return GradePatches(gland.id, win.patches, win.areas.astype(np.float64), nuc)


def aggregate(patch_probs: np.ndarray, areas: np.ndarray) -> np.ndarray:
    """Area-weighted mean of per-patch (P_L, P_H) rows; summed in the given order."""
    areas = np.asarray(areas, dtype=np.float64)
    total = areas.sum()
    if not total > 0:
        raise ValueError("total patch area must be positive")
    return (areas[:, None] * np.asarray(patch_probs, dtype=np.float64)).sum(axis=0) / total


@dataclass
class GraderModel:
    config: GraderConfig
    params: ParamSet

    def __post_init__(self):
        self.net = build_net(self.config)

    @classmethod
    def initial(cls, cfg: GraderConfig = GraderConfig(), seed: int = 0) -> "GraderModel":
        return cls(cfg, build_net(cfg).init(seed))

    def patch_probs(self, patches: np.ndarray) -> np.ndarray:
        """(m, 2) softmax rows (P_L, P_H)."""
        size = self.config.patch_size
        if patches.ndim != 4 or patches.shape[1:] != (size, size, 3):
            raise ValueError(f"patches must be (m, {size}, {size}, 3)")
        (logits, _), _ = self.net.forward(self.params, patches.astype(np.float64) / 255.0)
        return softmax(logits)


def grade_gland(model: GraderModel, gp: GradePatches) -> GradePrediction:
    if len(gp) == 0:
        raise ValueError("no patches to grade")
    order = canonical_order(gp.patches)
    probs = model.patch_probs(gp.patches[order])
    p_low, p_high = aggregate(probs, gp.areas[order])
    # an exact tie goes to the more severe grade
    label = "HG" if p_high >= p_low else "LG"
    return GradePrediction(gp.gland_id, float(p_low), float(p_high), label,
                           tuple((float(a), float(b)) for a, b in probs))


def grader_examples(samples, cfg: GraderConfig = GraderConfig(), with_nuclei: bool = True):
    """(GradePatches, is_hg) for every annotated cancer gland of the samples."""
    out = []
    for s in samples:
        nuc = darkest_decile_mask(s.tile).bits if with_nuclei else None
        for g, cls in s.instances:
            if cls == GlandClass.BN:
                continue
            out.append((extract_grade_patches(s.tile, g, cfg, nuc), cls == GlandClass.HG))
    return out


def train_grader(examples, schedule: TrainSchedule = DESK_SCHEDULE, seed: int = 0,
                 cfg: GraderConfig = GraderConfig(), log_fn=None):
    """Patch-level training; every patch inherits its gland's grade.

    Returns (GraderModel, curves).
    """
    xs, ys, nucs = [], [], []
    with_aux = cfg.aux_weight > 0
    for gp, is_hg in examples:
        if with_aux and gp.nuclei is None:
            raise ValueError("auxiliary loss requested but patches carry no nuclei targets")
        xs.append(gp.patches)
        ys.extend([int(bool(is_hg))] * len(gp))
        if with_aux:
            nucs.append(gp.nuclei)
    if not xs:
        raise ValueError("no cancer glands to train the grader on")
    x_all = np.concatenate(xs)
    y_all = np.array(ys, dtype=np.int64)
    if len(np.unique(y_all)) < 2:
        raise ValueError("grader training needs both LG and HG glands")
    n_all = np.concatenate(nucs) if with_aux else None
    net = build_net(cfg)
    params = net.init(seed)

    def step(p, batch, rng):
        spec = AugmentSpec.random(rng)
        x = np.stack([augment_array(x_all[i], spec) for i in batch]).astype(np.float64) / 255.0
        (logits, aux), cache = net.forward(p, x, with_aux=with_aux)
        loss, dlogits = softmax_cross_entropy(logits, y_all[batch])
        losses = {"loss": loss}
        d_aux = None
        if with_aux:
            nuc = np.stack([augment_array(n_all[i], spec) for i in batch])
            losses["aux_loss"], d_aux = aux_loss(aux, nuc, cfg.aux_weight)
        _, grads = net.backward(p, cache, (dlogits, d_aux))
        return losses, grads

    params, curves = fit(params, len(x_all), step, schedule, seed, cfg.batch_size, log=log_fn)
    return GraderModel(cfg, params), curves


def accuracy(model: GraderModel, examples) -> float:
    hits = [(grade_gland(model, gp).label == "HG") == bool(y) for gp, y in examples]
    return float(np.mean(hits)) if hits else float("nan")
