"""Benign vs cancer classification of whole glands from sets of 32x32 patches.

Each patch is encoded to a feature vector squashed into (-1, 1), the set of
vectors is summarised per feature by a soft histogram, and fully connected
layers turn the histograms into one cancer probability per gland.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imaging import GlandClass, Magnification, Tile
from .nn import (
    Conv3x3,
    Dense,
    Flatten,
    HistogramSpec,
    MaxPool2,
    ParamSet,
    ReLU,
    Sequential,
    SetHistogramPool,
    Tanh,
    TrainSchedule,
    Upsample2,
    fit,
    init_params,
    sigmoid,
    sigmoid_cross_entropy,
)
from .nn.layers import Layer
from .nn.multitask import aux_loss
from .patches import canonical_order, extract_windows
from .segmentation import GlandInstance

DESK_SCHEDULE = TrainSchedule(initial_lr=0.05, decay_every_epochs=10, decay_factor=0.7, max_epochs=30)


@dataclass(frozen=True)
class DetectorConfig:
    patch_size: int = 32
    stride: int = 16
    min_coverage: float = 0.3
    channels: tuple[int, int, int] = (8, 16, 16)
    num_features: int = 128
    num_bins: int = 5
    hidden: int = 32
    decision_threshold: float = 0.5
    aux_weight: float = 0.5
    max_train_patches: int = 8
    batch_size: int = 8
    train_on_segmented: bool = True  # pipeline: add the segmenter's own instances to training

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class PatchSet:
    gland_id: int
    patches: np.ndarray             # (m, 32, 32, 3) uint8
    coverage: np.ndarray            # (m,)
    origins: np.ndarray             # (m, 2)
    nuclei: np.ndarray | None = None  # (m, 32, 32) bool, auxiliary target

    def __len__(self):
        return len(self.patches)

    def permuted(self, order) -> "PatchSet":
        order = list(order)
        return PatchSet(self.gland_id, self.patches[order], self.coverage[order], self.origins[order],
                        None if self.nuclei is None else self.nuclei[order])


@dataclass(frozen=True)
class CancerCall:
    gland_id: int
    p_cancer: float
    label: str  # "BN" or "CN"


def extract_patch_set(tile: Tile, gland: GlandInstance, stride: int = 16, min_coverage: float = 0.3,
                      size: int = 32, nuclei: np.ndarray | None = None) -> PatchSet:
    if tile.magnification is not Magnification.X20:
        raise ValueError("cancer detection patches are cut at 20X")
    if gland.area_px == 0:
        raise ValueError(f"gland {gland.id} is empty")
    h, w = tile.shape
    r0, c0, r1, c1 = gland.bbox
    if r0 < 0 or c0 < 0 or r1 > h or c1 > w:
        raise ValueError(f"gland {gland.id} lies outside the tile")
    mask = gland.mask(tile.shape)
    win = extract_windows(tile.pixels, mask, size, stride, min_coverage)
    nuc = None
    if nuclei is not None:
        nuc_full = np.zeros((max(h, size), max(w, size)), dtype=bool)
        nuc_full[:h, :w] = nuclei & mask
        nuc = np.stack([nuc_full[r:r + size, c:c + size] for r, c in win.origins])
    return PatchSet(gland.id, win.patches, win.coverage, win.origins, nuc)


class DetectorNet:
    """Encoder (stem + body) -> soft histogram pool -> FC head; decoder taps the stem."""

    def __init__(self, cfg: DetectorConfig):
        c1, c2, c3 = cfg.channels
        s = cfg.patch_size // 8
        self.cfg = cfg
        self.stem = Sequential(Conv3x3(3, c1), ReLU(), MaxPool2(), name="encoder.stem")
        self.body = Sequential(
            Conv3x3(c1, c2), ReLU(), MaxPool2(),
            Conv3x3(c2, c3), ReLU(), MaxPool2(),
            Flatten(), Dense(s * s * c3, cfg.num_features), Tanh(),
            name="encoder.body",
        )
        self.hist_spec = HistogramSpec(cfg.num_features, cfg.num_bins)
        self.pool = SetHistogramPool(self.hist_spec)
        self.head = Sequential(
            Dense(cfg.num_features * cfg.num_bins, cfg.hidden), ReLU(), Dense(cfg.hidden, 1), name="head",
        )
        self.decoder = Sequential(Upsample2(), Conv3x3(c1, 1), name="decoder")

    def param_specs(self):
        specs = {}
        for part in (self.stem, self.body, self.head, self.decoder):
            specs.update(part.param_specs())
        return specs

    def init(self, seed: int) -> ParamSet:
        holder = Layer()
        holder.param_specs = self.param_specs
        return init_params(holder, seed)

    def forward(self, params, x, offsets, with_aux=False):
        s, c_stem = self.stem.forward(params, x)
        f, c_body = self.body.forward(params, s)
        hist, c_pool = self.pool.forward(f, offsets)
        logits, c_head = self.head.forward(params, hist)
        aux = c_dec = None
        if with_aux:
            aux, c_dec = self.decoder.forward(params, s)
        return logits[:, 0], aux, (c_stem, c_body, c_pool, c_head, c_dec)

    def backward(self, params, cache, dlogits, daux=None):
        c_stem, c_body, c_pool, c_head, c_dec = cache
        dh, grads = self.head.backward(params, c_head, dlogits[:, None])
        df = self.pool.backward(c_pool, dh)
        ds, g = self.body.backward(params, c_body, df)
        grads.update(g)
        if daux is not None:
            ds_aux, g = self.decoder.backward(params, c_dec, daux)
            grads.update(g)
            ds = ds + ds_aux
        dx, g = self.stem.backward(params, c_stem, ds)
        grads.update(g)
        return dx, grads


def patch_input(patches: np.ndarray) -> np.ndarray:
    return patches.astype(np.float64) / 255.0


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: ParamSet

    def __post_init__(self):
        self.net = DetectorNet(self.config)

    @classmethod
    def initial(cls, cfg: DetectorConfig = DetectorConfig(), seed: int = 0) -> "DetectorModel":
        return cls(cfg, DetectorNet(cfg).init(seed))

    def p_cancer(self, ps: PatchSet) -> float:
        if ps.patches.ndim != 4 or ps.patches.shape[1:] != (self.config.patch_size, self.config.patch_size, 3):
            raise ValueError(f"patches must be (m, {self.config.patch_size}, {self.config.patch_size}, 3)")
        if len(ps) == 0:
            raise ValueError("empty patch set")
        # Canonical order makes the whole forward pass, not just the pooling, order-free.
        patches = ps.patches[canonical_order(ps.patches)]
        logit, _, _ = self.net.forward(self.params, patch_input(patches), [0, len(patches)])
        return float(sigmoid(logit)[0])


def classify_gland(model: DetectorModel, ps: PatchSet) -> CancerCall:
    p = model.p_cancer(ps)
    return CancerCall(ps.gland_id, p, "CN" if p >= model.config.decision_threshold else "BN")


def _sample_patches(ps: PatchSet, limit: int, rng):
    if len(ps) <= limit:
        return np.arange(len(ps))
    return np.sort(rng.choice(len(ps), limit, replace=False))


def train_detector(examples, schedule: TrainSchedule = DESK_SCHEDULE, seed: int = 0,
                   cfg: DetectorConfig = DetectorConfig(), log_fn=None):
    """Train on ``examples`` = [(PatchSet, is_cancer)]; returns (DetectorModel, curves).

    Loss = BCE(gland label) + aux_weight * pixelwise BCE(nuclei mask).
    """
    labels = np.array([int(bool(y)) for _, y in examples])
    if len(np.unique(labels)) < 2:
        raise ValueError("detector training needs both benign and cancer glands")
    with_aux = cfg.aux_weight > 0
    if with_aux and any(ps.nuclei is None for ps, _ in examples):
        raise ValueError("auxiliary loss requested but patch sets carry no nuclei targets")
    net = DetectorNet(cfg)
    params = net.init(seed)

    def step(p, batch, rng):
        xs, nucs, offsets = [], [], [0]
        for i in batch:
            ps = examples[i][0]
            idx = _sample_patches(ps, cfg.max_train_patches, rng)
            xs.append(ps.patches[idx])
            if with_aux:
                nucs.append(ps.nuclei[idx])
            offsets.append(offsets[-1] + len(idx))
        x = patch_input(np.concatenate(xs))
        logits, aux, cache = net.forward(p, x, offsets, with_aux)
        loss, dlogits = sigmoid_cross_entropy(logits, labels[batch].astype(np.float64))
        losses = {"loss": loss}
        daux = None
        if with_aux:
            losses["aux_loss"], daux = aux_loss(aux, np.concatenate(nucs), cfg.aux_weight)
        _, grads = net.backward(p, cache, dlogits, daux)
        return losses, grads

    params, curves = fit(params, len(examples), step, schedule, seed, cfg.batch_size, log=log_fn)
    return DetectorModel(cfg, params), curves


def detector_examples(samples, cfg: DetectorConfig = DetectorConfig(), with_nuclei: bool = True):
    """(PatchSet, is_cancer) for every annotated gland of the given synthetic samples."""
    from .imaging import darkest_decile_mask

    out = []
    for s in samples:
        nuc = darkest_decile_mask(s.tile).bits if with_nuclei else None
        for g, cls in s.instances:
            ps = extract_patch_set(s.tile, g, cfg.stride, cfg.min_coverage, cfg.patch_size, nuc)
            out.append((ps, cls != GlandClass.BN))
    return out


def examples_from_instances(sample, instances, cfg: DetectorConfig = DetectorConfig(),
                            with_nuclei: bool = True):
    """(PatchSet, is_cancer) for predicted instances of an annotated sample.

    Each instance takes the majority truth class under its pixels; instances
    lying on stroma only are skipped.
    """
    from .imaging import darkest_decile_mask

    nuc = darkest_decile_mask(sample.tile).bits if with_nuclei else None
    truth = sample.labels.labels
    out = []
    for g in instances:
        under = truth[g.pixels[:, 0], g.pixels[:, 1]]
        under = under[under > 0]
        if under.size == 0:
            continue
        cls = GlandClass(int(np.bincount(under).argmax()))
        ps = extract_patch_set(sample.tile, g, cfg.stride, cfg.min_coverage, cfg.patch_size, nuc)
        out.append((ps, cls != GlandClass.BN))
    return out


def accuracy(model: DetectorModel, examples) -> float:
    hits = [(classify_gland(model, ps).label == "CN") == bool(y) for ps, y in examples]
    return float(np.mean(hits)) if hits else float("nan")
