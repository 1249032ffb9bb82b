"""Reference pixel scorer: two identically structured small conv nets.

One net scores epithelium vs stroma, the other gland boundary vs not. Each
is a U-net-like stack (full-resolution conv, a pooled residual branch that
is upsampled back, and a 2-class pixel head) trained with pixelwise
cross-entropy plus the auxiliary nuclear-mask loss.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .imaging import AugmentSpec, Tile, augment_array, darkest_decile_mask
from .nn import (
    Conv3x3,
    MaxPool2,
    ParamSet,
    ReLU,
    Residual,
    Sequential,
    TrainSchedule,
    Upsample2,
    fit,
    softmax,
    softmax_cross_entropy,
)
from .nn.multitask import StemNet, aux_loss
from .segmentation import ScoreKind, ScoreMap

log = logging.getLogger(__name__)

TARGETS = ("epithelium", "boundary")

DESK_SCHEDULE = TrainSchedule(initial_lr=0.05, decay_every_epochs=10, decay_factor=0.8, max_epochs=30)


@dataclass(frozen=True)
class ScorerConfig:
    channels: int = 8
    crop: int = 64              # training patch edge (256 at full scale)
    aux_weight: float = 0.5
    batch_size: int = 4
    boundary_weight: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "ScorerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self):
        return asdict(self)


def build_net(cfg: ScorerConfig, name: str) -> StemNet:
    c = cfg.channels
    stem = Sequential(Conv3x3(3, c), ReLU())
    task = Sequential(
        Residual(Sequential(MaxPool2(), Conv3x3(c, c), ReLU(), Conv3x3(c, c), ReLU(), Upsample2())),
        Conv3x3(c, c), ReLU(),
        Conv3x3(c, 2),
    )
    decoder = Sequential(Conv3x3(c, 1))
    return StemNet(stem, task, decoder, name)


def tile_input(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 255.0


@dataclass
class ConvScorer:
    config: ScorerConfig
    params: ParamSet

    def __post_init__(self):
        self.nets = {t: build_net(self.config, t) for t in TARGETS}

    def probabilities(self, pixels: np.ndarray) -> dict[str, np.ndarray]:
        x = tile_input(pixels)[None]
        out = {}
        for t, net in self.nets.items():
            (logits, _), _ = net.forward(self.params, x)
            out[t] = softmax(logits[0])[..., 1]
        return out

    def score(self, tile: Tile) -> tuple[ScoreMap, ScoreMap]:
        h, w = tile.shape
        # pooling inside the residual branch needs even sizes
        ph, pw = h + h % 2, w + w % 2
        pixels = np.pad(tile.pixels, ((0, ph - h), (0, pw - w), (0, 0)), mode="edge")
        probs = self.probabilities(pixels)
        return (ScoreMap(np.clip(probs["epithelium"][:h, :w], 0.0, 1.0), ScoreKind.EPITHELIUM),
                ScoreMap(np.clip(probs["boundary"][:h, :w], 0.0, 1.0), ScoreKind.BOUNDARY))


def _crops(samples, darks, cfg: ScorerConfig, batch, rng, target: str):
    xs, ys, nucs = [], [], []
    for i in batch:
        s = samples[i]
        h, w = s.tile.shape
        size = min(cfg.crop, h, w)
        size -= size % 2
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        spec = AugmentSpec.random(rng)
        sl = (slice(r, r + size), slice(c, c + size))
        mask = s.epithelium.bits if target == "epithelium" else s.boundary.bits
        xs.append(augment_array(s.tile.pixels[sl], spec))
        ys.append(augment_array(mask[sl], spec))
        nucs.append(augment_array(darks[i][sl], spec))
    return tile_input(np.stack(xs)), np.stack(ys).astype(np.int64), np.stack(nucs)


def train_scorer(samples, schedule: TrainSchedule = DESK_SCHEDULE, seed: int = 0,
                 cfg: ScorerConfig = ScorerConfig(), log_fn=None):
    """Train both nets on synthetic samples; returns (ConvScorer, {target: curves})."""
    if not samples:
        raise ValueError("no training tiles")
    darks = [darkest_decile_mask(s.tile).bits for s in samples]
    nets = {t: build_net(cfg, t) for t in TARGETS}
    params = ParamSet({}, seed)
    for t in TARGETS:
        params = params.merged(nets[t].init(seed))
    all_curves = {}
    for k, t in enumerate(TARGETS):
        net = nets[t]
        sub = ParamSet({n: v for n, v in params.tensors.items() if n.startswith(f"{t}.")}, seed)
        boundary_w = cfg.boundary_weight if t == "boundary" else 1.0

        def step(p, batch, rng, net=net, t=t, boundary_w=boundary_w):
            x, y, nuc = _crops(samples, darks, cfg, batch, rng, t)
            with_aux = cfg.aux_weight > 0
            (logits, aux), cache = net.forward(p, x, with_aux=with_aux)
            targets = y.reshape(-1)
            weights = None if boundary_w == 1.0 else np.where(targets == 1, boundary_w, 1.0)
            loss, dflat = softmax_cross_entropy(logits.reshape(-1, 2), targets, weights)
            losses = {"loss": loss}
            d_aux = None
            if with_aux:
                losses["aux_loss"], d_aux = aux_loss(aux, nuc, cfg.aux_weight)
            _, grads = net.backward(p, cache, (dflat.reshape(logits.shape), d_aux))
            return losses, grads

        trained, curves = fit(sub, len(samples), step, schedule, seed + k, cfg.batch_size,
                              log=log_fn and (lambda e, c, t=t: log_fn(t, e, c)))
        params.tensors.update(trained.tensors)
        all_curves[t] = curves
    return ConvScorer(cfg, params), all_curves


def pixel_accuracy(scorer: ConvScorer, samples, target: str = "epithelium", threshold: float = 0.5) -> float:
    correct = total = 0
    for s in samples:
        epi, bnd = scorer.score(s.tile)
        pred = (epi if target == "epithelium" else bnd).values >= threshold
        truth = s.epithelium.bits if target == "epithelium" else s.boundary.bits
        correct += int((pred == truth).sum())
        total += truth.size
    return correct / total
