"""End-to-end orchestration: configuration, stage training, per-tile inference, reports."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import detector as det
from . import grader as grd
from . import scorer as scr
from .evaluation import MetricAccumulator, build_report, write_report
from .imaging import GlandClass, LabelMap, RasterFormatError, load_labels, load_tile, save_mask
from .nn import PAPER_SCHEDULE, CheckpointError, TrainSchedule, load_checkpoint, save_checkpoint, write_loss_csv
from .segmentation import (
    GlandInstance,
    MapScorer,
    SegmentationConfig,
    read_instances,
    save_score_map,
    segment_tile,
    write_instances,
)
from .synth import SynthSpec, has_truth, read_sample

log = logging.getLogger(__name__)

STAGES = ("segmenter", "detector", "grader")
DESK_SCHEDULES = {
    "segmenter": scr.DESK_SCHEDULE,
    "detector": det.DESK_SCHEDULE,
    "grader": grd.DESK_SCHEDULE,
}


class ConfigError(ValueError):
    """Bad or missing configuration (exit code 1)."""


class DataError(ValueError):
    """Unusable input data (exit code 2)."""


@dataclass
class PipelineConfig:
    seed: int
    data_dir: Path | None = None
    train_dir: Path | None = None
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("out")
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    scorer: scr.ScorerConfig = field(default_factory=scr.ScorerConfig)
    detector: det.DetectorConfig = field(default_factory=det.DetectorConfig)
    grader: grd.GraderConfig = field(default_factory=grd.GraderConfig)
    schedules: dict = field(default_factory=lambda: dict(DESK_SCHEDULES))
    synth: SynthSpec | None = None
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None, seed: int | None = None,
                  workers: int | None = None, paper_schedule: bool = False) -> "PipelineConfig":
        base = Path(base) if base is not None else Path.cwd()
        if seed is None:
            seed = d.get("seed")
        if seed is None:
            raise ConfigError("a seed is required (config 'seed' or --seed)")
        try:
            seed = int(seed)
            paths = d.get("paths", {})

            def path(key, default=None):
                v = paths.get(key, default)
                return None if v is None else (base / v)

            schedules = dict(DESK_SCHEDULES)
            for stage, sd in d.get("schedules", {}).items():
                if stage not in STAGES:
                    raise ConfigError(f"unknown stage {stage!r} in schedules")
                schedules[stage] = TrainSchedule.from_dict({**schedules[stage].to_dict(), **sd})
            if paper_schedule:
                schedules = {s: PAPER_SCHEDULE for s in STAGES}
            synth = SynthSpec.from_dict({**d["synth"], "seed": seed}) if "synth" in d else None
            cfg = cls(
                seed=seed,
                data_dir=path("data"),
                train_dir=path("train_data"),
                checkpoint_dir=path("checkpoints", "checkpoints"),
                output_dir=path("output", "out"),
                segmentation=SegmentationConfig.from_dict(d.get("segmentation", {})),
                scorer=scr.ScorerConfig.from_dict(d.get("scorer", {})),
                detector=det.DetectorConfig.from_dict(d.get("detector", {})),
                grader=grd.GraderConfig.from_dict(d.get("grader", {})),
                schedules=schedules,
                synth=synth,
                workers=int(workers if workers is not None else d.get("workers", 1)),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if cfg.workers < 1:
            raise ConfigError("workers must be >= 1")
        return cfg

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d, base=path.parent, **overrides)

    def fingerprint(self) -> dict:
        """Settings that influence outputs (no paths, no worker count)."""
        return {
            "seed": self.seed,
            "segmentation": vars(self.segmentation).copy(),
            "scorer": self.scorer.to_dict(),
            "detector": self.detector.to_dict(),
            "grader": self.grader.to_dict(),
            "schedules": {k: v.to_dict() for k, v in sorted(self.schedules.items())},
        }


# ---------------------------------------------------------------- data access

def tiles_dir(root: Path) -> Path:
    return root / "tiles" if (root / "tiles").is_dir() else root


def list_tiles(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"input directory not found: {root}")
    return sorted(tiles_dir(root).glob("*.png"))


def load_training_samples(root) -> list:
    if root is None:
        raise ConfigError("no training data directory configured (paths.train_data)")
    root = Path(root)
    ids = [p.stem for p in list_tiles(root) if has_truth(root, p.stem)]
    if not ids:
        raise DataError(f"no annotated tiles under {root}")
    try:
        return [read_sample(root, i) for i in ids]
    except (OSError, RasterFormatError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"unreadable training data: {exc}") from exc


# ---------------------------------------------------------------- training

def _checkpoint_path(cfg: PipelineConfig, stage: str) -> Path:
    return cfg.checkpoint_dir / f"{stage}.npz"


def _flatten_curves(curves: dict) -> dict:
    if all(isinstance(v, dict) for v in curves.values()):
        return {f"{t}_{k}": c for t, sub in curves.items() for k, c in sub.items()}
    return curves


def _segmented_detector_examples(cfg: PipelineConfig, samples) -> list:
    """Detector examples cut from the trained segmenter's instances, so the detector
    sees the outlines it will get at inference. Empty without a segmenter checkpoint."""
    if not cfg.detector.train_on_segmented:
        return []
    if not _checkpoint_path(cfg, "segmenter").exists():
        log.info("no segmenter checkpoint; training the detector on annotated outlines only")
        return []
    scorer = load_models(cfg, ("segmenter",))["segmenter"]
    out = []
    for s in samples:
        instances = segment_tile(s.tile, scorer, cfg.segmentation)
        out += det.examples_from_instances(s, instances, cfg.detector, with_nuclei=cfg.detector.aux_weight > 0)
    log.info("added %d segmented glands to detector training", len(out))
    return out


def cmd_train(stage: str, cfg: PipelineConfig, samples=None) -> Path:
    """Train one stage from ``cfg.train_dir`` (or ``samples``); writes checkpoint and loss CSV."""
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    if samples is None:
        samples = load_training_samples(cfg.train_dir)
    schedule = cfg.schedules[stage]
    log.info("training %s on %d tiles for %d epochs", stage, len(samples), schedule.max_epochs)
    progress = lambda *a: log.debug("%s epoch %s", stage, a)  # noqa: E731
    try:
        if stage == "segmenter":
            model, curves = scr.train_scorer(samples, schedule, cfg.seed, cfg.scorer, progress)
            meta_cfg = cfg.scorer.to_dict()
        elif stage == "detector":
            examples = det.detector_examples(samples, cfg.detector, with_nuclei=cfg.detector.aux_weight > 0)
            examples += _segmented_detector_examples(cfg, samples)
            model, curves = det.train_detector(examples, schedule, cfg.seed, cfg.detector, progress)
            meta_cfg = cfg.detector.to_dict()
        else:
            examples = grd.grader_examples(samples, cfg.grader, with_nuclei=cfg.grader.aux_weight > 0)
            model, curves = grd.train_grader(examples, schedule, cfg.seed, cfg.grader, progress)
            meta_cfg = cfg.grader.to_dict()
    except ValueError as exc:
        if isinstance(exc, (ConfigError, DataError)):
            raise
        raise DataError(f"{stage}: {exc}") from exc
    cfg.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    path = _checkpoint_path(cfg, stage)
    save_checkpoint(path, model.params, {"stage": stage, "config": meta_cfg, "schedule": schedule.to_dict(),
                                         "seed": cfg.seed})
    write_loss_csv(cfg.checkpoint_dir / f"{stage}_loss.csv", _flatten_curves(curves))
    return path


# ---------------------------------------------------------------- inference

@dataclass
class Models:
    scorer: scr.ConvScorer
    detector: det.DetectorModel
    grader: grd.GraderModel


def _load_stage(cfg: PipelineConfig, stage: str):
    path = _checkpoint_path(cfg, stage)
    try:
        params, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise ConfigError(str(exc)) from exc
    if meta.get("stage") != stage:
        raise ConfigError(f"{path} holds a {meta.get('stage')!r} checkpoint, expected {stage!r}")
    return params, meta.get("config", {})


def load_models(cfg: PipelineConfig, stages=STAGES) -> dict:
    out = {}
    for stage in stages:
        params, mcfg = _load_stage(cfg, stage)
        if stage == "segmenter":
            out[stage] = scr.ConvScorer(scr.ScorerConfig.from_dict(mcfg), params)
        elif stage == "detector":
            out[stage] = det.DetectorModel(det.DetectorConfig.from_dict(mcfg), params)
        else:
            out[stage] = grd.GraderModel(grd.GraderConfig.from_dict(mcfg), params)
    return out


def detect_instances(tile, instances, model: det.DetectorModel) -> None:
    """Annotate each instance's ``extra`` with its cancer call."""
    c = model.config
    for g in instances:
        call = det.classify_gland(model, det.extract_patch_set(tile, g, c.stride, c.min_coverage, c.patch_size))
        g.extra.update({"p_cancer": call.p_cancer, "cancer": call.label})


def grade_instances(tile, instances, model: grd.GraderModel) -> None:
    for g in instances:
        if g.extra.get("cancer") != "CN":
            continue
        pred = grd.grade_gland(model, grd.extract_grade_patches(tile, g, model.config))
        g.extra.update({"p_low": pred.p_low, "p_high": pred.p_high, "grade": pred.label})


def instance_class(g: GlandInstance) -> GlandClass:
    if g.extra.get("cancer") == "BN":
        return GlandClass.BN
    grade = g.extra.get("grade")
    if grade is None:
        raise DataError(f"instance {g.id} has no cancer call or grade")
    return GlandClass[grade]


def paint_labels(instances, shape) -> LabelMap:
    labels = np.zeros(shape, dtype=np.uint8)
    for g in instances:
        cls = instance_class(g)
        g.extra["class"] = cls.name
        labels[g.pixels[:, 0], g.pixels[:, 1]] = int(cls)
    return LabelMap(labels)


def process_tile(tile, models: dict, seg_cfg: SegmentationConfig):
    instances = segment_tile(tile, models["segmenter"], seg_cfg)
    detect_instances(tile, instances, models["detector"])
    grade_instances(tile, instances, models["grader"])
    return instances, paint_labels(instances, tile.shape)


def _out_paths(out_dir: Path, tile_id: str) -> dict:
    return {
        "labels": out_dir / f"{tile_id}.labels.png",
        "raster": out_dir / f"{tile_id}.instances.png",
        "sidecar": out_dir / f"{tile_id}.instances.json",
        "epithelium": out_dir / f"{tile_id}.epithelium_score.png",
        "boundary": out_dir / f"{tile_id}.boundary_score.png",
    }


# Worker state: each process loads its own immutable copy of the models.
_WORKER: dict = {}


def _init_worker(cfg: PipelineConfig, stages) -> None:
    _WORKER["cfg"] = cfg
    _WORKER["models"] = load_models(cfg, stages)


def _run_one(job):
    mode, path = job
    cfg, models = _WORKER["cfg"], _WORKER["models"]
    path = Path(path)
    tile_id = path.stem
    try:
        tile = load_tile(path, tile_id=tile_id)
        out = _out_paths(cfg.output_dir, tile_id)
        if mode == "segment":
            epi, bnd = models["segmenter"].score(tile)
            save_score_map(epi, out["epithelium"])
            save_score_map(bnd, out["boundary"])
            instances = segment_tile(tile, MapScorer(epi, bnd), cfg.segmentation)
            write_instances(instances, tile.shape, out["raster"], out["sidecar"], tile_id)
            return {"tile_id": tile_id, "ok": True}
        if mode == "run":
            instances, labels = process_tile(tile, models, cfg.segmentation)
        else:
            instances, doc = read_instances(out["raster"], out["sidecar"])
            if tuple(doc.get("shape", ())) != tile.shape:
                raise RasterFormatError("instance raster does not match the tile")
            if mode == "detect":
                detect_instances(tile, instances, models["detector"])
                labels = None
            else:
                grade_instances(tile, instances, models["grader"])
                labels = paint_labels(instances, tile.shape)
        write_instances(instances, tile.shape, out["raster"], out["sidecar"], tile_id)
        if labels is not None:
            save_mask(labels, out["labels"])
        return {"tile_id": tile_id, "ok": True}
    except (OSError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        log.warning("tile %s failed: %s", tile_id, exc)
        return {"tile_id": tile_id, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


MODE_STAGES = {
    "segment": ("segmenter",),
    "detect": ("detector",),
    "grade": ("grader",),
    "run": STAGES,
}


def _map_tiles(cfg: PipelineConfig, mode: str, paths) -> list[dict]:
    stages = MODE_STAGES[mode]
    jobs = [(mode, str(p)) for p in paths]
    if cfg.workers == 1 or len(jobs) <= 1:
        _init_worker(cfg, stages)
        try:
            return [_run_one(j) for j in jobs]
        finally:
            _WORKER.clear()
    # validate checkpoints up front so a config error is raised once, in the parent
    load_models(cfg, stages)
    with ProcessPoolExecutor(cfg.workers, initializer=_init_worker, initargs=(cfg, stages)) as pool:
        return list(pool.map(_run_one, jobs))


@dataclass
class RunResult:
    results: list
    report: dict | None = None

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r["ok"]]


def run_stage(cfg: PipelineConfig, mode: str) -> RunResult:
    """Run ``segment``, ``detect`` or ``grade`` over every input tile."""
    if cfg.data_dir is None:
        raise ConfigError("no input directory configured (paths.data)")
    paths = list_tiles(cfg.data_dir)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return RunResult(_map_tiles(cfg, mode, paths))


def evaluate_outputs(cfg: PipelineConfig, failures=()) -> dict:
    """Compare written outputs with ground truth wherever it exists; writes report.json/.csv."""
    if cfg.data_dir is None:
        raise ConfigError("no input directory configured (paths.data)")
    acc = MetricAccumulator()
    failed = {f["tile_id"] for f in failures}
    fails = [{"tile_id": f["tile_id"], "error": f["error"]} for f in failures]
    for p in list_tiles(cfg.data_dir):
        tid = p.stem
        if tid in failed or not has_truth(cfg.data_dir, tid):
            continue
        out = _out_paths(cfg.output_dir, tid)
        try:
            truth = read_sample(cfg.data_dir, tid)
            pred_inst, _ = read_instances(out["raster"], out["sidecar"])
            pred_labels = load_labels(out["labels"])
            acc.add_tile(pred_labels, truth.labels, pred_inst, truth.instances)
        except (OSError, ValueError) as exc:
            fails.append({"tile_id": tid, "error": f"{type(exc).__name__}: {exc}"})
    report = build_report(acc, cfg.fingerprint(), cfg.seed, fails)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, cfg.output_dir / "report.json", cfg.output_dir / "report.csv")
    return report


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    """Segment, detect, grade and paint every tile, then evaluate where truth exists."""
    res = run_stage(cfg, "run")
    res.report = evaluate_outputs(cfg, res.failures)
    return res

