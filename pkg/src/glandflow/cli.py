"""Command-line entry point: ``glandflow <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .imaging import RasterFormatError
from .nn import DivergenceError
from .pipeline import (
    STAGES,
    ConfigError,
    DataError,
    PipelineConfig,
    cmd_train,
    evaluate_outputs,
    run_pipeline,
    run_stage,
)
from .synth import GenerationError, SynthSpec, generate, write_dataset

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

log = logging.getLogger("glandflow")


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1, not argparse's 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed (overrides the config)")
    common.add_argument("--workers", type=int, help="parallel tile workers (default 1)")
    common.add_argument("--paper-schedule", action="store_true",
                        help="train with the full 2000-epoch schedule instead of the desk schedule")
    common.add_argument("--data", type=Path, help="input dataset or tile directory")
    common.add_argument("--train-data", type=Path, help="annotated training dataset")
    common.add_argument("--checkpoints", type=Path, help="checkpoint directory")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="glandflow", description="Gland segmentation, cancer detection and grading.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic annotated dataset")
    s.add_argument("--tiles", type=int, default=200, help="number of tiles")
    s.add_argument("--start", type=int, default=0, help="index of the first tile")

    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=STAGES)

    sub.add_parser("segment", parents=[common], help="stage 1: score maps and gland instances")
    sub.add_parser("detect", parents=[common], help="stage 2: benign/cancer call per gland")
    sub.add_parser("grade", parents=[common], help="stage 3: grade cancer glands and paint labels")
    sub.add_parser("run", parents=[common], help="all stages, then evaluation where truth exists")
    sub.add_parser("eval", parents=[common], help="evaluate existing outputs against truth")
    return p


def load_config(args) -> PipelineConfig:
    overrides = {"seed": args.seed, "workers": args.workers, "paper_schedule": args.paper_schedule}
    if args.config is not None:
        cfg = PipelineConfig.from_file(args.config, **overrides)
    else:
        cfg = PipelineConfig.from_dict({}, **overrides)
    for attr, value in (("data_dir", args.data), ("train_dir", args.train_data),
                        ("checkpoint_dir", args.checkpoints), ("output_dir", args.out)):
        if value is not None:
            setattr(cfg, attr, value)
    return cfg


def _synth(args, cfg: PipelineConfig) -> int:
    if args.tiles < 0 or args.start < 0:
        raise ConfigError("--tiles and --start must be non-negative")
    out = args.out if args.out is not None else cfg.data_dir
    if out is None:
        raise ConfigError("synth needs --out (or paths.data in the config)")
    spec = cfg.synth or SynthSpec(seed=cfg.seed)
    write_dataset(generate(spec, args.tiles, args.start), out, spec)
    log.info("wrote %d tiles to %s", args.tiles, out)
    return EXIT_OK


def _summarise(results) -> int:
    failures = [r for r in results if not r["ok"]]
    for f in failures:
        print(f"tile {f['tile_id']} failed: {f['error']}", file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def dispatch(args) -> int:
    cfg = load_config(args)
    cmd = args.command
    if cmd == "synth":
        return _synth(args, cfg)
    if cmd == "train":
        path = cmd_train(args.stage, cfg)
        print(path)
        return EXIT_OK
    if cmd in ("segment", "detect", "grade"):
        return _summarise(run_stage(cfg, cmd).results)
    if cmd == "run":
        res = run_pipeline(cfg)
        code = _summarise(res.results)
        print(json.dumps({"tiles": len(res.results), "failed": len(res.failures),
                          "map_iou": res.report["map_iou"]}, sort_keys=True))
        return code
    if cmd == "eval":
        report = evaluate_outputs(cfg)
        print(json.dumps({"tiles_evaluated": report["tiles_evaluated"], "map_iou": report["map_iou"]},
                         sort_keys=True))
        return EXIT_DATA if report["failures"] else EXIT_OK
    raise ConfigError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, RasterFormatError, GenerationError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
