"""Versioned parameter checkpoints (.npz with a JSON header) and loss-curve CSVs."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .layers import ParamSet

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamSet, meta: dict | None = None) -> None:
    header = {
        "format": "glandflow-checkpoint",
        "version": FORMAT_VERSION,
        "rng_seed": int(params.rng_seed),
        "tensors": {k: list(v.shape) for k, v in sorted(params.tensors.items())},
        "meta": meta or {},
    }
    arrays = {f"t/{k}": np.asarray(v, dtype=np.float64) for k, v in sorted(params.tensors.items())}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            tensors = {k[2:]: np.array(data[k]) for k in data.files if k.startswith("t/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if header.get("format") != "glandflow-checkpoint" or header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    for name, shape in header["tensors"].items():
        if name not in tensors or list(tensors[name].shape) != shape:
            raise CheckpointError(f"{path}: tensor {name!r} missing or mis-shaped")
    return ParamSet(tensors, header["rng_seed"]), header["meta"]


def write_loss_csv(path, curves: dict[str, list[float]]) -> None:
    names = sorted(curves)
    n = max((len(c) for c in curves.values()), default=0)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", *names])
        for e in range(n):
            writer.writerow([e, *(repr(curves[k][e]) if e < len(curves[k]) else "" for k in names)])
