"""Pixel-wise and gland-wise classification metrics, instance mAP, and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .imaging import GlandClass, LabelMap
from .segmentation import GlandInstance

CLASSES = (GlandClass.ST, GlandClass.BN, GlandClass.LG, GlandClass.HG)
# gland-wise ties resolve toward the more severe class
SEVERITY = (GlandClass.HG, GlandClass.LG, GlandClass.BN, GlandClass.ST)


@dataclass(frozen=True)
class IoULadder:
    thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))

    def __post_init__(self):
        t = self.thresholds
        if not t:
            raise ValueError("empty IoU ladder")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("IoU thresholds must be strictly increasing")
        if t[0] < 0.5 or t[-1] > 0.9:
            raise ValueError("IoU thresholds must lie in [0.5, 0.9]")


DEFAULT_LADDER = IoULadder()


@dataclass(frozen=True)
class ClassMetrics:
    """One-vs-rest counts and derived rates. Rates with a zero denominator are None."""

    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def support(self) -> int:
        return self.tp + self.fn

    @property
    def applicable(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def f1(self) -> float | None:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else None

    @property
    def sensitivity(self) -> float | None:
        d = self.tp + self.fn
        return self.tp / d if d else None

    @property
    def specificity(self) -> float | None:
        d = self.tn + self.fp
        return self.tn / d if d else None


def _tally(pred: np.ndarray, truth: np.ndarray, weights: np.ndarray, classes) -> dict:
    total = int(weights.sum())
    out = {}
    for c in classes:
        p, t = pred == int(c), truth == int(c)
        tp = int(weights[p & t].sum())
        fp = int(weights[p & ~t].sum())
        fn = int(weights[~p & t].sum())
        out[GlandClass(c)] = ClassMetrics(tp, fp, fn, total - tp - fp - fn)
    return out


def _labels(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMap) else np.asarray(x)


def pixel_metrics(pred, truth) -> dict[GlandClass, ClassMetrics]:
    """Per-class one-vs-rest pixel counts over {ST, BN, LG, HG}."""
    p, t = _labels(pred), _labels(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return _tally(p.ravel(), t.ravel(), np.ones(p.size, dtype=np.int64), CLASSES)


def glandwise_label(pred, gland: GlandInstance) -> GlandClass:
    p = _labels(pred)
    if gland.area_px == 0:
        raise ValueError(f"gland {gland.id} is empty")
    r, c = gland.pixels[:, 0], gland.pixels[:, 1]
    if r.min() < 0 or c.min() < 0 or r.max() >= p.shape[0] or c.max() >= p.shape[1]:
        raise ValueError(f"gland {gland.id} lies outside the prediction")
    counts = np.bincount(p[r, c].astype(np.int64), minlength=len(CLASSES))
    best = max(counts[int(k)] for k in SEVERITY)
    for k in SEVERITY:
        if counts[int(k)] == best:
            return k
    raise AssertionError("unreachable")


def gland_metrics(pred, truth_instances) -> dict[GlandClass, ClassMetrics]:
    """Gland-level counts weighted by gland area. ST has no glands and is reported N/A."""
    p = _labels(pred)
    seen = np.zeros(p.shape, dtype=bool)
    preds, truths, areas = [], [], []
    for g, cls in truth_instances:
        r, c = g.pixels[:, 0], g.pixels[:, 1]
        if seen[r, c].any():
            raise ValueError(f"truth gland {g.id} overlaps another gland")
        seen[r, c] = True
        preds.append(int(glandwise_label(p, g)))
        truths.append(int(cls))
        areas.append(g.area_px)
    out = _tally(np.array(preds, dtype=np.int64), np.array(truths, dtype=np.int64),
                 np.array(areas, dtype=np.int64), CLASSES[1:])
    return {GlandClass.ST: None, **out}


def _instances(instances) -> list[GlandInstance]:
    out = []
    for g in instances:
        if isinstance(g, tuple):
            g = g[0]
        out.append(g)
    return out


def iou_matrix(pred, truth) -> np.ndarray:
    pred, truth = _instances(pred), _instances(truth)
    m = np.zeros((len(pred), len(truth)))
    if not pred or not truth:
        return m
    pts = np.concatenate([g.pixels for g in pred + truth])
    lo = pts.min(axis=0)
    width = int(pts[:, 1].max() - lo[1] + 1)

    def keys(g):
        q = g.pixels - lo
        return q[:, 0] * width + q[:, 1]

    pk = [keys(g) for g in pred]
    tk = [keys(g) for g in truth]
    for i, a in enumerate(pk):
        for j, b in enumerate(tk):
            inter = np.intersect1d(a, b, assume_unique=True).size
            if inter:
                m[i, j] = inter / (a.size + b.size - inter)
    return m


def _greedy_tp(iou: np.ndarray, t: float) -> int:
    pairs = [(iou[i, j], i, j) for i, j in zip(*np.nonzero(iou >= t))]
    # descending IoU; index order breaks ties so results never depend on sort stability
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    used_p, used_t, tp = set(), set(), 0
    for _, i, j in pairs:
        if i not in used_p and j not in used_t:
            used_p.add(i)
            used_t.add(j)
            tp += 1
    return tp


def ap_at(iou: np.ndarray, t: float) -> float:
    n_pred, n_truth = iou.shape
    if n_pred == 0 and n_truth == 0:
        return 1.0
    tp = _greedy_tp(iou, t)
    return tp / (n_pred + n_truth - tp)


def map_iou(pred_instances, truth_instances, ladder: IoULadder = DEFAULT_LADDER) -> float:
    """Mean over ladder thresholds of TP / (TP + FP + FN) under greedy max-IoU matching."""
    iou = iou_matrix(pred_instances, truth_instances)
    return float(np.mean([ap_at(iou, t) for t in ladder.thresholds]))


def pooled_map_iou(pairs, ladder: IoULadder = DEFAULT_LADDER) -> float:
    """mAP with TP/FP/FN accumulated over many tiles before dividing."""
    tps = np.zeros(len(ladder.thresholds))
    n = 0
    for pred, truth in pairs:
        iou = iou_matrix(pred, truth)
        n += iou.shape[0] + iou.shape[1]
        tps += [_greedy_tp(iou, t) for t in ladder.thresholds]
    if n == 0:
        return 1.0
    return float(np.mean(tps / (n - tps)))


# ---------------------------------------------------------------- reports

@dataclass
class MetricAccumulator:
    """Sums confusion counts across tiles."""

    pixel: dict = field(default_factory=dict)
    gland: dict = field(default_factory=dict)
    instance_pairs: list = field(default_factory=list)
    tiles: int = 0

    @staticmethod
    def _add(into: dict, new: dict):
        for k, m in new.items():
            if m is None:
                into.setdefault(k, None)
                continue
            old = into.get(k)
            into[k] = m if old is None else ClassMetrics(old.tp + m.tp, old.fp + m.fp, old.fn + m.fn, old.tn + m.tn)

    def add_tile(self, pred_labels, truth_labels, pred_instances, truth_instances):
        self._add(self.pixel, pixel_metrics(pred_labels, truth_labels))
        self._add(self.gland, gland_metrics(pred_labels, truth_instances))
        self.instance_pairs.append((list(pred_instances), [g for g, _ in truth_instances]))
        self.tiles += 1


def _row(granularity: str, cls: GlandClass, m: ClassMetrics | None) -> dict:
    if m is None or not m.applicable:
        return {"granularity": granularity, "class": cls.name, "f1": None, "sensitivity": None,
                "specificity": None, "support": 0 if m is None else m.support}
    return {"granularity": granularity, "class": cls.name, "f1": m.f1, "sensitivity": m.sensitivity,
            "specificity": m.specificity, "support": m.support}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_report(acc: MetricAccumulator, config: dict, seed: int, failures=None,
                 ladder: IoULadder = DEFAULT_LADDER, extra: dict | None = None) -> dict:
    rows = []
    for gran, table in (("pixel", acc.pixel), ("gland", acc.gland)):
        for cls in CLASSES:
            rows.append(_row(gran, cls, table.get(cls)))
    n_pred = sum(len(p) for p, _ in acc.instance_pairs)
    flags = []
    if acc.tiles == 0:
        flags.append("no_evaluated_tiles")
    elif n_pred == 0:
        flags.append("empty_predictions")
    report = {
        "format": "glandflow-report",
        "version": 1,
        "seed": int(seed),
        "config_hash": config_hash(config),
        "tiles_evaluated": acc.tiles,
        "rows": rows,
        "map_iou": pooled_map_iou(acc.instance_pairs, ladder) if acc.tiles else None,
        "ladder": list(ladder.thresholds),
        "flags": flags,
        "failures": sorted(failures or [], key=lambda f: f["tile_id"]),
    }
    if extra:
        report.update(extra)
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    cols = ["granularity", "class", "f1", "sensitivity", "specificity", "support"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in report["rows"]:
        w.writerow(["N/A" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in cols])
    w.writerow(["instance", "map_iou", "" if report["map_iou"] is None else repr(report["map_iou"]), "", "", ""])
    return buf.getvalue()


def write_report(report: dict, json_path, csv_path=None) -> None:
    with open(json_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report_json(report))
    if csv_path is not None:
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report_csv(report))
