"""Detection evaluation: per-class AP over distance thresholds, TP errors, NDS.

Matching follows the center-distance convention: predictions in descending
score order greedily claim the nearest unmatched ground-truth box of the
same class within the threshold. AP integrates the 101-point interpolated
precision-recall curve with the 10% recall and precision floors removed and
renormalized. True-positive errors are computed per class on the matches at
the dedicated TP threshold and averaged over classes; classes with no match
contribute the worst value 1. Every metric depends on scores only through
their ordering.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .geometry import wrap_angle
from .heads import Box3D

NUM_RECALL_POINTS = 101
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
TP_METRIC_NAMES = ("mATE", "mASE", "mAOE", "mAVE", "mAAE")


@dataclass
class MetricConfig:
    distance_thresholds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    classes: tuple[int, ...] | None = None  # None: every class present in GT
    tp_threshold: float = 2.0

    def __post_init__(self):
        ts = tuple(float(t) for t in self.distance_thresholds)
        if not ts or any(t <= 0 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"thresholds must be positive ascending, got {ts}")
        self.distance_thresholds = ts


@dataclass
class MetricReport:
    per_class_ap: dict  # class_id -> {threshold: ap}
    per_class_tp: dict  # class_id -> {metric name: value}
    mean_ap: float
    tp_errors: dict     # metric name -> value
    nds: float
    config: MetricConfig = field(default=None)

    def validate(self):
        if not 0.0 <= self.mean_ap <= 1.0 or not 0.0 <= self.nds <= 1.0:
            raise ConfigError("mAP and NDS must lie in [0, 1]")
        recomputed = nds(self.mean_ap, tuple(self.tp_errors[n] for n in TP_METRIC_NAMES))
        if abs(recomputed - self.nds) > 1e-12:
            raise ConfigError(f"NDS {self.nds} does not recompose from parts ({recomputed})")


@dataclass
class MatchEntry:
    pred_index: int
    score: float
    tp: bool
    gt_index: int  # -1 for false positives
    distance: float


def match(preds: list[Box3D], gts: list[Box3D], threshold: float) -> list[MatchEntry]:
    """Greedy TP/FP labels in descending score order (stable by input index)."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    out = []
    for i in order:
        p = preds[i]
        best_j = -1
        best_d = math.inf
        for j, g in enumerate(gts):
            if taken[j] or g.class_id != p.class_id:
                continue
            d = float(np.hypot(p.x - g.x, p.y - g.y))
            if d < best_d:
                best_d = d
                best_j = j
        if best_j >= 0 and best_d <= threshold:
            taken[best_j] = True
            out.append(MatchEntry(i, p.score, True, best_j, best_d))
        else:
            out.append(MatchEntry(i, p.score, False, -1, best_d))
    return out


def average_precision(tp_labels: list[bool], scores: list[float], num_gt: int) -> float:
    """Area under the interpolated PR curve with the 10%/10% floors removed.

    ``tp_labels`` must already be in descending score order; scores are
    accepted only to assert that ordering contract.
    """
    if num_gt <= 0:
        return 0.0
    if not tp_labels:
        return 0.0
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ConfigError("labels must arrive in descending score order")
    tp = np.cumsum(np.asarray(tp_labels, dtype=np.float64))
    fp = np.cumsum(~np.asarray(tp_labels, dtype=bool))
    recall = tp / num_gt
    precision = tp / (tp + fp)
    grid = np.linspace(0.0, 1.0, NUM_RECALL_POINTS)
    prec_interp = np.interp(grid, recall, precision, right=0.0)
    body = prec_interp[round(100 * MIN_RECALL) + 1:]
    body = np.clip(body - MIN_PRECISION, 0.0, None)
    # summation noise can push a mathematically-perfect curve past 1.0
    return float(min(1.0, max(0.0, body.mean() / (1.0 - MIN_PRECISION))))


def aligned_iou(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU with translation and rotation removed."""
    inter = min(a.l, b.l) * min(a.w, b.w) * min(a.h, b.h)
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return inter / union


def tp_errors(matched_pairs: list[tuple[Box3D, Box3D]]) -> dict:
    """Mean translation/scale/orientation/velocity/attribute errors.

    No matches means the worst value 1 for each error (keeps NDS defined).
    Attribute error is fixed at 0: the synthetic data carries no attributes.
    """
    if not matched_pairs:
        return {"mATE": 1.0, "mASE": 1.0, "mAOE": 1.0, "mAVE": 1.0, "mAAE": 0.0}
    ate = ase = aoe = ave = 0.0
    for p, g in matched_pairs:
        ate += float(np.hypot(p.x - g.x, p.y - g.y))
        ase += 1.0 - aligned_iou(p, g)
        aoe += abs(wrap_angle(p.yaw - g.yaw))
        ave += float(np.hypot(p.vx - g.vx, p.vy - g.vy))
    n = len(matched_pairs)
    return {"mATE": ate / n, "mASE": ase / n, "mAOE": aoe / n, "mAVE": ave / n, "mAAE": 0.0}


def nds(mean_ap: float, mtps) -> float:
    """Composite score: (1/10) * [5 * mAP + sum(1 - min(1, mTP))]."""
    acc = 5.0 * mean_ap
    for v in mtps:
        acc += 1.0 - min(1.0, v)
    return acc / 10.0


def evaluate(preds: list[Box3D], gts: list[Box3D], config: MetricConfig | None = None) -> MetricReport:
    config = config or MetricConfig()
    preds = [p for p in preds if p.class_id >= 0]
    classes = config.classes or tuple(sorted({g.class_id for g in gts}))
    per_class_ap: dict = {}
    per_class_tp: dict = {}
    for cls in classes:
        cls_preds = [p for p in preds if p.class_id == cls]
        cls_gts = [g for g in gts if g.class_id == cls]
        aps = {}
        for d in config.distance_thresholds:
            entries = match(cls_preds, cls_gts, d)
            aps[d] = average_precision([e.tp for e in entries], [e.score for e in entries],
                                       len(cls_gts))
        per_class_ap[cls] = aps
        tp_entries = match(cls_preds, cls_gts, config.tp_threshold)
        pairs = [(cls_preds[e.pred_index], cls_gts[e.gt_index]) for e in tp_entries if e.tp]
        per_class_tp[cls] = tp_errors(pairs)
    if classes:
        mean_ap = float(np.mean([per_class_ap[c][d] for c in classes
                                 for d in config.distance_thresholds]))
        agg_tp = {name: float(np.mean([per_class_tp[c][name] for c in classes]))
                  for name in TP_METRIC_NAMES}
    else:
        mean_ap = 0.0
        agg_tp = {name: 1.0 for name in TP_METRIC_NAMES}
        agg_tp["mAAE"] = 0.0
    report = MetricReport(
        per_class_ap=per_class_ap,
        per_class_tp=per_class_tp,
        mean_ap=mean_ap,
        tp_errors=agg_tp,
        nds=nds(mean_ap, tuple(agg_tp[n] for n in TP_METRIC_NAMES)),
        config=config,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# report serialization


def report_to_json(report: MetricReport) -> dict:
    return {
        "per_class_ap": {str(c): {repr(d): ap for d, ap in aps.items()}
                         for c, aps in report.per_class_ap.items()},
        "per_class_tp": {str(c): tp for c, tp in report.per_class_tp.items()},
        "mAP": report.mean_ap,
        "tp_errors": report.tp_errors,
        "NDS": report.nds,
    }


def save_report_json(path, report: MetricReport):
    with open(path, "w") as fh:
        json.dump(report_to_json(report), fh, indent=1, sort_keys=True)
        fh.write("\n")


def save_report_csv(path, report: MetricReport):
    thresholds = report.config.distance_thresholds if report.config else ()
    header = (["row"] + [f"AP@{t}" for t in thresholds] + ["mAP"]
              + list(TP_METRIC_NAMES) + ["NDS"])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for cls in sorted(report.per_class_ap):
            aps = [repr(report.per_class_ap[cls][t]) for t in thresholds]
            cls_map = repr(float(np.mean(list(report.per_class_ap[cls].values()))))
            tps = [repr(report.per_class_tp[cls][n]) for n in TP_METRIC_NAMES]
            writer.writerow([f"class_{cls}"] + aps + [cls_map] + tps + [""])
        agg_aps = []
        for t in thresholds:
            agg_aps.append(repr(float(np.mean([report.per_class_ap[c][t]
                                               for c in report.per_class_ap]))) if report.per_class_ap else "")
        writer.writerow(["aggregate"] + agg_aps + [repr(report.mean_ap)]
                        + [repr(report.tp_errors[n]) for n in TP_METRIC_NAMES]
                        + [repr(report.nds)])
