"""Metrics: construction quality (recall at a precision target under a
geometric+style instance matcher) and instance-level change detection
precision/recall, plus dataset-level report generation.

Counts are micro-averaged: TP/FP/FN aggregate over all samples of a split
before any rate is computed.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import raster
from .change_oracle import chamfer_distance, masked_assignment
from .errors import ConfigError
from .map_model import (ADDITION, DELETION, NO_CHANGE, STYLE_CHANGE,
                        ChangeRecord, LaneInstance, VectorMapTile)
from .model_core import MapUpdateNet, load_checkpoint
from .synth_world import load_manifest, load_sample, sample_dir, split_indices
from .update_engine import InferenceConfig, infer

CHANGE_KINDS_EVAL = (STYLE_CHANGE, ADDITION, DELETION)


@dataclass(frozen=True)
class EvalConfig:
    dist_threshold_m: float = 1.0      # Chamfer gate for instance matching
    coverage_threshold: float = 0.8    # fraction of points within the gate
    precision_target: float = 0.8
    change_match_threshold_m: float = 1.0

    def __post_init__(self):
        if not 0 < self.coverage_threshold <= 1 or not 0 < self.precision_target <= 1:
            raise ConfigError("thresholds must lie in (0, 1]")
        if self.dist_threshold_m <= 0 or self.change_match_threshold_m <= 0:
            raise ConfigError("distance thresholds must be positive")


# ---------------------------------------------------------------------------
# Construction quality
# ---------------------------------------------------------------------------

def _coverage(a: np.ndarray, b: np.ndarray, dist: float) -> float:
    """Symmetric point coverage: min over both directions of the fraction of
    points whose nearest neighbor lies within ``dist``."""
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return float(min((d.min(axis=1) <= dist).mean(), (d.min(axis=0) <= dist).mean()))


def match_sample(pred_instances: list[LaneInstance], confidences: np.ndarray,
                 gt_tile: VectorMapTile, cfg: EvalConfig) -> list[tuple[float, bool]]:
    """Greedy confidence-descending matching of one sample.

    A prediction is a true positive iff it claims a still-unmatched GT
    instance with Chamfer <= gate, coverage >= gate, and identical style.
    Returns (confidence, is_tp) per prediction.
    """
    order = np.argsort(-np.asarray(confidences), kind="stable")
    taken: set[int] = set()
    results = []
    for i in order:
        inst = pred_instances[i]
        best_k, best_d = None, np.inf
        for k, gt in enumerate(gt_tile.instances):
            if k in taken or gt.style != inst.style:
                continue
            d = chamfer_distance(inst.points, gt.points)
            if d > cfg.dist_threshold_m or d >= best_d:
                continue
            if _coverage(inst.points, gt.points, cfg.dist_threshold_m) < cfg.coverage_threshold:
                continue
            best_k, best_d = k, d
        if best_k is not None:
            taken.add(best_k)
            results.append((float(confidences[i]), True))
        else:
            results.append((float(confidences[i]), False))
    return results


def construction_pr(matches: list[tuple[float, bool]], total_gt: int
                    ) -> list[tuple[float, float, float]]:
    """Sweep confidence thresholds over pooled (confidence, is_tp) matches.

    Returns (precision, recall, threshold) points, one per distinct
    confidence, in decreasing-threshold order. With no predictions the curve
    is the single conventional point (1.0, 0.0).
    """
    if not matches:
        return [(1.0, 0.0, 1.0)]
    ordered = sorted(matches, key=lambda t: -t[0])
    curve = []
    tp = fp = 0
    for i, (conf, is_tp) in enumerate(ordered):
        tp += int(is_tp)
        fp += int(not is_tp)
        if i + 1 < len(ordered) and ordered[i + 1][0] == conf:
            continue  # emit one point per distinct threshold
        precision = tp / (tp + fp)
        recall = tp / total_gt if total_gt else 0.0
        curve.append((precision, recall, conf))
    return curve


def recall_at_precision(curve, target: float = 0.8) -> float:
    """Maximum recall among curve points with precision >= target, else 0."""
    best = 0.0
    for precision, recall, _ in curve:
        if precision >= target and recall > best:
            best = recall
    return best


# ---------------------------------------------------------------------------
# Change detection quality
# ---------------------------------------------------------------------------

@dataclass
class ChangeCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_kind: dict = field(default_factory=lambda: {
        kind: {"tp": 0, "fp": 0, "fn": 0} for kind in CHANGE_KINDS_EVAL})

    def add(self, other: "ChangeCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        for kind in CHANGE_KINDS_EVAL:
            for key in ("tp", "fp", "fn"):
                self.per_kind[kind][key] += other.per_kind[kind][key]

    @property
    def p_u(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 1.0

    @property
    def r_u(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 1.0

    def kind_rates(self, kind: str) -> tuple[float, float]:
        c = self.per_kind[kind]
        p = c["tp"] / (c["tp"] + c["fp"]) if (c["tp"] + c["fp"]) else 1.0
        r = c["tp"] / (c["tp"] + c["fn"]) if (c["tp"] + c["fn"]) else 1.0
        return p, r


def geoms_of(instances) -> dict[str, np.ndarray]:
    return {inst.id: inst.points for inst in instances}


def change_pr(pred_records: list[ChangeRecord], oracle_records: list[ChangeRecord],
              pred_geoms: dict[str, np.ndarray], gt_tile: VectorMapTile,
              threshold_m: float = 1.0) -> ChangeCounts:
    """Score predicted change records against the oracle's.

    no_change records are outside the change universe. Deletions match by
    historical id; style changes require the same historical instance plus
    matching new-side geometry; additions match one-to-one by geometry.
    """
    counts = ChangeCounts()
    gt_geoms = geoms_of(gt_tile.instances)
    pred_changes = [r for r in pred_records if r.kind != NO_CHANGE]
    oracle_changes = [r for r in oracle_records if r.kind != NO_CHANGE]

    def tally(kind: str, tp: int, n_pred: int, n_oracle: int) -> None:
        c = counts.per_kind[kind]
        c["tp"] += tp
        c["fp"] += n_pred - tp
        c["fn"] += n_oracle - tp

    # Deletions: historical ids must coincide.
    pred_del = {r.historical_id for r in pred_changes if r.kind == DELETION}
    oracle_del = {r.historical_id for r in oracle_changes if r.kind == DELETION}
    tally(DELETION, len(pred_del & oracle_del), len(pred_del), len(oracle_del))

    # Style changes: same historical instance and matching new-side geometry.
    oracle_style = {r.historical_id: r for r in oracle_changes if r.kind == STYLE_CHANGE}
    pred_style = [r for r in pred_changes if r.kind == STYLE_CHANGE]
    tp = 0
    for r in pred_style:
        o = oracle_style.get(r.historical_id)
        if o is None:
            continue
        if chamfer_distance(pred_geoms[r.predicted_id], gt_geoms[o.predicted_id]) <= threshold_m:
            tp += 1
    tally(STYLE_CHANGE, tp, len(pred_style), len(oracle_style))

    # Additions: one-to-one geometric matching of the new instances.
    pred_add = [r for r in pred_changes if r.kind == ADDITION]
    oracle_add = [r for r in oracle_changes if r.kind == ADDITION]
    if pred_add and oracle_add:
        cost = np.zeros((len(pred_add), len(oracle_add)))
        for i, r in enumerate(pred_add):
            for j, o in enumerate(oracle_add):
                cost[i, j] = chamfer_distance(pred_geoms[r.predicted_id],
                                              gt_geoms[o.predicted_id])
        matched = masked_assignment(cost, cost <= threshold_m)
        tally(ADDITION, len(matched), len(pred_add), len(oracle_add))
    else:
        tally(ADDITION, 0, len(pred_add), len(oracle_add))

    for kind in CHANGE_KINDS_EVAL:
        counts.tp += counts.per_kind[kind]["tp"]
        counts.fp += counts.per_kind[kind]["fp"]
        counts.fn += counts.per_kind[kind]["fn"]
    return counts


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    r_at_p: float
    p_u: float
    r_u: float
    per_kind: dict
    counts: dict
    pr_curve: list
    evaluated: int
    missing: list
    empty: bool
    config: dict

    def to_dict(self) -> dict:
        return asdict(self)


def _sample_available(root, split, index) -> bool:
    d = sample_dir(root, split, index)
    return all((d / name).exists()
               for name in ("image.png", "historical.jsonl", "truth.jsonl", "changes.json"))


def evaluate_dataset(model: MapUpdateNet | str | Path | None, dataset_root, split: str,
                     out_dir=None, eval_cfg: EvalConfig | None = None,
                     infer_cfg: InferenceConfig | None = None,
                     cheat: bool = False) -> MetricReport:
    """Run inference over a split and aggregate metrics micro-averaged.

    ``cheat`` bypasses the model (predictions := ground truth, changes :=
    oracle labels) as a harness self-test; all metrics must then be 1.0.
    """
    eval_cfg = eval_cfg or EvalConfig()
    infer_cfg = infer_cfg or InferenceConfig()
    if not cheat and not isinstance(model, MapUpdateNet):
        if model is None:
            raise ConfigError("a model or checkpoint is required unless cheat=True")
        model, _ = load_checkpoint(model)
    manifest = load_manifest(dataset_root)
    indices = split_indices(manifest, split)
    missing = [i for i in indices if not _sample_available(dataset_root, split, i)]
    present = [i for i in indices if i not in set(missing)]

    matches: list[tuple[float, bool]] = []
    total_gt = 0
    change_counts = ChangeCounts()
    started = time.perf_counter()
    for index in present:
        pair = load_sample(dataset_root, split, index)
        if cheat:
            pred_instances = [inst.with_role("predicted", id=f"p{k:03d}")
                              for k, inst in enumerate(pair.ground_truth.instances)]
            confidences = np.ones(len(pred_instances))
            remap = {g.id: p.id for g, p in zip(pair.ground_truth.instances, pred_instances)}
            records = [ChangeRecord(r.kind,
                                    remap[r.predicted_id] if r.predicted_id else None,
                                    r.historical_id)
                       for r in pair.changes]
        else:
            result = infer(pair.image, pair.historical, model, infer_cfg)
            pred_instances = result.pred_instances
            confidences = result.prediction.confidence
            records = result.changes
        matches.extend(match_sample(pred_instances, confidences, pair.ground_truth, eval_cfg))
        total_gt += len(pair.ground_truth.instances)
        change_counts.add(change_pr(records, list(pair.changes),
                                    geoms_of(pred_instances), pair.ground_truth,
                                    eval_cfg.change_match_threshold_m))
    elapsed = time.perf_counter() - started

    curve = construction_pr(matches, total_gt)
    per_kind = {}
    for kind in CHANGE_KINDS_EVAL:
        p, r = change_counts.kind_rates(kind)
        per_kind[kind] = {"precision": p, "recall": r, **change_counts.per_kind[kind]}
    report = MetricReport(
        r_at_p=recall_at_precision(curve, eval_cfg.precision_target),
        p_u=change_counts.p_u,
        r_u=change_counts.r_u,
        per_kind=per_kind,
        counts={"tp": change_counts.tp, "fp": change_counts.fp, "fn": change_counts.fn},
        pr_curve=[list(point) for point in curve],
        evaluated=len(present),
        missing=missing,
        empty=not present,
        config={"eval": asdict(eval_cfg), "inference": asdict(infer_cfg), "cheat": cheat},
    )
    # Wall clock is informational only and deliberately kept out of the report
    # files so byte-identical reruns stay byte-identical.
    print(f"evaluated {len(present)} samples of split {split!r} in {elapsed:.1f}s")
    if out_dir is not None:
        write_report(report, out_dir)
    return report


def write_report(report: MetricReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "pr_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("precision,recall,threshold\n")
        for precision, recall, threshold in report.pr_curve:
            fh.write(f"{precision:.6f},{recall:.6f},{threshold:.6f}\n")
    Image.fromarray(render_pr_curve(report.pr_curve)).save(out / "pr_curve.png",
                                                           format="PNG")


def render_pr_curve(curve, size: int = 420) -> np.ndarray:
    """Minimal recall-vs-precision plot as a uint8 RGB image."""
    margin = 40
    span = size - 2 * margin
    canvas = np.ones((size, size, 3), dtype=np.float32)
    axis_color = (0.2, 0.2, 0.2)

    def to_px(recall, precision):
        return (margin + recall * span, size - margin - precision * span)

    raster.draw_polyline(canvas, np.array([to_px(0, 0), to_px(1, 0)]), axis_color, 1.5)
    raster.draw_polyline(canvas, np.array([to_px(0, 0), to_px(0, 1)]), axis_color, 1.5)
    for tick in (0.25, 0.5, 0.75, 1.0):
        raster.draw_polyline(canvas, np.array([to_px(tick, 0), to_px(tick, 0.015)]),
                             axis_color, 1.5)
        raster.draw_polyline(canvas, np.array([to_px(0, tick), to_px(0.015, tick)]),
                             axis_color, 1.5)
    pts = np.array([to_px(r, p) for p, r, _ in sorted(curve, key=lambda c: c[1])])
    if len(pts) == 1:
        pts = np.repeat(pts, 2, axis=0)
    raster.draw_polyline(canvas, pts, (0.85, 0.25, 0.2), 2.5)
    return np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
