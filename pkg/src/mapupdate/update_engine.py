"""End-to-end inference: turn raw network output into an updated vectorized
tile plus per-instance change records.

Pipeline: softmax the affinity matrix, filter unreliable pairs, Hungarian
assignment, apply the four change rules, then assemble the updated tile with
historical geometry kept verbatim wherever nothing changed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import raster
from .change_oracle import masked_assignment
from .errors import ConfigError
from .map_model import (ADDITION, CLOSED_STYLES, DELETION, NO_CHANGE, STYLES,
                        STYLE_CHANGE, ChangeRecord, LaneInstance,
                        VectorMapTile, geo_to_pixel_array)
from .model_core import MapUpdateNet, Prediction, load_checkpoint, predict


@dataclass(frozen=True)
class InferenceConfig:
    conf_threshold: float = 0.5       # association softmax score gate
    style_floor: float = 0.3          # lower gate for style-inconsistent pairs
    keep_threshold: float = 0.4       # instance confidence gate
    snap_eps_m: float = 0.15          # border snap distance for new geometry
    historical_priority: bool = True  # unchanged/style-change keep stored geometry

    def __post_init__(self):
        for name in ("conf_threshold", "style_floor", "keep_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.snap_eps_m < 0:
            raise ConfigError("snap_eps_m must be >= 0")


def filter_associations(affinity_softmax: np.ndarray, pred_styles: np.ndarray,
                        hist_styles: np.ndarray, conf_threshold: float = 0.5,
                        style_floor: float = 0.3) -> np.ndarray:
    """Score matrix over real historical columns with ineligible pairs at -inf.

    A pair must reach ``conf_threshold``; style-inconsistent pairs are
    additionally removed below ``style_floor`` (live when the main gate is
    configured lower). Rows whose argmax is the no-match column are declared
    additions up front and excluded from assignment entirely.
    """
    a = np.asarray(affinity_softmax, dtype=np.float64)
    n = a.shape[0]
    m = a.shape[1] - 1
    scores = a[:, :m].copy()
    eligible = scores >= conf_threshold
    if m:
        inconsistent = np.asarray(pred_styles)[:, None] != np.asarray(hist_styles)[None, :]
        eligible &= ~(inconsistent & (scores < style_floor))
    none_rows = a.argmax(axis=1) == m
    eligible[none_rows, :] = False
    scores[~eligible] = -np.inf
    return scores


def assign(filtered_scores: np.ndarray) -> np.ndarray:
    """Maximum-total-score one-to-one partial assignment.

    Returns the binary matrix with row and column sums <= 1; -inf pairs are
    never assigned.
    """
    scores = np.asarray(filtered_scores, dtype=np.float64)
    result = np.zeros(scores.shape, dtype=np.int8)
    eligible = np.isfinite(scores)
    if not eligible.any():
        return result
    for i, j in masked_assignment(-scores, eligible):
        result[i, j] = 1
    return result


def generate_changes(assignment: np.ndarray, pred_instances: list[LaneInstance],
                     confidences: np.ndarray, historical: VectorMapTile,
                     keep_threshold: float = 0.4) -> list[ChangeRecord]:
    """Apply the four change rules to an assignment matrix.

    Predictions below ``keep_threshold`` are dropped first (they produce no
    record and release any column they held). Every kept prediction and every
    historical instance lands in exactly one record.
    """
    m = np.asarray(assignment)
    if m.ndim != 2 or m.shape != (len(pred_instances), len(historical.instances)):
        raise ConfigError(f"assignment shape {m.shape} does not match instances")
    if (m.sum(axis=0) > 1).any() or (m.sum(axis=1) > 1).any():
        raise ConfigError("assignment must have row and column sums <= 1")
    keep = np.asarray(confidences) >= keep_threshold
    records = []
    matched_cols = set()
    for i, inst in enumerate(pred_instances):
        if not keep[i]:
            continue
        cols = np.flatnonzero(m[i])
        if cols.size == 0:
            records.append(ChangeRecord(ADDITION, predicted_id=inst.id))
            continue
        j = int(cols[0])
        matched_cols.add(j)
        hist = historical.instances[j]
        kind = NO_CHANGE if inst.style == hist.style else STYLE_CHANGE
        records.append(ChangeRecord(kind, inst.id, hist.id))
    for j, hist in enumerate(historical.instances):
        if j not in matched_cols:
            records.append(ChangeRecord(DELETION, historical_id=hist.id))
    return records


def _snap_to_borders(points: np.ndarray, extent, eps: float) -> np.ndarray:
    pts = points.copy()
    ex, ey = extent
    for idx in (0, -1):  # endpoints only
        x, y = pts[idx]
        if x < eps:
            pts[idx, 0] = 0.0
        elif x > ex - eps:
            pts[idx, 0] = ex
        if y < eps:
            pts[idx, 1] = 0.0
        elif y > ey - eps:
            pts[idx, 1] = ey
    return pts


def assemble_updated_map(pred_instances: list[LaneInstance], changes: list[ChangeRecord],
                         historical: VectorMapTile,
                         cfg: InferenceConfig | None = None) -> VectorMapTile:
    """Build the updated tile from change records.

    Unchanged instances reuse the historical geometry and style verbatim;
    style changes keep historical geometry with the predicted style; added
    instances come from the prediction with near-border endpoints snapped
    onto the border. Deletions are omitted.
    """
    cfg = cfg or InferenceConfig()
    pred_by_id = {inst.id: inst for inst in pred_instances}
    extent = historical.extent
    out = []
    for rec in changes:
        if rec.kind == DELETION:
            continue
        if rec.kind == ADDITION:
            inst = pred_by_id[rec.predicted_id]
            pts = inst.points
            if not inst.is_closed:
                pts = _snap_to_borders(pts, extent, cfg.snap_eps_m)
            out.append(LaneInstance(rec.predicted_id, pts, inst.style, "predicted"))
            continue
        hist = historical.get(rec.historical_id)
        pred = pred_by_id[rec.predicted_id]
        if rec.kind == NO_CHANGE:
            out.append(LaneInstance(hist.id, hist.points, hist.style, "predicted"))
        else:  # style change: stored geometry, predicted style
            if cfg.historical_priority:
                out.append(LaneInstance(hist.id, hist.points, pred.style, "predicted"))
            else:
                pts = pred.points if pred.is_closed else _snap_to_borders(
                    pred.points, extent, cfg.snap_eps_m)
                out.append(LaneInstance(hist.id, pts, pred.style, "predicted"))
    return historical.replace_instances(out, role="predicted")


def prediction_to_instances(pred: Prediction, prefix: str = "p") -> list[LaneInstance]:
    """Materialize raw network output as lane instances (argmax styles)."""
    styles = pred.style_logits.argmax(axis=1)
    return [LaneInstance(f"{prefix}{i:03d}", pred.points[i], STYLES[int(styles[i])],
                         "predicted")
            for i in range(pred.points.shape[0])]


@dataclass
class InferResult:
    updated: VectorMapTile
    changes: list[ChangeRecord]
    prediction: Prediction
    pred_instances: list[LaneInstance] = field(default_factory=list)
    kept_instances: list[LaneInstance] = field(default_factory=list)


def infer(image: np.ndarray, historical: VectorMapTile,
          model: MapUpdateNet | str | Path,
          cfg: InferenceConfig | None = None) -> InferResult:
    """Full inference: forward pass, association filtering and assignment,
    change generation, and updated-map assembly. Deterministic for a fixed
    checkpoint and input."""
    cfg = cfg or InferenceConfig()
    if not isinstance(model, MapUpdateNet):
        model, _ = load_checkpoint(model)
    pred = predict(model, image, historical)
    pred_instances = prediction_to_instances(pred)
    pred_styles = pred.style_logits.argmax(axis=1)
    hist_styles = np.array([STYLES.index(inst.style) for inst in historical.instances],
                           dtype=np.int64)
    scores = filter_associations(pred.affinity_softmax, pred_styles, hist_styles,
                                 cfg.conf_threshold, cfg.style_floor)
    assignment = assign(scores)
    changes = generate_changes(assignment, pred_instances, pred.confidence,
                               historical, cfg.keep_threshold)
    updated = assemble_updated_map(pred_instances, changes, historical, cfg)
    kept = [pred_instances[i] for i in range(len(pred_instances))
            if pred.confidence[i] >= cfg.keep_threshold]
    return InferResult(updated, changes, pred, pred_instances, kept)


# ---------------------------------------------------------------------------
# Diff rendering (historical | BEV | updated)
# ---------------------------------------------------------------------------

# Change colors: addition red, deletion yellow, style change green,
# no change light purple.
_CHANGE_COLORS = {
    ADDITION: (0.95, 0.2, 0.2),
    DELETION: (0.95, 0.85, 0.2),
    STYLE_CHANGE: (0.25, 0.85, 0.3),
    NO_CHANGE: (0.8, 0.65, 0.95),
}
_PANEL_BG = (0.08, 0.08, 0.1)


def render_diff_panels(historical: VectorMapTile, image: np.ndarray,
                       updated: VectorMapTile, changes: list[ChangeRecord]) -> np.ndarray:
    """Side-by-side uint8 RGB rendering with change-kind coloring."""
    h, w = image.shape[0], image.shape[1]
    kind_by_pred = {r.predicted_id: r.kind for r in changes if r.predicted_id}
    deleted_ids = {r.historical_id for r in changes if r.kind == DELETION}

    def draw_tile(tile, colors_by_id, default=(0.75, 0.75, 0.75), dashed_ids=()):
        canvas = np.zeros((h, w, 3), dtype=np.float32)
        canvas[:] = _PANEL_BG
        for inst in tile.instances:
            color = colors_by_id.get(inst.id, default)
            dash = (6.0, 6.0) if inst.id in dashed_ids else None
            raster.draw_polyline(canvas, geo_to_pixel_array(inst.points, tile), color,
                                 width_px=2.0, dash_px=dash, closed=inst.is_closed)
        return canvas

    hist_panel = draw_tile(historical, {}, default=(0.7, 0.7, 0.7))
    upd_colors = {}
    for inst in updated.instances:
        upd_colors[inst.id] = _CHANGE_COLORS.get(kind_by_pred.get(inst.id, NO_CHANGE))
    upd_panel = draw_tile(updated, upd_colors)
    # Ghost deleted historical instances on the updated panel.
    ghost = historical.replace_instances(
        [inst for inst in historical.instances if inst.id in deleted_ids])
    for inst in ghost.instances:
        raster.draw_polyline(upd_panel, geo_to_pixel_array(inst.points, ghost),
                             _CHANGE_COLORS[DELETION], width_px=2.0, dash_px=(5.0, 5.0),
                             closed=inst.is_closed)
    bev_panel = image.astype(np.float32) / 255.0
    gap = np.full((h, 4, 3), 1.0, dtype=np.float32)
    strip = np.concatenate([hist_panel, gap, bev_panel, gap, upd_panel], axis=1)
    return np.clip(np.rint(strip * 255.0), 0, 255).astype(np.uint8)
