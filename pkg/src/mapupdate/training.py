"""Two-stage matching, the multi-task loss stack, and the training loop.

Stage 1 assigns predictions to ground-truth instances (Hungarian over point
L1 + style cost, point order resolved over the equivalent orderings of each
element). Stage 2 composes that with the oracle's ground-truth-to-historical
mapping to supervise the association matrix; predictions matched to added
instances are excluded from the change loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .change_oracle import hungarian_assign
from .errors import ConfigError, TrainingError
from .map_model import (ADDITION, NO_CHANGE, STYLE_CHANGE,
                        STYLE_INDEX as STYLE_LOOKUP, VectorMapTile)
from .model_core import (MapUpdateNet, ModelConfig, image_to_tensor,
                         save_checkpoint, tile_to_tensors)
from .synth_world import load_manifest, load_sample, split_indices

_EPS_PROB = 1e-7
_EPS_SEGMENT = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 6e-4                 # cosine-decayed to ~0 over the step budget
    weight_decay: float = 0.01
    clip_norm: float = 5.0
    alpha: float = 1.0               # map-element loss weight
    beta: float = 1.0                # change loss weight
    w_l1: float = 1.0                # internal weights of the three map-element parts
    w_direction: float = 1.0
    w_aligned: float = 1.0
    aligned_gamma: float = 2.0
    distance_cap_m: float = 1.0      # distance -> alignment-target cap
    focal_gamma: float = 2.0
    match_point_weight: float = 5.0
    match_style_weight: float = 1.0
    deep_supervision: bool = True    # supervise every decoder layer's heads
    checkpoint_every: int = 500
    seed: int = 0
    num_threads: int = 0             # 0 = leave torch's default

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0 or self.clip_norm <= 0:
            raise ConfigError("invalid optimizer settings")
        if self.distance_cap_m <= 0:
            raise ConfigError("distance_cap_m must be positive")


# ---------------------------------------------------------------------------
# Stage-1 matching (prediction <-> ground truth)
# ---------------------------------------------------------------------------

def _ordering_variants(points: np.ndarray, closed: bool) -> np.ndarray:
    """Equivalent point orderings of one element: forward/reverse for open
    polylines, cyclic shifts in both directions for closed loops."""
    if not closed:
        return np.stack([points, points[::-1]])
    n = len(points)
    fwd = [np.roll(points, -k, axis=0) for k in range(n)]
    rev = [np.roll(points[::-1], -k, axis=0) for k in range(n)]
    return np.stack(fwd + rev)


@dataclass
class Stage1Match:
    pred_idx: np.ndarray         # (K,) matched prediction rows
    gt_idx: np.ndarray           # (K,) matched ground-truth rows
    aligned_gt_points: np.ndarray  # (K, N_p, 2) meters, best point ordering
    pair_distance_m: np.ndarray  # (K,) mean L1 point distance of each pair
    num_preds: int
    num_gt: int


def stage1_match(pred_points_m: np.ndarray, pred_style_probs: np.ndarray,
                 gt_tile: VectorMapTile, point_weight: float = 5.0,
                 style_weight: float = 1.0) -> Stage1Match:
    """Instance-level Hungarian over point-set L1 + style cost.

    pred_points_m: (N, N_p, 2) meters. The ground truth is normalized to the
    prediction's point count; every GT instance is matched when N >= K.
    """
    n, n_p = pred_points_m.shape[0], pred_points_m.shape[1]
    gt_norm = gt_tile.normalized(n_p)
    ex, ey = gt_tile.extent
    scale = np.array([ex, ey])
    k = len(gt_norm.instances)
    if k == 0 or n == 0:
        return Stage1Match(np.zeros(0, np.int64), np.zeros(0, np.int64),
                           np.zeros((0, n_p, 2)), np.zeros(0), n, k)
    pred_rel = pred_points_m / scale
    cost = np.zeros((n, k))
    best_variant = np.zeros((n, k), dtype=np.int64)
    variants_per_gt = []
    for j, inst in enumerate(gt_norm.instances):
        variants = _ordering_variants(inst.points, inst.is_closed)
        variants_per_gt.append(variants)
        diff = np.abs(pred_rel[:, None, :, :] - (variants / scale)[None, :, :, :])
        geo = diff.mean(axis=(2, 3))               # (N, V) mean |coord| error
        best_variant[:, j] = geo.argmin(axis=1)
        style_cost = 1.0 - pred_style_probs[:, STYLE_LOOKUP[inst.style]]
        cost[:, j] = point_weight * geo.min(axis=1) + style_weight * style_cost
    pairs = hungarian_assign(cost)
    pred_idx = np.array([p for p, _ in pairs], dtype=np.int64)
    gt_idx = np.array([g for _, g in pairs], dtype=np.int64)
    aligned = np.stack([variants_per_gt[g][best_variant[p, g]]
                        for p, g in pairs]) if pairs else np.zeros((0, n_p, 2))
    dist = (np.abs(pred_points_m[pred_idx] - aligned).sum(axis=2).mean(axis=1)
            if pairs else np.zeros(0))
    return Stage1Match(pred_idx, gt_idx, aligned, dist, n, k)


# ---------------------------------------------------------------------------
# Stage-2 association targets (prediction <-> historical)
# ---------------------------------------------------------------------------

@dataclass
class ChangeTargets:
    targets: dict[int, int]      # prediction row -> historical column, M = none
    excluded: frozenset[int]     # prediction rows matched to added instances
    num_hist: int


def gt_to_historical_from_records(records) -> dict[str, str | None]:
    """Oracle records on (ground_truth, historical) -> per-GT-instance mapping;
    None marks an addition."""
    mapping: dict[str, str | None] = {}
    for rec in records:
        if rec.kind in (NO_CHANGE, STYLE_CHANGE):
            mapping[rec.predicted_id] = rec.historical_id
        elif rec.kind == ADDITION:
            mapping[rec.predicted_id] = None
    return mapping


def stage2_targets(stage1: Stage1Match, gt_ids: list[str],
                   gt_to_historical: dict[str, str | None],
                   hist_ids: list[str]) -> ChangeTargets:
    """Compose prediction->GT with GT->historical into association targets.

    Predictions whose GT instance is an addition are excluded from the change
    loss; unmatched predictions target the no-match column.
    """
    hist_col = {hid: j for j, hid in enumerate(hist_ids)}
    m = len(hist_ids)
    targets: dict[int, int] = {}
    excluded = set()
    matched = {}
    for p, g in zip(stage1.pred_idx, stage1.gt_idx):
        matched[int(p)] = gt_ids[int(g)]
    for p in range(stage1.num_preds):
        gid = matched.get(p)
        if gid is None:
            targets[p] = m  # no ground-truth counterpart: supervise "none"
            continue
        hid = gt_to_historical.get(gid)
        if hid is None:
            excluded.add(p)
        else:
            targets[p] = hist_col[hid]
    return ChangeTargets(targets, frozenset(excluded), m)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def l1_and_direction_loss(pred_points_m: torch.Tensor, gt_points_m: torch.Tensor,
                          extent: tuple[float, float]) -> tuple[torch.Tensor, torch.Tensor]:
    """Point regression and segment-direction losses over matched pairs.

    L1 is the mean per-point L1 norm with coordinates normalized by the tile
    extent; direction is mean (1 - cos) between corresponding segment vectors,
    skipping zero-length segments.
    """
    if pred_points_m.numel() == 0:
        zero = pred_points_m.sum() * 0.0
        return zero, zero.clone()
    scale = pred_points_m.new_tensor(extent)
    l1 = (torch.abs(pred_points_m - gt_points_m) / scale).sum(dim=2).mean()
    pred_seg = pred_points_m[:, 1:] - pred_points_m[:, :-1]
    gt_seg = gt_points_m[:, 1:] - gt_points_m[:, :-1]
    pn = pred_seg.norm(dim=2)
    gn = gt_seg.norm(dim=2)
    valid = (pn > _EPS_SEGMENT) & (gn > _EPS_SEGMENT)
    if not valid.any():
        return l1, l1 * 0.0
    cos = (pred_seg * gt_seg).sum(dim=2) / (pn * gn).clamp_min(_EPS_SEGMENT)
    direction = (1.0 - cos[valid]).mean()
    return l1, direction


def aligned_cls_loss(pos_probs: torch.Tensor, pos_distances_m: torch.Tensor,
                     neg_probs: torch.Tensor, gamma: float = 2.0,
                     distance_cap: float = 1.0) -> torch.Tensor:
    """Distance-aligned classification loss.

    Positives carry an alignment target t = max(0, 1 - d / cap) used as both
    the BCE target and the |t - p|^gamma weight; negatives are pushed to zero
    with a p^gamma weight. Probabilities are clamped away from {0, 1}.
    """
    total = None
    if pos_probs.numel():
        t = (1.0 - pos_distances_m / distance_cap).clamp(min=0.0, max=1.0)
        p = pos_probs.clamp(_EPS_PROB, 1.0 - _EPS_PROB)
        bce = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p))
        total = (torch.abs(t - p) ** gamma * bce).sum()
    if neg_probs.numel():
        p = neg_probs.clamp(_EPS_PROB, 1.0 - _EPS_PROB)
        neg = (p ** gamma * -torch.log(1.0 - p)).sum()
        total = neg if total is None else total + neg
    if total is None:
        total = pos_probs.sum() * 0.0
    return total


def change_loss(affinity_logits: torch.Tensor, targets: ChangeTargets,
                gamma: float = 2.0) -> torch.Tensor:
    """Row-wise focal loss on the softmaxed association matrix, averaged over
    retained rows; excluded (addition) rows contribute nothing."""
    rows = sorted(targets.targets.keys())
    if not rows:
        return affinity_logits.sum() * 0.0
    idx = affinity_logits.new_tensor(rows, dtype=torch.long)
    cols = affinity_logits.new_tensor([targets.targets[r] for r in rows], dtype=torch.long)
    logp = torch.log_softmax(affinity_logits[idx], dim=1)
    logp_t = logp.gather(1, cols.unsqueeze(1)).squeeze(1)
    p_t = logp_t.exp()
    return ((1.0 - p_t) ** gamma * -logp_t).mean()


@dataclass
class LossReport:
    l1: float
    direction: float
    aligned_cls: float
    change: float
    alpha: float
    beta: float
    total: float = field(init=False)

    def __post_init__(self):
        for name in ("l1", "direction", "aligned_cls", "change"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss part {name!r}: {value}")
        self.total = (self.alpha * (self.l1 + self.direction + self.aligned_cls)
                      + self.beta * self.change)

    def to_dict(self) -> dict:
        return {"l1": self.l1, "direction": self.direction,
                "aligned_cls": self.aligned_cls, "change": self.change,
                "total": self.total}


def total_loss(l1: float, direction: float, aligned_cls: float, change: float,
               alpha: float = 1.0, beta: float = 1.0) -> LossReport:
    return LossReport(float(l1), float(direction), float(aligned_cls), float(change),
                      float(alpha), float(beta))


# ---------------------------------------------------------------------------
# Per-sample loss assembly
# ---------------------------------------------------------------------------

@dataclass
class TrainSample:
    image: np.ndarray            # (H, W, 3) uint8
    hist_points: torch.Tensor    # (M, N_p, 2) normalized
    hist_styles: torch.Tensor    # (M,)
    hist_ids: list[str]
    gt_tile: VectorMapTile
    gt_ids: list[str]
    gt_to_historical: dict[str, str | None]


def prepare_sample(pair, model_cfg: ModelConfig) -> TrainSample:
    hist_points, hist_styles = tile_to_tensors(pair.historical, model_cfg)
    return TrainSample(
        image=pair.image,
        hist_points=hist_points,
        hist_styles=hist_styles,
        hist_ids=[inst.id for inst in pair.historical.instances],
        gt_tile=pair.ground_truth,
        gt_ids=[inst.id for inst in pair.ground_truth.instances],
        gt_to_historical=gt_to_historical_from_records(pair.changes),
    )


def sample_losses(output: dict, batch_index: int, sample: TrainSample,
                  cfg: TrainConfig, extent: tuple[float, float]) -> dict[str, torch.Tensor]:
    """Assemble the four loss parts for one sample of a batched forward."""
    points_norm = output["points_norm"][batch_index]
    style_logits = output["style_logits"][batch_index]
    affinity = output["affinity"][batch_index]
    scale = points_norm.new_tensor(extent)
    points_m = points_norm * scale
    style_probs = torch.sigmoid(style_logits)

    match = stage1_match(points_m.detach().cpu().numpy().astype(np.float64),
                         style_probs.detach().cpu().numpy().astype(np.float64),
                         sample.gt_tile,
                         point_weight=cfg.match_point_weight,
                         style_weight=cfg.match_style_weight)

    if len(match.pred_idx):
        pred_sel = points_m[torch.from_numpy(match.pred_idx)]
        gt_sel = points_m.new_tensor(match.aligned_gt_points)
        l1, direction = l1_and_direction_loss(pred_sel, gt_sel, extent)
    else:
        l1 = points_m.sum() * 0.0
        direction = l1.clone()

    gt_norm = sample.gt_tile.normalized(points_norm.shape[1])
    pos_mask = torch.zeros_like(style_probs, dtype=torch.bool)
    if len(match.pred_idx):
        gt_styles = [STYLE_LOOKUP[gt_norm.instances[g].style] for g in match.gt_idx]
        rows = torch.from_numpy(match.pred_idx)
        cols = torch.tensor(gt_styles, dtype=torch.long)
        pos_mask[rows, cols] = True
        pos_probs = style_probs[rows, cols]
        pos_dist = style_probs.new_tensor(match.pair_distance_m)
    else:
        pos_probs = style_probs.new_zeros(0)
        pos_dist = style_probs.new_zeros(0)
    neg_probs = style_probs[~pos_mask]
    aligned = aligned_cls_loss(pos_probs, pos_dist, neg_probs,
                               gamma=cfg.aligned_gamma, distance_cap=cfg.distance_cap_m)

    targets = stage2_targets(match, sample.gt_ids, sample.gt_to_historical,
                             sample.hist_ids)
    change = change_loss(affinity, targets, gamma=cfg.focal_gamma)
    return {"l1": l1, "direction": direction, "aligned_cls": aligned, "change": change}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    log_path: Path
    model: MapUpdateNet
    losses: list[LossReport]


def load_train_samples(dataset_root, model_cfg: ModelConfig,
                       split: str = "train") -> list[TrainSample]:
    manifest = load_manifest(dataset_root)
    indices = split_indices(manifest, split)
    return [prepare_sample(load_sample(dataset_root, split, i), model_cfg)
            for i in indices]


def train(samples: list[TrainSample], model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir) -> TrainResult:
    """Run the optimization loop and write checkpoints plus a JSONL loss log."""
    if not samples:
        raise ConfigError("training requires at least one sample")
    if cfg.num_threads > 0:
        torch.set_num_threads(cfg.num_threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    model = MapUpdateNet(model_cfg)
    model.train()
    extent = (model_cfg.extent_m, model_cfg.extent_m)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []

    def next_batch() -> list[int]:
        nonlocal order
        batch = []
        while len(batch) < cfg.batch_size:
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(order.pop())
        return batch

    final_path = out / "final.pt"
    best_path = out / "best.pt"
    log_path = out / "train_log.jsonl"
    best_total = math.inf
    smoothed = None
    reports: list[LossReport] = []
    with open(log_path, "w", encoding="utf-8") as log:
        for step in range(cfg.steps):
            lr = cosine_lr(cfg.lr, step, cfg.steps)
            for group in optimizer.param_groups:
                group["lr"] = lr
            batch = next_batch()
            images = torch.stack([image_to_tensor(samples[i].image) for i in batch])
            out_fwd = model(images,
                            [samples[i].hist_points for i in batch],
                            [samples[i].hist_styles for i in batch],
                            all_layers=cfg.deep_supervision)
            layer_outputs = [out_fwd, *out_fwd.get("aux", [])]
            parts = {"l1": 0.0, "direction": 0.0, "aligned_cls": 0.0, "change": 0.0}
            for bi, si in enumerate(batch):
                for layer_out in layer_outputs:
                    sample_parts = sample_losses(layer_out, bi, samples[si], cfg, extent)
                    for key, value in sample_parts.items():
                        parts[key] = parts[key] + value
            scale = 1.0 / (len(batch) * len(layer_outputs))
            l1 = parts["l1"] * scale * cfg.w_l1
            direction = parts["direction"] * scale * cfg.w_direction
            aligned = parts["aligned_cls"] * scale * cfg.w_aligned
            change = parts["change"] * scale
            loss = cfg.alpha * (l1 + direction + aligned) + cfg.beta * change
            report = total_loss(l1.item(), direction.item(), aligned.item(),
                                change.item(), cfg.alpha, cfg.beta)
            reports.append(report)
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
            optimizer.step()
            log.write(json.dumps({"step": step, "lr": lr, **report.to_dict()}) + "\n")
            log.flush()
            smoothed = report.total if smoothed is None else 0.9 * smoothed + 0.1 * report.total
            if (step % 50 == 0 or step == cfg.steps - 1) and smoothed < best_total:
                best_total = smoothed
                save_checkpoint(model, best_path, {"step": step, "smoothed_total": smoothed})
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"step_{step + 1:06d}.pt", {"step": step + 1})
    save_checkpoint(model, final_path, {"step": cfg.steps})
    if not best_path.exists():
        save_checkpoint(model, best_path, {"step": cfg.steps})
    return TrainResult(final_path, best_path, log_path, model, reports)
