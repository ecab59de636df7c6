"""Deterministic synthetic-scene generation: lane layouts, injected changes,
BEV rasterization, and on-disk datasets of (image, historical, truth, changes)
sample pairs.

Everything is a pure function of (config, seed); per-sample RNGs are spawned
from (master seed, sample index) so generation parallelizes and reproduces.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import raster
from .change_oracle import (DEFAULT_MATCH_THRESHOLD, chamfer_distance,
                            label_changes)
from .errors import ConfigError, MapUpdateError
from .map_model import (CLOSED_STYLES, DEFAULT_POINTS_PER_INSTANCE, STYLES,
                        ChangeRecord, LaneInstance, VectorMapTile,
                        geo_to_pixel_array, polyline_length,
                        read_change_records, read_tile, resample_loop,
                        resample_polyline, write_change_records, write_tile)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")

# Stroke rendering per style: (intensity, width in meters, dash on/off in
# meters or None). Intensities are deliberately distinct so styles remain
# separable even when strokes collapse to single-pixel width.
_STYLE_STROKES = {
    "solid": (1.00, 0.18, None),
    "dashed": (1.00, 0.18, (1.6, 1.6)),
    "double_solid": (0.85, 0.15, None),
    "curb": (0.62, 0.60, None),
    "crosswalk_edge": (0.78, 0.15, None),
}
_DOUBLE_GAP_M = 0.7  # separation between the two strokes of double_solid
_BACKGROUND = 0.10
_OCCLUSION_INTENSITY = 0.30

# Geometry knobs that are properties of the renderer/generator, not the config
# surface: minimum usable boundary length and the clearance (relative to the
# 1 m oracle threshold) that keeps injected geometry unambiguous.
_MIN_BOUNDARY_LEN_M = 8.0
_INJECT_CLEARANCE_M = 1.3
_ROAD_SEPARATION_M = 2.0


@dataclass(frozen=True)
class RasterConfig:
    width_px: int = 768
    height_px: int = 768
    pixels_per_meter: float = 25.0

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise ConfigError("raster dimensions must be positive")
        if self.pixels_per_meter <= 0:
            raise ConfigError("pixels_per_meter must be positive")

    @property
    def extent(self) -> tuple[float, float]:
        return (self.width_px / self.pixels_per_meter,
                self.height_px / self.pixels_per_meter)


@dataclass(frozen=True)
class NoiseConfig:
    amplitude: float = 0.04          # additive gaussian sigma, intensity units
    occlusion_rate: float = 0.1      # expected occlusion patches per sample
    occlusion_size: tuple[float, float] = (3.0, 9.0)  # patch edge range, meters

    def __post_init__(self):
        if self.amplitude < 0 or self.occlusion_rate < 0:
            raise ConfigError("noise parameters must be non-negative")
        if self.occlusion_size[0] > self.occlusion_size[1] or self.occlusion_size[0] <= 0:
            raise ConfigError("occlusion_size range is empty")


@dataclass(frozen=True)
class ChangeRates:
    style_change: float = 0.10
    addition: float = 0.10
    deletion: float = 0.10

    def __post_init__(self):
        for name in ("style_change", "addition", "deletion"):
            rate = getattr(self, name)
            if rate < 0 or rate > 1:
                raise ConfigError(f"change_rates.{name} must lie in [0, 1], got {rate}")
        if self.style_change + self.addition + self.deletion > 1.0 + 1e-12:
            raise ConfigError("change rates must jointly be <= 1")


@dataclass(frozen=True)
class SceneConfig:
    rng_seed: int = 0
    road_count: tuple[int, int] = (1, 2)
    lanes_per_road: tuple[int, int] = (2, 4)
    curvature: tuple[float, float] = (-0.015, 0.015)  # 1/m, signed
    lane_width: tuple[float, float] = (3.2, 4.0)      # meters
    perturb_offset: tuple[float, float] = (1.5, 2.5)  # lateral shift of perturbed lanes
    crosswalk_rate: float = 0.25                      # per road
    change_rates: ChangeRates = field(default_factory=ChangeRates)
    raster: RasterConfig = field(default_factory=RasterConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    n_points: int = DEFAULT_POINTS_PER_INSTANCE

    def __post_init__(self):
        for name in ("road_count", "lanes_per_road", "curvature", "lane_width",
                     "perturb_offset"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigError(f"{name} range is empty: {lo} > {hi}")
        if self.road_count[0] < 0 or self.lanes_per_road[0] < 1:
            raise ConfigError("road_count must be >= 0 and lanes_per_road >= 1")
        if self.lane_width[0] <= 0:
            raise ConfigError("lane_width must be positive")
        if self.perturb_offset[0] <= DEFAULT_MATCH_THRESHOLD:
            raise ConfigError("perturb_offset must exceed the 1 m match threshold")
        if not 0 <= self.crosswalk_rate <= 1:
            raise ConfigError("crosswalk_rate must lie in [0, 1]")
        if self.n_points < 2:
            raise ConfigError("n_points must be >= 2")


@dataclass(frozen=True)
class SamplePair:
    """Training/eval unit: BEV raster plus the tile pair and oracle labels."""

    image: np.ndarray  # (H, W, 3) uint8
    historical: VectorMapTile
    ground_truth: VectorMapTile
    changes: tuple[ChangeRecord, ...]


def sample_rng(master_seed: int, index: int) -> np.random.Generator:
    """Independent child generator for one sample index."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, index)))


# ---------------------------------------------------------------------------
# Scene geometry
# ---------------------------------------------------------------------------

def _offset_curve(anchor, direction, curvature, offset, half_len, n_dense=600):
    """Dense points of the centerline's parallel curve at a signed offset."""
    ax, ay = anchor
    dx, dy = direction
    nx, ny = -dy, dx
    if abs(curvature) < 1e-6:
        t = np.linspace(-half_len, half_len, n_dense)
        return np.stack([ax + t * dx + offset * nx, ay + t * dy + offset * ny], axis=1)
    radius = 1.0 / curvature
    ox, oy = ax + radius * nx, ay + radius * ny
    a0 = np.arctan2(ay - oy, ax - ox)
    sweep = half_len / abs(radius)
    # The sign of the angular step must follow the travel direction.
    sign = -np.sign(radius)
    alpha = a0 + sign * np.linspace(-sweep, sweep, n_dense)
    r = abs(radius - offset)
    return np.stack([ox + r * np.cos(alpha), oy + r * np.sin(alpha)], axis=1)


def _clip_to_extent(points: np.ndarray, extent) -> np.ndarray | None:
    """Longest contiguous in-extent run of a dense polyline, or None."""
    ex, ey = extent
    inside = ((points[:, 0] >= 0) & (points[:, 0] <= ex)
              & (points[:, 1] >= 0) & (points[:, 1] <= ey))
    if not inside.any():
        return None
    best_start, best_len, start = 0, 0, None
    for i, flag in enumerate(np.concatenate([inside, [False]])):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            if i - start > best_len:
                best_start, best_len = start, i - start
            start = None
    if best_len < 2:
        return None
    return points[best_start:best_start + best_len]


def _min_chamfer(points: np.ndarray, instances) -> float:
    if not instances:
        return np.inf
    return min(chamfer_distance(points, inst.points) for inst in instances)


def _mean_normal(points: np.ndarray) -> np.ndarray:
    chord = points[-1] - points[0]
    norm = np.linalg.norm(chord)
    if norm < 1e-9:
        return np.array([0.0, 1.0])
    return np.array([-chord[1], chord[0]]) / norm


def _build_road(config: SceneConfig, rng: np.random.Generator, extent, existing):
    """One road's boundary polylines (+ optional crosswalk loop), or None."""
    ex, ey = extent
    diag = float(np.hypot(ex, ey))
    for _ in range(12):
        theta = rng.uniform(0.0, np.pi)
        direction = (np.cos(theta), np.sin(theta))
        anchor = (ex * (0.5 + rng.uniform(-0.22, 0.22)),
                  ey * (0.5 + rng.uniform(-0.22, 0.22)))
        curvature = rng.uniform(*config.curvature)
        lanes = int(rng.integers(config.lanes_per_road[0], config.lanes_per_road[1] + 1))
        width = rng.uniform(*config.lane_width)
        n_bounds = lanes + 1
        offsets = (np.arange(n_bounds) - (n_bounds - 1) / 2.0) * width
        boundaries = []
        ok = True
        for off in offsets:
            dense = _offset_curve(anchor, direction, curvature, off, diag)
            clipped = _clip_to_extent(dense, extent)
            if clipped is None or polyline_length(clipped) < _MIN_BOUNDARY_LEN_M:
                ok = False
                break
            boundaries.append(resample_polyline(clipped, config.n_points))
        if not ok:
            continue
        if existing and min(_min_chamfer(b, existing) for b in boundaries) < _ROAD_SEPARATION_M:
            continue
        styles = []
        for k in range(n_bounds):
            if k == 0 or k == n_bounds - 1:
                styles.append(str(rng.choice(["solid", "curb"], p=[0.6, 0.4])))
            else:
                styles.append(str(rng.choice(["dashed", "double_solid", "solid"],
                                             p=[0.6, 0.25, 0.15])))
        crosswalk = None
        if rng.uniform() < config.crosswalk_rate:
            crosswalk = _build_crosswalk(anchor, direction, curvature, offsets, rng,
                                         extent, config.n_points)
            if crosswalk is not None and existing and _min_chamfer(crosswalk, existing) < _ROAD_SEPARATION_M:
                crosswalk = None
        return boundaries, styles, crosswalk
    return None


def _build_crosswalk(anchor, direction, curvature, offsets, rng, extent, n_points):
    centerline = _offset_curve(anchor, direction, curvature, 0.0, np.hypot(*extent))
    clipped = _clip_to_extent(centerline, extent)
    if clipped is None or len(clipped) < 10:
        return None
    k = int(rng.integers(int(0.3 * len(clipped)), int(0.7 * len(clipped))))
    center = clipped[k]
    tangent = clipped[min(k + 1, len(clipped) - 1)] - clipped[max(k - 1, 0)]
    tn = np.linalg.norm(tangent)
    if tn < 1e-9:
        return None
    tangent = tangent / tn
    normal = np.array([-tangent[1], tangent[0]])
    half_across = offsets.max() + 0.8   # span the whole road plus a margin
    half_along = 1.5
    corners = np.stack([
        center + half_along * tangent + half_across * normal,
        center + half_along * tangent - half_across * normal,
        center - half_along * tangent - half_across * normal,
        center - half_along * tangent + half_across * normal,
    ])
    ex, ey = extent
    if (corners[:, 0].min() < 0.2 or corners[:, 0].max() > ex - 0.2
            or corners[:, 1].min() < 0.2 or corners[:, 1].max() > ey - 0.2):
        return None
    return resample_loop(corners, n_points)


def _flip_style(style: str, rng: np.random.Generator) -> str | None:
    pool = [s for s in STYLES
            if s != style and (s in CLOSED_STYLES) == (style in CLOSED_STYLES)]
    if not pool:
        return None
    return str(rng.choice(pool))


def _shifted_copy(points: np.ndarray, delta: float, extent,
                  n_points: int) -> np.ndarray | None:
    """Laterally shifted copy of a polyline, clipped back into the extent."""
    dense = resample_polyline(points, 200) + delta * _mean_normal(points)
    clipped = _clip_to_extent(dense, extent)
    if clipped is None or polyline_length(clipped) < _MIN_BOUNDARY_LEN_M:
        return None
    return resample_polyline(clipped, n_points)


def generate_scene(config: SceneConfig, rng: np.random.Generator | None = None,
                   tile_id: str = "synthetic", with_log: bool = False):
    """Build a (historical, ground_truth) tile pair with injected changes.

    With ``with_log`` the planned change records are returned as a third
    element; the stored dataset labels always come from the change oracle,
    which the injection rules are designed to agree with.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.rng_seed))
    rcfg = config.raster
    extent = rcfg.extent
    if extent[0] <= 0 or extent[1] <= 0:
        raise ConfigError("tile has zero ground coverage")

    hist_instances: list[LaneInstance] = []
    n_roads = int(rng.integers(config.road_count[0], config.road_count[1] + 1))
    for _ in range(n_roads):
        road = _build_road(config, rng, extent, hist_instances)
        if road is None:
            continue
        boundaries, styles, crosswalk = road
        for pts, style in zip(boundaries, styles):
            hist_instances.append(LaneInstance(f"h{len(hist_instances):03d}", pts,
                                               style, "historical"))
        if crosswalk is not None:
            hist_instances.append(LaneInstance(f"h{len(hist_instances):03d}", crosswalk,
                                               "crosswalk_edge", "historical"))

    gt_instances: list[LaneInstance] = []
    log: list[ChangeRecord] = []
    rates = config.change_rates

    def next_gt_id() -> str:
        return f"g{len(gt_instances):03d}"

    def keep_unchanged(inst: LaneInstance) -> str:
        gid = next_gt_id()
        gt_instances.append(LaneInstance(gid, inst.points, inst.style, "ground_truth"))
        return gid

    for inst in hist_instances:
        u = rng.uniform()
        if u < rates.deletion:
            log.append(ChangeRecord("deletion", historical_id=inst.id))
            continue
        if u < rates.deletion + rates.style_change:
            flipped = _flip_style(inst.style, rng)
            if flipped is None:
                gid = keep_unchanged(inst)
                log.append(ChangeRecord("no_change", gid, inst.id))
            else:
                gid = next_gt_id()
                gt_instances.append(LaneInstance(gid, inst.points, flipped, "ground_truth"))
                log.append(ChangeRecord("style_change", gid, inst.id))
            continue
        if u < rates.deletion + rates.style_change + rates.addition and not inst.is_closed:
            perturb = rng.uniform() < 0.5
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
            if perturb:
                delta = sign * rng.uniform(*config.perturb_offset)
            else:
                delta = sign * rng.uniform(*config.lane_width)
            candidate = None
            for signed_delta in (delta, -delta):
                trial = _shifted_copy(inst.points, signed_delta, extent, config.n_points)
                if trial is not None and _min_chamfer(trial, hist_instances) >= _INJECT_CLEARANCE_M:
                    candidate = trial
                    break
            if candidate is not None:
                gid = next_gt_id()
                gt_instances.append(LaneInstance(gid, candidate, inst.style, "ground_truth"))
                log.append(ChangeRecord("addition", predicted_id=gid))
                if perturb:
                    # The displaced original disappears from the new map.
                    log.append(ChangeRecord("deletion", historical_id=inst.id))
                    continue
            gid = keep_unchanged(inst)
            log.append(ChangeRecord("no_change", gid, inst.id))
            continue
        gid = keep_unchanged(inst)
        log.append(ChangeRecord("no_change", gid, inst.id))

    historical = VectorMapTile(tile_id, (0.0, 0.0), rcfg.pixels_per_meter,
                               rcfg.width_px, rcfg.height_px, tuple(hist_instances))
    ground_truth = VectorMapTile(tile_id, (0.0, 0.0), rcfg.pixels_per_meter,
                                 rcfg.width_px, rcfg.height_px, tuple(gt_instances))
    if with_log:
        return historical, ground_truth, log
    return historical, ground_truth


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def rasterize(tile: VectorMapTile, raster_cfg: RasterConfig | None = None,
              noise_cfg: NoiseConfig | None = None,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Render a tile to an (H, W, 3) uint8 BEV image.

    Strokes are style-distinct (pattern, width, intensity); noise and
    occlusion patches are applied when a noise config and rng are given.
    Out-of-extent geometry is clipped defensively.
    """
    if raster_cfg is None:
        raster_cfg = RasterConfig(tile.width_px, tile.height_px, tile.resolution)
    rho = raster_cfg.pixels_per_meter
    canvas = np.full((raster_cfg.height_px, raster_cfg.width_px), _BACKGROUND,
                     dtype=np.float32)
    for inst in tile.instances:
        intensity, width_m, dash_m = _STYLE_STROKES[inst.style]
        width_px = max(1.2, width_m * rho)
        dash_px = None if dash_m is None else (dash_m[0] * rho, dash_m[1] * rho)
        if inst.style == "double_solid":
            normal = _mean_normal(inst.points)
            for s in (-0.5, 0.5):
                pts = inst.points + s * _DOUBLE_GAP_M * normal
                raster.draw_polyline(canvas, geo_to_pixel_array(pts, tile), intensity,
                                     width_px, dash_px, closed=False)
        else:
            raster.draw_polyline(canvas, geo_to_pixel_array(inst.points, tile), intensity,
                                 width_px, dash_px, closed=inst.is_closed)
    if noise_cfg is not None and (noise_cfg.occlusion_rate > 0 or noise_cfg.amplitude > 0):
        if rng is None:
            raise ConfigError("rasterize with noise requires an rng")
        n_patches = int(rng.poisson(noise_cfg.occlusion_rate))
        for _ in range(n_patches):
            cx = rng.uniform(0, raster_cfg.width_px)
            cy = rng.uniform(0, raster_cfg.height_px)
            w = rng.uniform(*noise_cfg.occlusion_size) * rho
            h = rng.uniform(*noise_cfg.occlusion_size) * rho
            raster.fill_rect(canvas, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2,
                             _OCCLUSION_INTENSITY)
        if noise_cfg.amplitude > 0:
            canvas = canvas + rng.normal(0.0, noise_cfg.amplitude,
                                         canvas.shape).astype(np.float32)
    gray = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    return np.repeat(gray[:, :, None], 3, axis=2)


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------

def split_of_index(index: int, split_ratio: tuple[int, int, int]) -> str:
    """Deterministic round-robin split assignment."""
    block = sum(split_ratio)
    r = index % block
    if r < split_ratio[0]:
        return "train"
    if r < split_ratio[0] + split_ratio[1]:
        return "val"
    return "test"


def build_sample(config: SceneConfig, index: int) -> SamplePair:
    """Generate one fully-labeled sample pair for (config seed, index)."""
    rng = sample_rng(config.rng_seed, index)
    historical, ground_truth = generate_scene(config, rng, tile_id=f"{index:05d}")
    image = rasterize(ground_truth, config.raster, config.noise, rng)
    changes = tuple(label_changes(ground_truth, historical))
    return SamplePair(image, historical, ground_truth, changes)


def sample_dir(root, split: str, index: int) -> Path:
    return Path(root) / split / f"{index:05d}"


def build_dataset(config: SceneConfig, count: int, out_root,
                  split_ratio: tuple[int, int, int] = (8, 1, 1)) -> dict:
    """Write ``count`` sample pairs plus a manifest; returns the manifest."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    if min(split_ratio) < 0 or sum(split_ratio) <= 0:
        raise ConfigError("invalid split ratio")
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)
    samples = []
    for index in range(count):
        split = split_of_index(index, split_ratio)
        try:
            pair = build_sample(config, index)
            d = sample_dir(root, split, index)
            d.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pair.image).save(d / "image.png", format="PNG")
            write_tile(pair.historical, d / "historical.jsonl")
            write_tile(pair.ground_truth, d / "truth.jsonl")
            write_change_records(pair.changes, d / "changes.json")
        except OSError as exc:
            raise MapUpdateError(f"dataset write failed at sample {index}: {exc}") from exc
        samples.append({"index": index, "split": split,
                        "seed": [config.rng_seed, index]})
    manifest = {
        "version": MANIFEST_VERSION,
        "count": count,
        "master_seed": config.rng_seed,
        "split_ratio": list(split_ratio),
        "scene_config": asdict(config),
        "samples": samples,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_manifest(root) -> dict:
    with open(Path(root) / "manifest.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def split_indices(manifest: dict, split: str) -> list[int]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    return [s["index"] for s in manifest["samples"] if s["split"] == split]


def load_sample(root, split: str, index: int) -> SamplePair:
    d = sample_dir(root, split, index)
    image = np.asarray(Image.open(d / "image.png").convert("RGB"))
    historical = read_tile(d / "historical.jsonl")
    ground_truth = read_tile(d / "truth.jsonl")
    changes = tuple(read_change_records(d / "changes.json"))
    return SamplePair(image, historical, ground_truth, changes)
