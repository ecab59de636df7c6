import hashlib
import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from mapupdate.change_oracle import label_changes
from mapupdate.errors import ConfigError
from mapupdate.map_model import LaneInstance, VectorMapTile, serialize_tile
from mapupdate.synth_world import (ChangeRates, NoiseConfig, RasterConfig,
                                   SceneConfig, build_dataset, build_sample,
                                   generate_scene, load_manifest, load_sample,
                                   rasterize, sample_rng, split_indices,
                                   split_of_index)

from conftest import tiny_scene_config


def record_key(rec):
    return (rec.kind, rec.predicted_id, rec.historical_id)


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_change_rates_validate():
    with pytest.raises(ConfigError):
        ChangeRates(style_change=1.5)
    with pytest.raises(ConfigError):
        ChangeRates(0.5, 0.4, 0.3)  # jointly > 1


def test_raster_config_rejects_zero_area():
    with pytest.raises(ConfigError):
        RasterConfig(0, 64, 2.0)
    with pytest.raises(ConfigError):
        RasterConfig(64, 64, 0.0)


def test_scene_config_rejects_empty_range():
    with pytest.raises(ConfigError):
        SceneConfig(road_count=(3, 1))


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def test_zero_change_rates_keeps_tiles_identical():
    cfg = tiny_scene_config(seed=3, change_rates=ChangeRates(0.0, 0.0, 0.0))
    hist, gt = generate_scene(cfg)
    assert len(hist.instances) == len(gt.instances)
    for h, g in zip(hist.instances, gt.instances):
        assert h.style == g.style
        np.testing.assert_array_equal(h.points, g.points)


def test_deletion_rate_one_empties_ground_truth():
    cfg = tiny_scene_config(seed=3, change_rates=ChangeRates(0.0, 0.0, 1.0))
    hist, gt = generate_scene(cfg)
    assert len(hist.instances) > 0
    assert len(gt.instances) == 0


def test_seed7_injection_log_matches_oracle():
    cfg = tiny_scene_config(seed=7)
    hist, gt, log = generate_scene(cfg, with_log=True)
    oracle = label_changes(gt, hist)
    assert Counter(map(record_key, oracle)) == Counter(map(record_key, log))


def test_injection_log_matches_oracle_many_seeds():
    for seed in range(40):
        cfg = tiny_scene_config(seed=seed)
        hist, gt, log = generate_scene(cfg, with_log=True)
        oracle = label_changes(gt, hist)
        assert Counter(map(record_key, oracle)) == Counter(map(record_key, log)), seed


def test_generation_is_deterministic():
    cfg = tiny_scene_config(seed=9)
    h1, g1 = generate_scene(cfg)
    h2, g2 = generate_scene(cfg)
    assert serialize_tile(h1) == serialize_tile(h2)
    assert serialize_tile(g1) == serialize_tile(g2)


def test_unchanged_instances_share_bit_identical_geometry():
    cfg = tiny_scene_config(seed=11)
    hist, gt, log = generate_scene(cfg, with_log=True)
    by_id = {inst.id: inst for inst in gt.instances}
    hist_by_id = {inst.id: inst for inst in hist.instances}
    unchanged = [r for r in log if r.kind == "no_change"]
    assert unchanged
    for rec in unchanged:
        np.testing.assert_array_equal(by_id[rec.predicted_id].points,
                                      hist_by_id[rec.historical_id].points)


def test_instances_are_normalized_and_in_extent():
    cfg = tiny_scene_config(seed=13)
    hist, gt = generate_scene(cfg)
    ex, ey = hist.extent
    for inst in list(hist.instances) + list(gt.instances):
        assert inst.num_points == cfg.n_points
        assert inst.points[:, 0].min() >= 0 and inst.points[:, 0].max() <= ex
        assert inst.points[:, 1].min() >= 0 and inst.points[:, 1].max() <= ey


# ---------------------------------------------------------------------------
# Rasterization
# ---------------------------------------------------------------------------

def test_empty_tile_zero_noise_renders_constant_background():
    tile = VectorMapTile("t", (0.0, 0.0), 2.0, 64, 64, ())
    img = rasterize(tile)
    assert img.shape == (64, 64, 3)
    assert len(np.unique(img)) == 1


def test_single_horizontal_lane_row_band():
    rho, h_px = 25.0, 1536
    xs = np.linspace(1.0, 60.0, 50)
    inst = LaneInstance("a", np.stack([xs, np.full(50, 30.0)], axis=1), "solid")
    tile = VectorMapTile("t", (0.0, 0.0), rho, 1536, h_px, (inst,))
    img = rasterize(tile)
    background = img[0, 0, 0]
    lit_rows = np.unique(np.nonzero((img[:, :, 0] != background))[0])
    # y = 30 m maps to row 1536 - 30 * 25 = 786; stroke width 0.18 m = 4.5 px
    expected_center = h_px - int(30.0 * rho)
    assert lit_rows.size > 0
    assert lit_rows.min() >= expected_center - 4
    assert lit_rows.max() <= expected_center + 4


def test_rasterize_same_seed_bit_identical():
    cfg = tiny_scene_config(seed=21)
    _, gt = generate_scene(cfg, sample_rng(21, 0))
    img1 = rasterize(gt, cfg.raster, cfg.noise, sample_rng(99, 1))
    img2 = rasterize(gt, cfg.raster, cfg.noise, sample_rng(99, 1))
    np.testing.assert_array_equal(img1, img2)


def test_rasterize_with_noise_requires_rng():
    tile = VectorMapTile("t", (0.0, 0.0), 2.0, 64, 64, ())
    with pytest.raises(ConfigError):
        rasterize(tile, RasterConfig(64, 64, 2.0), NoiseConfig(amplitude=0.1), rng=None)


def test_rasterize_clips_out_of_extent_geometry():
    # Geometry beyond the extent must clip, not raise.
    tile = VectorMapTile("t", (0.0, 0.0), 2.0, 64, 64, ())
    canvas_tile = tile.replace_instances([])
    img = rasterize(canvas_tile)
    assert img.shape == (64, 64, 3)


# ---------------------------------------------------------------------------
# Dataset persistence
# ---------------------------------------------------------------------------

def test_split_assignment_80_10_10():
    splits = Counter(split_of_index(i, (8, 1, 1)) for i in range(100))
    assert splits == {"train": 80, "val": 10, "test": 10}


def test_build_dataset_count_zero_manifest_only(tmp_path):
    manifest = build_dataset(tiny_scene_config(), 0, tmp_path)
    assert manifest["count"] == 0
    assert (tmp_path / "manifest.json").exists()
    assert [p.name for p in tmp_path.iterdir()] == ["manifest.json"]


def _dir_digest(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


def test_build_dataset_regeneration_byte_identical(tmp_path):
    cfg = tiny_scene_config(seed=31)
    build_dataset(cfg, 10, tmp_path / "a")
    build_dataset(cfg, 10, tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")


def test_label_soundness_rerunning_oracle_reproduces_records(tiny_dataset):
    root, cfg, manifest = tiny_dataset
    for index in split_indices(manifest, "train")[:4]:
        pair = load_sample(root, "train", index)
        rerun = label_changes(pair.ground_truth, pair.historical)
        assert Counter(map(record_key, rerun)) == Counter(map(record_key, pair.changes))


def test_dataset_layout_and_manifest(tiny_dataset):
    root, cfg, manifest = tiny_dataset
    assert manifest["count"] == 12
    sample = manifest["samples"][0]
    assert sample["seed"] == [cfg.rng_seed, 0]
    d = root / sample["split"] / f"{sample['index']:05d}"
    for name in ("image.png", "historical.jsonl", "truth.jsonl", "changes.json"):
        assert (d / name).exists()
    reloaded = load_manifest(root)
    assert reloaded == json.loads(json.dumps(manifest))


def test_load_sample_round_trip(tiny_dataset):
    root, cfg, manifest = tiny_dataset
    index = split_indices(manifest, "train")[0]
    pair = load_sample(root, "train", index)
    assert pair.image.shape == (cfg.raster.height_px, cfg.raster.width_px, 3)
    assert pair.historical.extent == pair.ground_truth.extent
    regenerated = build_sample(cfg, index)
    np.testing.assert_array_equal(pair.image, regenerated.image)
    assert serialize_tile(pair.historical) == serialize_tile(regenerated.historical)
