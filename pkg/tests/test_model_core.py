import numpy as np
import pytest
import torch

from mapupdate.errors import CheckpointError, ConfigError
from mapupdate.map_model import STYLES
from mapupdate.model_core import (MapUpdateNet, ModelConfig, load_checkpoint,
                                  predict, save_checkpoint,
                                  sine_point_encoding, tile_to_tensors)
from mapupdate.synth_world import generate_scene, rasterize, sample_rng

from conftest import tiny_model_config, tiny_scene_config


def build_model(seed=0, **overrides):
    torch.manual_seed(seed)
    return MapUpdateNet(tiny_model_config(**overrides))


def random_hist(rng, m, n_p=10):
    pts = torch.tensor(rng.uniform(0, 1, size=(m, n_p, 2)), dtype=torch.float32)
    styles = torch.tensor(rng.integers(0, len(STYLES), size=m), dtype=torch.long)
    return pts, styles


# ---------------------------------------------------------------------------
# Config and encoder
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_model_config(fusion="bogus")
    with pytest.raises(ConfigError):
        tiny_model_config(channels=30)  # not divisible by heads
    with pytest.raises(ConfigError):
        tiny_model_config(image_size=63)


def test_encode_image_shape_and_stride():
    model = build_model()
    out = model.encode_image(torch.zeros(2, 3, 64, 64))
    assert out.shape == (2, 64, 8, 8)


def test_encode_image_rejects_wrong_shape():
    model = build_model()
    with pytest.raises(ConfigError):
        model.encode_image(torch.zeros(1, 3, 32, 32))


def test_zero_image_finite():
    model = build_model()
    model.eval()
    with torch.no_grad():
        out = model(torch.zeros(1, 3, 64, 64),
                    [torch.zeros(0, 10, 2)], [torch.zeros(0, dtype=torch.long)])
    assert torch.isfinite(out["points_norm"]).all()
    assert torch.isfinite(out["style_logits"]).all()
    assert torch.isfinite(out["affinity"][0]).all()


def test_eval_forward_deterministic(rng):
    model = build_model()
    model.eval()
    image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)), dtype=torch.float32)
    pts, styles = random_hist(rng, 5)
    with torch.no_grad():
        a = model(image, [pts], [styles])
        b = model(image, [pts], [styles])
    assert torch.equal(a["points_norm"], b["points_norm"])
    assert torch.equal(a["affinity"][0], b["affinity"][0])


# ---------------------------------------------------------------------------
# Sine encoding and PME
# ---------------------------------------------------------------------------

def test_sine_encoding_zero_coordinate():
    enc = sine_point_encoding(torch.zeros(1, 2), 3)
    # layout: [sin(f x) * 3, cos(f x) * 3] per coordinate
    assert enc.shape == (1, 12)
    sins = enc[0, [0, 1, 2, 6, 7, 8]]
    coss = enc[0, [3, 4, 5, 9, 10, 11]]
    assert torch.all(sins == 0.0)
    assert torch.all(coss == 1.0)


def test_pme_output_shape(rng):
    model = build_model()
    pts, styles = random_hist(rng, 12)
    out = model.pme_encode(pts, styles)
    assert out.shape == (12, 64)
    empty = model.pme_encode(torch.zeros(0, 10, 2), torch.zeros(0, dtype=torch.long))
    assert empty.shape == (0, 64)


def test_pme_permutation_equivariant(rng):
    model = build_model(seed=3)
    model.eval()
    pts, styles = random_hist(rng, 7)
    perm = torch.tensor(rng.permutation(7))
    with torch.no_grad():
        base = model.pme_encode(pts, styles)
        shuffled = model.pme_encode(pts[perm], styles[perm])
    assert torch.allclose(base[perm], shuffled, atol=1e-5)


# ---------------------------------------------------------------------------
# Fusion variants
# ---------------------------------------------------------------------------

def test_fuse_none_variant_is_identity(rng):
    model = build_model(fusion="none")
    bev = torch.tensor(rng.normal(size=(64, 64)), dtype=torch.float32)
    em = torch.tensor(rng.normal(size=(4, 64)), dtype=torch.float32)
    assert torch.equal(model.fuse(bev, em), bev)


def test_fuse_bev_with_empty_map_is_identity(rng):
    model = build_model(fusion="bev_feature_ca")
    bev = torch.tensor(rng.normal(size=(64, 64)), dtype=torch.float32)
    assert torch.equal(model.fuse(bev, torch.zeros(0, 64)), bev)


def test_fuse_bev_changes_cells_when_map_present(rng):
    model = build_model(fusion="bev_feature_ca")
    model.eval()
    bev = torch.tensor(rng.normal(size=(64, 64)), dtype=torch.float32)
    em = torch.tensor(rng.normal(size=(4, 64)), dtype=torch.float32)
    with torch.no_grad():
        fused = model.fuse(bev, em)
    assert not torch.allclose(fused, bev)


def test_decoder_query_ca_uses_map(rng):
    image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)), dtype=torch.float32)
    pts, styles = random_hist(rng, 5)
    model = build_model(seed=4, fusion="decoder_query_ca")
    model.eval()
    with torch.no_grad():
        with_map = model(image, [pts], [styles])
        without = model(image, [torch.zeros(0, 10, 2)], [torch.zeros(0, dtype=torch.long)])
    assert not torch.allclose(with_map["points_norm"], without["points_norm"])


# ---------------------------------------------------------------------------
# Decoder and heads
# ---------------------------------------------------------------------------

def test_forward_output_shapes(rng):
    model = build_model()
    model.eval()
    image = torch.tensor(rng.uniform(0, 1, size=(2, 3, 64, 64)), dtype=torch.float32)
    hists = [random_hist(rng, 3), random_hist(rng, 0)]
    with torch.no_grad():
        out = model(image, [h[0] for h in hists], [h[1] for h in hists])
    assert out["points_norm"].shape == (2, 12, 10, 2)
    assert out["style_logits"].shape == (2, 12, len(STYLES))
    assert out["affinity"][0].shape == (12, 4)
    assert out["affinity"][1].shape == (12, 1)
    assert out["points_norm"].min() >= 0.0 and out["points_norm"].max() <= 1.0


def test_decoder_depth_changes_outputs(rng):
    image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)), dtype=torch.float32)
    shallow = build_model(seed=5, decoder_layers=1)
    deep = build_model(seed=5, decoder_layers=2)
    shallow.eval(), deep.eval()
    empty = [torch.zeros(0, 10, 2)], [torch.zeros(0, dtype=torch.long)]
    with torch.no_grad():
        a = shallow(image, *empty)
        b = deep(image, *empty)
    assert not torch.allclose(a["points_norm"], b["points_norm"])


def test_icp_affinity_shapes_and_none_column(rng):
    model = build_model()
    feats = torch.tensor(rng.normal(size=(12, 64)), dtype=torch.float32)
    em = torch.tensor(rng.normal(size=(5, 64)), dtype=torch.float32)
    assert model.icp_affinity(feats, em).shape == (12, 6)
    only_none = model.icp_affinity(feats, torch.zeros(0, 64))
    assert only_none.shape == (12, 1)
    assert (only_none.argmax(dim=1) == 0).all()


def test_icp_affinity_column_permutation(rng):
    model = build_model(seed=6)
    model.eval()
    feats = torch.tensor(rng.normal(size=(8, 64)), dtype=torch.float32)
    em = torch.tensor(rng.normal(size=(5, 64)), dtype=torch.float32)
    perm = torch.tensor(rng.permutation(5))
    with torch.no_grad():
        base = model.icp_affinity(feats, em)
        shuffled = model.icp_affinity(feats, em[perm])
    assert torch.allclose(base[:, perm], shuffled[:, :5], atol=1e-6)
    assert torch.allclose(base[:, 5], shuffled[:, 5], atol=1e-6)


def test_full_model_historical_permutation_equivariance(rng):
    """Permuting historical instances permutes affinity columns and leaves
    point/style predictions unchanged under bev_feature_ca."""
    model = build_model(seed=7, fusion="bev_feature_ca")
    model.eval()
    image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)), dtype=torch.float32)
    pts, styles = random_hist(rng, 6)
    perm = torch.tensor(rng.permutation(6))
    with torch.no_grad():
        base = model(image, [pts], [styles])
        shuffled = model(image, [pts[perm]], [styles[perm]])
    assert torch.allclose(base["points_norm"], shuffled["points_norm"], atol=1e-5)
    assert torch.allclose(base["style_logits"], shuffled["style_logits"], atol=1e-5)
    assert torch.allclose(base["affinity"][0][:, perm], shuffled["affinity"][0][:, :6],
                          atol=1e-4)


def test_random_weight_trials_finite(rng):
    shapes = [(10, 10, 0), (10, 10, 1), (12, 10, 5)]
    for trial in range(6):
        n, n_p, m = shapes[trial % len(shapes)]
        torch.manual_seed(trial)
        model = MapUpdateNet(tiny_model_config(num_instances=n, points_per_instance=n_p))
        model.eval()
        image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)), dtype=torch.float32)
        pts = torch.tensor(rng.uniform(0, 1, size=(m, n_p, 2)), dtype=torch.float32)
        styles = torch.tensor(rng.integers(0, len(STYLES), size=m), dtype=torch.long)
        with torch.no_grad():
            out = model(image, [pts], [styles])
        assert torch.isfinite(out["points_norm"]).all()
        assert torch.isfinite(out["affinity"][0]).all()
        assert out["affinity"][0].shape == (n, m + 1)


# ---------------------------------------------------------------------------
# Prediction boundary and checkpoints
# ---------------------------------------------------------------------------

def test_predict_returns_metric_coordinates():
    cfg = tiny_scene_config(seed=17)
    rng_scene = sample_rng(17, 0)
    hist, gt = generate_scene(cfg, rng_scene)
    image = rasterize(gt, cfg.raster, cfg.noise, rng_scene)
    model = build_model()
    pred = predict(model, image, hist)
    ex, ey = hist.extent
    assert pred.points.shape == (12, 10, 2)
    assert pred.points[..., 0].min() >= 0 and pred.points[..., 0].max() <= ex
    assert pred.points[..., 1].min() >= 0 and pred.points[..., 1].max() <= ey
    assert pred.confidence.shape == (12,)
    assert np.all((pred.confidence >= 0) & (pred.confidence <= 1))
    assert pred.affinity.shape == (12, len(hist.instances) + 1)
    rows = pred.affinity_softmax.sum(axis=1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-9)


def test_tile_to_tensors_checks_raster(rng):
    cfg = tiny_scene_config(seed=19)
    hist, _ = generate_scene(cfg)
    with pytest.raises(ConfigError):
        tile_to_tensors(hist, tiny_model_config(image_size=128))


def test_checkpoint_round_trip(tmp_path, rng):
    model = build_model(seed=9)
    path = tmp_path / "model.pt"
    save_checkpoint(model, path, {"step": 7})
    loaded, meta = load_checkpoint(path)
    assert meta["step"] == 7
    image = torch.tensor(rng.uniform(0, 1, size=(1, 3, 64, 64)), dtype=torch.float32)
    empty = [torch.zeros(0, 10, 2)], [torch.zeros(0, dtype=torch.long)]
    model.eval()
    with torch.no_grad():
        a = model(image, *empty)
        b = loaded(image, *empty)
    assert torch.equal(a["points_norm"], b["points_norm"])


def test_checkpoint_fingerprint_mismatch(tmp_path):
    model = build_model()
    path = tmp_path / "model.pt"
    save_checkpoint(model, path)
    payload = torch.load(path, weights_only=True)
    payload["fingerprint"] = "0" * 64
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path)


def test_checkpoint_expected_config_mismatch(tmp_path):
    model = build_model()
    path = tmp_path / "model.pt"
    save_checkpoint(model, path)
    other = tiny_model_config(channels=32, attn_heads=8)
    with pytest.raises(CheckpointError, match="requested config"):
        load_checkpoint(path, expected_config=other)
