import numpy as np
import pytest
import torch

from mapupdate.model_core import MapUpdateNet, ModelConfig, save_checkpoint
from mapupdate.synth_world import (ChangeRates, NoiseConfig, RasterConfig,
                                   SceneConfig, build_dataset)

# Desk-scale profile shared by the integration-style tests: 64 px tiles at
# 2 px/m (32 m coverage) keep forward passes and dataset builds fast.
TINY_SIZE = 64
TINY_RHO = 2.0


def tiny_scene_config(seed: int = 5, **overrides) -> SceneConfig:
    kwargs = dict(
        rng_seed=seed,
        raster=RasterConfig(TINY_SIZE, TINY_SIZE, TINY_RHO),
        road_count=(1, 2),
        lanes_per_road=(2, 3),
        change_rates=ChangeRates(0.12, 0.15, 0.10),
        noise=NoiseConfig(amplitude=0.02, occlusion_rate=0.3, occlusion_size=(3.0, 6.0)),
        n_points=10,
    )
    kwargs.update(overrides)
    return SceneConfig(**kwargs)


def tiny_model_config(**overrides) -> ModelConfig:
    kwargs = dict(
        image_size=TINY_SIZE,
        pixels_per_meter=TINY_RHO,
        backbone_widths=(16, 32, 64),
        channels=64,
        num_instances=12,
        points_per_instance=10,
        decoder_layers=2,
        pme_layers=2,
        attn_heads=8,
        affinity_dim=32,
        pos_frequencies=4,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    config = tiny_scene_config()
    manifest = build_dataset(config, 12, root, split_ratio=(8, 1, 1))
    return root, config, manifest


@pytest.fixture(scope="session")
def tiny_checkpoint(tmp_path_factory):
    torch.manual_seed(0)
    model = MapUpdateNet(tiny_model_config())
    path = tmp_path_factory.mktemp("ckpt") / "random.pt"
    save_checkpoint(model, path, {"step": 0})
    return path, model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
