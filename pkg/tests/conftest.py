"""Shared fixtures: micro-scale scenes and models for fast tests."""

import numpy as np
import pytest

from occuseg.model import ModelConfig, OccupancyModel
from occuseg.scenegen import SceneParams, default_rig, generate_scene
from occuseg.voxel import GridSpec

MICRO_SPEC = GridSpec((8, 8, 4), 0.5, (-2.0, -2.0, -0.5))
MICRO_RIG = default_rig(2, width=16, height=8, focal=8.0, position=(0.0, 0.0, 0.8))


def micro_model_config(**kw):
    defaults = dict(embed=8, mid_channels=8, out_channels=8, heads=2,
                    encoder_stem=4, mlp_hidden=8, depth_bins=4,
                    depth_min=0.3, depth_max=3.5)
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def micro_scene():
    params = SceneParams(spec=MICRO_SPEC, rig=MICRO_RIG, object_count=(2, 2),
                         num_sweeps=3, lidar_azimuths=72, clearance=0.8,
                         max_range=10.0)
    return generate_scene(42, params)


@pytest.fixture()
def micro_model():
    return OccupancyModel(micro_model_config(), MICRO_SPEC, MICRO_RIG,
                          num_classes=4, init_seed=7)


def jitter_params(model, scale=0.05, seed=123):
    """Push every parameter off its init so gradients sit on smooth ground.

    Zero-initialized offset layers sample exactly at interpolation nodes,
    where the piecewise-linear samplers are not differentiable; jitter
    moves them to generic positions before finite-difference checks.
    """
    rng = np.random.default_rng(seed)
    for p in model.store.all():
        p.tensor.data = p.tensor.data + rng.normal(0, scale, p.tensor.data.shape)
