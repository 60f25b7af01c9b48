"""Shared fixtures: small scenes are expensive, so they are built once
per session and reused wherever a test only reads from them."""

import numpy as np
import pytest

from vloc.pipeline import AugmentationParams, PipelineConfig
from vloc.scene_db import compute_features
from vloc.synth import SceneParams, generate_scene


@pytest.fixture(scope="session")
def high_scene():
    scene = generate_scene(3, SceneParams(num_db=20, num_queries=6,
                                          overlap="high"))
    compute_features(scene.database)
    return scene


@pytest.fixture(scope="session")
def low_scene_small():
    from vloc.synth import low_benchmark_params
    scene = generate_scene(7, low_benchmark_params(num_db=28, num_queries=8))
    compute_features(scene.database)
    return scene


@pytest.fixture()
def small_config():
    return PipelineConfig(retrieval_k=5, match_ratio=0.8,
                          augmentation=AugmentationParams(min_keypoints=15))


def random_pose(rng: np.random.Generator):
    """Uniform-ish random pose for oracle tests."""
    from vloc.geometry import Pose, axis_angle_matrix

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    rot = axis_angle_matrix(axis, rng.uniform(0, np.pi))
    return Pose(rot, rng.uniform(-5, 5, 3))
