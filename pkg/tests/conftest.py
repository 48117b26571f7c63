import functools

import numpy as np
import pytest

from motionparse.geometry import Intrinsics
from motionparse.scene import SceneRenderer, SceneSpec, random_scene_spec


@functools.lru_cache(maxsize=None)
def rigid_bundle(seed: int):
    """Static-object oracle scene with moderate camera motion."""
    return SceneRenderer(random_scene_spec(seed, max_translation=0.1, max_rotation_deg=2.0)).bundle()


@functools.lru_cache(maxsize=None)
def moving_box_bundle(seed: int, box_motion=(0.1, 0.05, 0.0), static_camera=False):
    overrides = {"camera_twist": (0.0,) * 6} if static_camera else {}
    spec = random_scene_spec(seed, max_translation=0.1, max_rotation_deg=2.0, box_motion=box_motion, **overrides)
    return SceneRenderer(spec).bundle()


@functools.lru_cache(maxsize=None)
def spec_bundle(**kwargs):
    return SceneRenderer(SceneSpec(**kwargs)).bundle()


def flows(b):
    return np.nan_to_num(b.flow_fwd), np.nan_to_num(b.flow_bwd)


@pytest.fixture
def K_small():
    return Intrinsics(fx=200.0, fy=200.0, cx=96.0, cy=48.0, width=192, height=96)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
