"""
Test configuration and fixtures for attentivo.
"""

import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from data import SyntheticSceneConfig, build_scene, load_dataset, synth_generate  # noqa: E402
from geometry import CameraIntrinsics  # noqa: E402
from vision import Image  # noqa: E402

FIXTURES = os.path.join(os.path.dirname(__file__), "..", "fixtures")


@pytest.fixture(autouse=True)
def quiet_environment(monkeypatch):
    """Keep progress bars off and logging predictable in every test."""
    monkeypatch.setenv("ATTENTIVO_PROGRESS", "false")
    monkeypatch.setenv("ATTENTIVO_LOG_LEVEL", "WARNING")
    for name in ("ATTENTIVO_SEED", "ATTENTIVO_WINDOW_SIZE", "ATTENTIVO_MASK_RHO", "ATTENTIVO_RANSAC_PIXEL_THRESHOLD"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def rng():
    """Seeded generator for property-style checks."""
    return np.random.default_rng(12345)


@pytest.fixture
def intrinsics():
    """Default camera for a 64x64 synthetic frame."""
    return CameraIntrinsics.default_for(64, 64)


@pytest.fixture
def small_scene_config():
    """A short circular scene that renders in well under a second."""
    return SyntheticSceneConfig(frame_count=12, point_count=300, rng_seed=3)


@pytest.fixture(scope="session")
def circle_config():
    """The shipped 100-frame circular scene."""
    return SyntheticSceneConfig.load(os.path.join(FIXTURES, "synthetic_100.json"))


@pytest.fixture(scope="session")
def circle_dataset_path(tmp_path_factory, circle_config):
    """The 100-frame scene written to disk once per session."""
    out_dir = tmp_path_factory.mktemp("circle")
    return synth_generate(circle_config, out_dir, progress=False)


@pytest.fixture(scope="session")
def circle_dataset(circle_dataset_path):
    """Loaded form of the session dataset."""
    return load_dataset(circle_dataset_path, progress=False)


@pytest.fixture(scope="session")
def study_dataset(tmp_path_factory):
    """The 128x128 mask study scene, large enough for FAST+BRIEF inside the 16 px border."""
    cfg = SyntheticSceneConfig.load(os.path.join(FIXTURES, "mask_study.json"))
    return load_dataset(synth_generate(cfg, tmp_path_factory.mktemp("study"), progress=False), progress=False)


@pytest.fixture(scope="session")
def short_dataset_path(tmp_path_factory):
    """A 13-frame scene for CLI and training tests."""
    out_dir = tmp_path_factory.mktemp("short")
    cfg = SyntheticSceneConfig(frame_count=13, rng_seed=7)
    return synth_generate(cfg, out_dir, progress=False)


@pytest.fixture(scope="session")
def short_dataset(short_dataset_path):
    return load_dataset(short_dataset_path, progress=False)


@pytest.fixture(scope="session")
def wide_scene():
    """Larger frames with sparse points, so squares rarely overlap for FAST checks."""
    cfg = SyntheticSceneConfig(width=256, height=192, point_count=120, frame_count=6, rng_seed=11)
    return build_scene(cfg, progress=False)


@pytest.fixture
def square_image():
    """A single 5x5 white square centered at (20, 24) on a black 48x48 frame."""
    pixels = np.zeros((48, 48), dtype=np.uint8)
    pixels[22:27, 18:23] = 255
    return Image.from_array(pixels)


@pytest.fixture
def textured_image(rng):
    """Smoothed random texture with plenty of corners away from the border."""
    from scipy import ndimage

    noise = rng.uniform(0, 255, size=(96, 128))
    smooth = ndimage.uniform_filter(noise, size=3)
    pixels = np.clip((smooth - smooth.min()) / (np.ptp(smooth) + 1e-9) * 255, 0, 255).astype(np.uint8)
    return Image.from_array(pixels)
