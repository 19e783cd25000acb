"""Shared fixtures and field generators for the test suite."""

import numpy as np
import pytest
from scipy import ndimage

from tumorsynth.demo import make_demo_atlas, demo_intensity_model
from tumorsynth.volume import GridGeometry, ScalarVolume


def smooth_image(rng, dims, sigma=3.0):
    """Smooth random scalar volume rescaled to [0, 1]."""
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma, mode="nearest")
    f = (f - f.min()) / (f.max() - f.min())
    return ScalarVolume(GridGeometry(tuple(dims)), f.astype(np.float32))


def smooth_svf(rng, dims, max_norm, sigma=4.0):
    """Smooth random velocity components scaled to a target max norm."""
    comps = [ndimage.gaussian_filter(rng.standard_normal(dims), sigma,
                                     mode="constant") for _ in range(3)]
    mag = np.sqrt(sum(c * c for c in comps)).max()
    return [c * (max_norm / mag) for c in comps]


@pytest.fixture(scope="session")
def atlas48():
    return make_demo_atlas("atlas_fixture", (48, 48, 48), seed=5)


@pytest.fixture(scope="session")
def intensity_model():
    return demo_intensity_model()


@pytest.fixture(scope="session")
def demo_assets32(tmp_path_factory):
    """Small demo asset tree (atlases, model, reference, config)."""
    from tumorsynth.demo import write_demo_assets
    root = tmp_path_factory.mktemp("assets32")
    config_path = write_demo_assets(root, dims=(32, 32, 32), n_atlases=2,
                                    n_reference=1, seed=99)
    return config_path
