import numpy as np
import pytest

from symnrsfm.core import CameraPose, ObservationSet, observations_from_projections
from symnrsfm.synth import SynthConfig, generate_scene, random_rotation

REFLECT = np.diag([-1.0, 1.0, 1.0])


def make_scene(n_images=20, n_pairs=8, n_bases=2, deform=0.2, seed=0,
               scale_range=(1.0, 1.0), noise_s=0.0, occlusion=0.0):
    cfg = SynthConfig(n_images=n_images, n_pairs=n_pairs, n_bases=n_bases,
                      deform_scale=deform, seed=seed, scale_range=scale_range,
                      noise_s=noise_s, occlusion_rate=occlusion)
    return generate_scene(cfg)


def centered_projections(shapes, rotations):
    """Exact orthographic projections of per-image (3, P) shapes."""
    n = len(rotations)
    p = shapes[0].shape[1]
    y = np.zeros((2 * n, p))
    ym = np.zeros((2 * n, p))
    for i, rot in enumerate(rotations):
        y[2 * i:2 * i + 2] = rot @ shapes[i]
        ym[2 * i:2 * i + 2] = rot @ REFLECT @ shapes[i]
    return observations_from_projections(y, ym)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def rot2(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def rotz(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
