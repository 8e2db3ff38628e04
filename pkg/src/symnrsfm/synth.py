"""Ground-truth generator for symmetric non-rigid scenes and the noise and
occlusion protocols used in the experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    CameraPose,
    ObservationSet,
    PerImageShapeSet,
    SymmetryOp,
)

_A = SymmetryOp().matrix


@dataclass(frozen=True)
class SynthConfig:
    n_images: int = 20
    n_pairs: int = 8
    n_bases: int = 2
    scale_range: tuple = (1.0, 1.0)
    deform_scale: float = 0.2
    noise_s: float = 0.0
    occlusion_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 2 * self.n_bases:
            raise ValueError("need at least 2K images for identifiability")
        if self.n_pairs < 4:
            raise ValueError("need at least 4 keypoint pairs")
        if not 0.0 <= self.occlusion_rate < 0.5:
            raise ValueError("occlusion rate must lie in [0, 0.5)")
        if self.scale_range[0] <= 0 or self.scale_range[1] < self.scale_range[0]:
            raise ValueError("scale range must be positive and ordered")
        if self.deform_scale < 0 or self.noise_s < 0:
            raise ValueError("deformation and noise magnitudes must be nonnegative")


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation on SO(3) via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def generate_scene(cfg: SynthConfig):
    """Draw a symmetric scene and project it.

    Bases have unit Frobenius norm; the first carries a coefficient near 1
    so instances cluster around a common shape (a rigid scene at
    ``deform_scale = 0``), the rest enter with zero-mean Gaussian
    coefficients scaled by ``deform_scale``. Cameras are uniform rotations
    with weak-perspective scales drawn from ``scale_range`` and modest
    random translations. Deterministic per seed.
    """
    rng = np.random.default_rng(cfg.seed)
    n, p, k = cfg.n_images, cfg.n_pairs, cfg.n_bases
    bases = rng.normal(size=(k, 3, p))
    for j in range(k):
        bases[j] /= np.linalg.norm(bases[j])
    coeffs = cfg.deform_scale * rng.normal(size=(n, k))
    coeffs[:, 0] += 1.0
    scales = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=n)
    offsets = rng.uniform(-1.0, 1.0, size=(n, 2))
    y = np.zeros((2 * n, p))
    y_mirror = np.zeros((2 * n, p))
    shapes = np.zeros((3 * n, p))
    poses = []
    for i in range(n):
        rot = random_rotation(rng)[:2]
        shape = np.tensordot(coeffs[i], bases, axes=1)
        shapes[3 * i:3 * i + 3] = shape
        y[2 * i:2 * i + 2] = scales[i] * rot @ shape + offsets[i][:, None]
        y_mirror[2 * i:2 * i + 2] = scales[i] * rot @ _A @ shape + offsets[i][:, None]
        poses.append(CameraPose(rot, scales[i], offsets[i]))
    obs = ObservationSet(y, y_mirror,
                         np.ones((n, p), dtype=bool), np.ones((n, p), dtype=bool),
                         np.zeros((n, 2)))
    stacked_bases = bases.reshape(3 * k, p)
    gt = PerImageShapeSet(shapes, coeffs, stacked_bases, k)
    if cfg.noise_s > 0:
        obs = add_noise(obs, cfg.noise_s, cfg.seed + 1)
    if cfg.occlusion_rate > 0:
        obs = apply_occlusion(obs, cfg.occlusion_rate, cfg.seed + 2)
    return obs, poses, gt


def max_pairwise_distance(obs: ObservationSet) -> float:
    """Longest 2D distance between keypoints within any image, both halves."""
    best = 0.0
    for i in range(obs.n_images):
        pts = np.hstack([obs.image(i), obs.image_mirror(i)]).T
        diff = pts[:, None, :] - pts[None, :, :]
        best = max(best, float(np.sqrt((diff ** 2).sum(axis=2)).max()))
    return best


def add_noise(obs: ObservationSet, s: float, seed: int) -> ObservationSet:
    """Add i.i.d. Gaussian noise with sigma = s times the longest keypoint
    distance to every visible entry. Deterministic per seed."""
    if s < 0:
        raise ValueError("noise level must be nonnegative")
    if s == 0:
        return obs
    sigma = s * max_pairwise_distance(obs)
    rng = np.random.default_rng(seed)
    y = obs.y + sigma * rng.normal(size=obs.y.shape)
    ym = obs.y_mirror + sigma * rng.normal(size=obs.y.shape)
    keep = np.repeat(obs.visible, 2, axis=0)
    keep_m = np.repeat(obs.visible_mirror, 2, axis=0)
    return obs.replace_values(np.where(keep, y, obs.y),
                              np.where(keep_m, ym, obs.y_mirror))


def apply_occlusion(obs: ObservationSet, rate: float, seed: int) -> ObservationSet:
    """Hide entries uniformly at random per (image, point, half) and zero
    their values, keeping at least 5 visible keypoints per image.

    When a draw leaves an image below the floor, occlusions are dropped at
    random until the floor holds again.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("occlusion rate must lie in [0, 1)")
    if rate == 0.0:
        return obs
    rng = np.random.default_rng(seed)
    n, p = obs.n_images, obs.n_pairs
    vis = obs.visible.copy()
    vis_m = obs.visible_mirror.copy()
    for i in range(n):
        hide = rng.random(2 * p) < rate
        floor = 5
        visible_left = 2 * p - hide.sum()
        if visible_left < floor:
            hidden_idx = np.flatnonzero(hide)
            restore = rng.choice(hidden_idx, size=floor - visible_left, replace=False)
            hide[restore] = False
        vis[i] &= ~hide[:p]
        vis_m[i] &= ~hide[p:]
    y = np.where(np.repeat(vis, 2, axis=0), obs.y, 0.0)
    ym = np.where(np.repeat(vis_m, 2, axis=0), obs.y_mirror, 0.0)
    return ObservationSet(y, ym, vis, vis_m, obs.translations)
