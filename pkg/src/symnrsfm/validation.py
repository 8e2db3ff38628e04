"""Input validation helpers shared by the fitting pipelines and estimators."""

from __future__ import annotations

import numpy as np

from .core import CameraPose, DegenerateInputError, ObservationSet

MIN_VISIBLE_PER_IMAGE = 5


def check_observations(obs: ObservationSet, min_visible: int = MIN_VISIBLE_PER_IMAGE):
    """Validate an observation set against the collection rules.

    Every image must carry at least ``min_visible`` visible keypoints
    counting both halves, and all values must be finite.
    """
    if not isinstance(obs, ObservationSet):
        raise TypeError(f"expected ObservationSet, got {type(obs).__name__}")
    if not (np.isfinite(obs.y).all() and np.isfinite(obs.y_mirror).all()):
        raise ValueError("observations contain non-finite values")
    for n in range(obs.n_images):
        count = obs.visible_count(n)
        if count < min_visible:
            raise DegenerateInputError(
                f"image {n} has {count} visible keypoints, need >= {min_visible}")
    return obs


def check_pose(pose: CameraPose, tol: float = 1e-8) -> CameraPose:
    """Verify the row-orthonormality and proper-completion invariants."""
    r = pose.rotation
    if np.linalg.norm(r @ r.T - np.eye(2)) > tol:
        raise ValueError("projection rows are not orthonormal")
    q = np.vstack([r, np.cross(r[0], r[1])])
    if abs(np.linalg.det(q) - 1.0) > tol:
        raise ValueError("completed rotation is not proper")
    return pose
