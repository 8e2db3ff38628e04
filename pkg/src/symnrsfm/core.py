"""Domain types and shared array utilities for symmetric keypoint-pair scenes.

Conventions used throughout the package:

* stacked 2D observations are ``(2N, P)`` arrays, two rows per image;
* stacked 3D shapes are ``(3N, P)`` arrays, three rows per image;
* per-image keypoint vectors are point-major, i.e. ``[u1, v1, u2, v2, ...]``.

All types are frozen dataclasses holding read-only arrays; operations are
pure functions returning new objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DegenerateInputError(ValueError):
    """Input data does not carry enough information for the operation."""


class IllPosedError(ValueError):
    """The problem instance has no well-defined solution."""


class InfeasibleError(RuntimeError):
    """A constraint system admits no nontrivial solution."""


def _frozen_array(value, dtype=float):
    arr = np.array(value, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class SymmetryOp:
    """Reflection across the symmetry plane, fixed to the x = 0 plane.

    ``matrix`` negates the first coordinate; ``expand(n)`` is the
    block-diagonal version acting on n stacked 3-vectors.
    """

    axis: str = "x"

    def __post_init__(self):
        if self.axis != "x":
            raise ValueError(f"symmetry axis {self.axis!r} not supported, only 'x'")

    @property
    def matrix(self) -> np.ndarray:
        return np.diag([-1.0, 1.0, 1.0])

    def expand(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError("expansion size must be >= 1")
        return np.kron(np.eye(n), self.matrix)


@dataclass(frozen=True)
class ObservationSet:
    """Stacked 2D keypoint pairs with visibility masks.

    ``y`` holds the primary half and ``y_mirror`` the reflected partners,
    both ``(2N, P)``. Masks are ``(N, P)`` booleans. ``translations`` records
    the per-image translation removed so far (image units).
    """

    y: np.ndarray
    y_mirror: np.ndarray
    visible: np.ndarray
    visible_mirror: np.ndarray
    translations: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen_array(self.y))
        object.__setattr__(self, "y_mirror", _frozen_array(self.y_mirror))
        object.__setattr__(self, "visible", _frozen_array(self.visible, bool))
        object.__setattr__(self, "visible_mirror", _frozen_array(self.visible_mirror, bool))
        object.__setattr__(self, "translations", _frozen_array(self.translations))
        if self.y.shape != self.y_mirror.shape:
            raise ValueError("primary and mirror halves must have identical shapes")
        if self.y.ndim != 2 or self.y.shape[0] % 2:
            raise ValueError("observations must be (2N, P)")
        n, p = self.n_images, self.n_pairs
        if self.visible.shape != (n, p) or self.visible_mirror.shape != (n, p):
            raise ValueError("visibility masks must be (N, P)")
        if self.translations.shape != (n, 2):
            raise ValueError("translations must be (N, 2)")

    @property
    def n_images(self) -> int:
        return self.y.shape[0] // 2

    @property
    def n_pairs(self) -> int:
        return self.y.shape[1]

    def image(self, n: int) -> np.ndarray:
        """Primary-half 2D points of image n as a (2, P) array."""
        return self.y[2 * n:2 * n + 2]

    def image_mirror(self, n: int) -> np.ndarray:
        return self.y_mirror[2 * n:2 * n + 2]

    def visible_count(self, n: int) -> int:
        """Visible keypoints of image n counting both halves."""
        return int(self.visible[n].sum() + self.visible_mirror[n].sum())

    def replace_values(self, y: np.ndarray, y_mirror: np.ndarray,
                       translations: np.ndarray | None = None) -> "ObservationSet":
        """New observation set with the same masks and updated values."""
        t = self.translations if translations is None else translations
        return ObservationSet(y, y_mirror, self.visible, self.visible_mirror, t)


def observations_from_projections(y, y_mirror, visible=None, visible_mirror=None):
    """Build an ObservationSet from stacked (2N, P) projections, all visible
    by default, with zero recorded translation."""
    y = np.asarray(y, dtype=float)
    n, p = y.shape[0] // 2, y.shape[1]
    if visible is None:
        visible = np.ones((n, p), dtype=bool)
    if visible_mirror is None:
        visible_mirror = np.ones((n, p), dtype=bool)
    return ObservationSet(y, y_mirror, visible, visible_mirror, np.zeros((n, 2)))


@dataclass(frozen=True)
class CameraPose:
    """Orthographic camera: row-orthonormal 2x3 projection, a weak-perspective
    scale (1 in prior-free mode) and a 2D image translation."""

    rotation: np.ndarray
    scale: float = 1.0
    translation: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation))
        object.__setattr__(self, "translation", _frozen_array(self.translation))
        if self.rotation.shape != (2, 3):
            raise ValueError("rotation must be 2x3")
        if self.translation.shape != (2,):
            raise ValueError("translation must be a 2-vector")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


@dataclass(frozen=True)
class MeanShapeModel:
    """Mean shape plus symmetric deformation bases, point-major layout.

    ``mean_shape`` is a 3P vector; ``bases`` and ``mirror_bases`` are
    ``(3P, K)``.  The mirror mean shape is never stored: it is always the
    reflection of ``mean_shape`` (hard constraint).
    """

    mean_shape: np.ndarray
    bases: np.ndarray
    mirror_bases: np.ndarray
    coeffs: np.ndarray
    noise_var: float
    coupling: float

    def __post_init__(self):
        object.__setattr__(self, "mean_shape", _frozen_array(self.mean_shape))
        object.__setattr__(self, "bases", _frozen_array(self.bases))
        object.__setattr__(self, "mirror_bases", _frozen_array(self.mirror_bases))
        object.__setattr__(self, "coeffs", _frozen_array(self.coeffs))
        if self.mean_shape.ndim != 1 or self.mean_shape.size % 3:
            raise ValueError("mean shape must be a 3P vector")
        if self.bases.shape != self.mirror_bases.shape:
            raise ValueError("bases and mirror bases must have identical shapes")
        if self.noise_var <= 0:
            raise ValueError("noise variance must be positive")
        if self.coupling < 0:
            raise ValueError("coupling weight must be nonnegative")

    @property
    def n_pairs(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_bases(self) -> int:
        return self.bases.shape[1]

    @property
    def mirror_mean_shape(self) -> np.ndarray:
        return reflect_points(self.mean_shape)


@dataclass(frozen=True)
class PerImageShapeSet:
    """Per-image 3D shapes with an optional low-rank factorization."""

    shapes: np.ndarray
    coeffs: np.ndarray | None
    bases: np.ndarray | None
    n_bases: int

    def __post_init__(self):
        object.__setattr__(self, "shapes", _frozen_array(self.shapes))
        if self.coeffs is not None:
            object.__setattr__(self, "coeffs", _frozen_array(self.coeffs))
        if self.bases is not None:
            object.__setattr__(self, "bases", _frozen_array(self.bases))
        if self.shapes.shape[0] % 3:
            raise ValueError("stacked shapes must be (3N, P)")

    @property
    def n_images(self) -> int:
        return self.shapes.shape[0] // 3

    def shape(self, n: int) -> np.ndarray:
        return self.shapes[3 * n:3 * n + 3]


@dataclass(frozen=True)
class PosteriorStats:
    """First and second order statistics of one image's coefficient posterior."""

    mean: np.ndarray
    covariance: np.ndarray
    second_moment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", _frozen_array(self.mean))
        object.__setattr__(self, "covariance", _frozen_array(self.covariance))
        object.__setattr__(self, "second_moment", _frozen_array(self.second_moment))


@dataclass(frozen=True)
class FitReport:
    """Outcome bookkeeping shared by the fitting pipelines."""

    converged: bool
    n_iter: int
    objective_trace: tuple
    flags: tuple = ()


def reflect_shape(shape: np.ndarray, op: SymmetryOp = SymmetryOp()) -> np.ndarray:
    """Reflect a (3, P) shape across the symmetry plane (negates row 1)."""
    shape = np.asarray(shape, dtype=float)
    if shape.shape[0] != 3:
        raise ValueError("shape must be (3, P)")
    return op.matrix @ shape


def reflect_points(vec: np.ndarray, op: SymmetryOp = SymmetryOp()) -> np.ndarray:
    """Reflect a point-major 3P vector across the symmetry plane."""
    vec = np.asarray(vec, dtype=float)
    pts = vec.reshape(-1, 3) @ op.matrix.T
    return pts.reshape(vec.shape)


def center_observations(obs: ObservationSet):
    """Remove the per-image mean of the visible entries of both halves.

    Returns the centered observations (translation subtracted from every
    entry of the image, visible or not) and the (N, 2) translations.
    """
    n, p = obs.n_images, obs.n_pairs
    y = obs.y.copy()
    y_mirror = obs.y_mirror.copy()
    t = np.zeros((n, 2))
    for i in range(n):
        m, md = obs.visible[i], obs.visible_mirror[i]
        count = int(m.sum() + md.sum())
        if count == 0:
            raise DegenerateInputError(f"image {i} has no visible keypoints")
        rows = slice(2 * i, 2 * i + 2)
        t[i] = (y[rows][:, m].sum(axis=1) + y_mirror[rows][:, md].sum(axis=1)) / count
        y[rows] -= t[i][:, None]
        y_mirror[rows] -= t[i][:, None]
    return obs.replace_values(y, y_mirror, obs.translations + t), t


def rearrange_compact(shapes: np.ndarray) -> np.ndarray:
    """Rearrange stacked (3N, P) shapes into the compact (N, 3P) form whose
    row n is [x_n1..x_nP, y_n1..y_nP, z_n1..z_nP]."""
    shapes = np.asarray(shapes, dtype=float)
    if shapes.ndim != 2 or shapes.shape[0] % 3:
        raise ValueError("expected a (3N, P) array")
    n = shapes.shape[0] // 3
    return shapes.reshape(n, 3 * shapes.shape[1])


def restore_stacked(compact: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rearrange_compact`."""
    compact = np.asarray(compact, dtype=float)
    if compact.ndim != 2 or compact.shape[1] % 3:
        raise ValueError("expected an (N, 3P) array")
    n = compact.shape[0]
    return compact.reshape(3 * n, compact.shape[1] // 3)


def stack_model(poses: Sequence[CameraPose], coeffs: np.ndarray) -> np.ndarray:
    """Stacked projection-coefficient matrix with double-row n equal to
    [z_n1 R_n, ..., z_nK R_n]."""
    coeffs = np.atleast_2d(np.asarray(coeffs, dtype=float))
    if len(poses) != coeffs.shape[0]:
        raise ValueError("pose and coefficient counts disagree")
    k = coeffs.shape[1]
    out = np.zeros((2 * len(poses), 3 * k))
    for n, pose in enumerate(poses):
        out[2 * n:2 * n + 2] = np.hstack([coeffs[n, j] * pose.rotation for j in range(k)])
    return out
