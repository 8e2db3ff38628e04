"""Occlusion fill-in and symmetric rigid SfM.

The rigid reconstruction is the single-basis specialization of the
decoupled factorization: the half-difference of the two halves carries the
symmetry-axis content at rank 1, the half-sum the in-plane content at
rank 2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import CameraPose, ObservationSet, SymmetryOp
from .numerics import (
    GramSolution,
    project_row_orthonormal,
    psd_rank_feasible_point,
    solve_gram_sdp,
    truncated_factorization,
)

_A = SymmetryOp().matrix


@dataclass(frozen=True)
class RigidInitResult:
    poses: tuple
    mean_shape: np.ndarray
    completed: ObservationSet
    flags: tuple = ()


def _combined_mask(obs: ObservationSet) -> np.ndarray:
    """Entry mask of the side-by-side [Y, Y'] matrix, (2N, 2P)."""
    vis = np.repeat(obs.visible, 2, axis=0)
    vis_m = np.repeat(obs.visible_mirror, 2, axis=0)
    return np.hstack([vis, vis_m])


def init_missing_rank3(obs: ObservationSet, iters: int = 10) -> ObservationSet:
    """Fill occluded entries of [Y, Y'] by iterated rank-3 recovery.

    Each iteration truncates the current completion to rank 3 and refits the
    missing entries by least squares against the rank-3 row and column
    spaces, keeping visible entries fixed. ``iters = 0`` leaves the occluded
    placeholders untouched.
    """
    mask = _combined_mask(obs)
    if mask.all() or iters == 0:
        return obs
    p = obs.n_pairs
    data = np.hstack([obs.y, obs.y_mirror])
    filled = np.where(mask, data, 0.0)
    x = filled.copy()
    for _ in range(iters):
        u, s, vt = np.linalg.svd(x, full_matrices=False)
        left = u[:, :3]
        coeffs = np.zeros((3, x.shape[1]))
        for j in range(x.shape[1]):
            m = mask[:, j]
            coeffs[:, j] = np.linalg.lstsq(left[m], data[m, j], rcond=None)[0]
        rows = np.zeros_like(left)
        for i in range(x.shape[0]):
            m = mask[i]
            rows[i] = np.linalg.lstsq(coeffs[:, m].T, data[i, m], rcond=None)[0]
        x = np.where(mask, filled, rows @ coeffs)
    return obs.replace_values(x[:, :p], x[:, p:])


def _masked_norm_sq(diff, m):
    return float((diff[:, m] ** 2).sum())


def _as_rotation(pose):
    return pose.rotation if hasattr(pose, "rotation") else pose


def _consensus_sign_fix(y, y_mirror, poses, visible=None, visible_mirror=None,
                        rounds: int = 6):
    """Resolve each image's two-row sign by reprojecting a consensus shape.

    Signs are seeded from the correlation of per-image closed-form shapes
    with a reference image, then refined by keeping whichever sign reprojects
    the jointly fitted common shape with the smaller residual on the visible
    entries.
    """
    n = len(poses)
    p = y.shape[1]
    if visible is None:
        visible = np.ones((n, p), dtype=bool)
    if visible_mirror is None:
        visible_mirror = np.ones((n, p), dtype=bool)
    rotations = [_as_rotation(p) for p in poses]
    shapes = []
    for i in range(n):
        shape = np.zeros((3, p))
        for j in range(p):
            rows = []
            rhs = []
            if visible[i, j]:
                rows.append(rotations[i])
                rhs.append(y[2 * i:2 * i + 2, j])
            if visible_mirror[i, j]:
                rows.append(rotations[i] @ _A)
                rhs.append(y_mirror[2 * i:2 * i + 2, j])
            if rows:
                shape[:, j] = np.linalg.lstsq(np.vstack(rows),
                                              np.concatenate(rhs), rcond=None)[0]
        shapes.append(shape)
    ref = max(range(n), key=lambda i: np.linalg.norm(shapes[i]))
    signs = np.array([1.0 if np.tensordot(shapes[i], shapes[ref]) >= 0 else -1.0
                      for i in range(n)])
    for _ in range(rounds):
        signed = [signs[i] * rotations[i] for i in range(n)]
        common = fit_common_shape(y, y_mirror, signed, visible, visible_mirror)
        changed = False
        for i in range(n):
            r = rotations[i]
            yi = y[2 * i:2 * i + 2]
            ymi = y_mirror[2 * i:2 * i + 2]
            res_pos = (_masked_norm_sq(yi - r @ common, visible[i])
                       + _masked_norm_sq(ymi - r @ _A @ common, visible_mirror[i]))
            res_neg = (_masked_norm_sq(yi + r @ common, visible[i])
                       + _masked_norm_sq(ymi + r @ _A @ common, visible_mirror[i]))
            s_new = 1.0 if res_pos <= res_neg else -1.0
            changed |= s_new != signs[i]
            signs[i] = s_new
        if not changed:
            break
    return signs


def _axis_scale_correction(axis_cols, plane_cols):
    """Global rescaling of the symmetry-axis column restoring orthonormality.

    The gauge family of the Gram factors includes a scale along the
    symmetry axis; the row-orthogonality and equal-row-norm identities are
    linear in its square, so one least-squares solve over all images
    recovers it.
    """
    coeffs, rhs = [], []
    for col1, cols23 in zip(axis_cols, plane_cols):
        a1, a2 = col1
        b1, b2 = cols23
        coeffs.append(a1 * a2)
        rhs.append(-b1 @ b2)
        coeffs.append(a1 * a1 - a2 * a2)
        rhs.append(-(b1 @ b1 - b2 @ b2))
    coeffs = np.array(coeffs)
    rhs = np.array(rhs)
    denom = coeffs @ coeffs
    if denom <= 0:
        return 1.0
    beta_sq = coeffs @ rhs / denom
    return np.sqrt(beta_sq) if beta_sq > 1e-12 else 1.0


def assemble_cameras(axis_motion, plane_motion, gram: GramSolution, y, y_mirror,
                     visible=None, visible_mirror=None):
    """Per-image 2x3 projections from the factor blocks and Gram factors.

    The symmetry-axis column is rescaled by the global gauge correction,
    rows are normalized to unit length, the per-image sign is resolved by
    consensus reprojection against the visible entries and the result is
    projected to row-orthonormality. Near-zero rows are flagged and
    replaced by the nearest unflagged image's pose in index order.
    """
    n = axis_motion.shape[0] // 2
    axis_cols = [axis_motion[2 * i:2 * i + 2] @ gram.axis_factor for i in range(n)]
    plane_cols = [plane_motion[2 * i:2 * i + 2] @ gram.plane_factor
                  for i in range(n)]
    beta = _axis_scale_correction(axis_cols, plane_cols)
    raw, flagged = [], []
    for i in range(n):
        mat = np.column_stack([beta * axis_cols[i], plane_cols[i]])
        norms = np.linalg.norm(mat, axis=1)
        if norms.min() < 1e-8:
            flagged.append(i)
            raw.append(None)
            continue
        raw.append(project_row_orthonormal(mat / norms[:, None]))
    for i in flagged:
        donor = next((j for off in range(1, n) for j in (i - off, i + off)
                      if 0 <= j < n and raw[j] is not None), None)
        raw[i] = np.eye(2, 3) if donor is None else raw[donor]
    signs = _consensus_sign_fix(y, y_mirror, raw, visible, visible_mirror)
    poses = [CameraPose(signs[i] * raw[i]) for i in range(n)]
    return poses, tuple(f"degenerate_pose_{i}" for i in flagged)


def fit_common_shape(y, y_mirror, poses, visible=None, visible_mirror=None):
    """Joint least-squares rigid shape from the visible entries of all
    images and both halves."""
    n = len(poses)
    p = y.shape[1]
    rotations = [_as_rotation(pose) for pose in poses]
    if visible is None and visible_mirror is None:
        rows = np.vstack([m for r in rotations for m in (r, r @ _A)])
        rhs = np.vstack([m for i in range(n)
                         for m in (y[2 * i:2 * i + 2], y_mirror[2 * i:2 * i + 2])])
        return np.linalg.lstsq(rows, rhs, rcond=None)[0]
    if visible is None:
        visible = np.ones((n, p), dtype=bool)
    if visible_mirror is None:
        visible_mirror = np.ones((n, p), dtype=bool)
    shape = np.zeros((3, p))
    for j in range(p):
        rows, rhs = [], []
        for i in range(n):
            if visible[i, j]:
                rows.append(rotations[i])
                rhs.append(y[2 * i:2 * i + 2, j])
            if visible_mirror[i, j]:
                rows.append(rotations[i] @ _A)
                rhs.append(y_mirror[2 * i:2 * i + 2, j])
        if rows:
            shape[:, j] = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs),
                                          rcond=None)[0]
    return shape


def sym_rigid_sfm(obs: ObservationSet) -> RigidInitResult:
    """Symmetric rigid structure from motion on centered, occlusion-filled
    observations.

    Factorizes the half-difference at rank 1 and the half-sum at rank 2,
    resolves the factorization ambiguity through the single-basis
    orthonormality system, and fits one shared shape. Scales are fixed to 1
    and translations to the centering record.
    """
    from .priorfree import build_orthonormality_system, decouple, factorize_decoupled

    flags = []
    diff, mean = decouple(obs)
    pair = factorize_decoupled(diff, mean, 1)
    data_norm = np.sqrt(np.linalg.norm(diff) ** 2 + np.linalg.norm(mean) ** 2)
    fact_res = np.sqrt(pair.residual_diff ** 2 + pair.residual_mean ** 2)
    if fact_res > 0.5 * data_norm:
        warnings.warn("factorization residual above half the data norm; "
                      "input is not close to rigid symmetric", stacklevel=2)
        flags.append("high_factorization_residual")
    system = build_orthonormality_system(pair)
    # best effort even far away from the rigid symmetric model; the warning
    # above already covers that regime
    gram = solve_gram_sdp(system, 1, conditioning=_row_norm_score(pair),
                          strict=False)
    poses, pose_flags = assemble_cameras(pair.axis_motion, pair.plane_motion,
                                         gram, obs.y, obs.y_mirror,
                                         obs.visible, obs.visible_mirror)
    poses = [CameraPose(p.rotation, 1.0, obs.translations[i])
             for i, p in enumerate(poses)]
    mean_shape = fit_common_shape(obs.y, obs.y_mirror, poses,
                                  obs.visible, obs.visible_mirror)
    y_fill = obs.y.copy()
    ym_fill = obs.y_mirror.copy()
    for i, pose in enumerate(poses):
        rows = slice(2 * i, 2 * i + 2)
        proj = pose.rotation @ mean_shape
        proj_m = pose.rotation @ _A @ mean_shape
        y_fill[rows] = np.where(obs.visible[i], y_fill[rows], proj)
        ym_fill[rows] = np.where(obs.visible_mirror[i], ym_fill[rows], proj_m)
    completed = obs.replace_values(y_fill, ym_fill)
    return RigidInitResult(tuple(poses), mean_shape, completed,
                           tuple(flags) + pose_flags)


def _row_norm_score(pair):
    """Scores Gram factor candidates by the smallest per-image row norm of
    the assembled projections; gauge representatives with near-vanishing
    coefficients recover cameras poorly."""
    def score(factors):
        h1 = factors[0][:, 0]
        h2 = factors[1]
        n = pair.axis_motion.shape[0] // 2
        worst = np.inf
        for i in range(n):
            col1 = pair.axis_motion[2 * i:2 * i + 2] @ h1
            cols23 = pair.plane_motion[2 * i:2 * i + 2] @ h2
            norms = np.linalg.norm(np.column_stack([col1, cols23]), axis=1)
            worst = min(worst, norms.min())
        return worst
    return score


def rigid_factorization(y: np.ndarray) -> tuple:
    """Plain rank-3 rigid factorization with metric upgrade, symmetry
    ignored. ``y`` is a centered (2N, P) stack; returns (poses, shape)."""
    n = y.shape[0] // 2
    motion, shape_hat, _ = truncated_factorization(y, 3)
    rows = []
    rhs = []
    for i in range(n):
        a, b = motion[2 * i], motion[2 * i + 1]
        rows.append(np.kron(a, a))
        rhs.append(1.0)
        rows.append(np.kron(b, b))
        rhs.append(1.0)
        rows.append(np.kron(a, b))
        rhs.append(0.0)
    q_flat = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    corr = psd_rank_projection_sqrt(q_flat.reshape(3, 3))
    poses = []
    for i in range(n):
        poses.append(CameraPose(project_row_orthonormal(motion[2 * i:2 * i + 2] @ corr)))
    shape = np.linalg.lstsq(
        np.vstack([p.rotation for p in poses]),
        np.vstack([y[2 * i:2 * i + 2] for i in range(n)]), rcond=None)[0]
    return poses, shape


def psd_rank_projection_sqrt(q: np.ndarray) -> np.ndarray:
    """Symmetric square-root factor of the PSD projection of a 3x3 matrix."""
    sym = (q + q.T) / 2.0
    w, u = np.linalg.eigh(sym)
    w = np.clip(w, 1e-12, None)
    return u * np.sqrt(w)
