"""Prior-free symmetric NRSfM: decoupled factorization initialization,
ambiguity resolution through orthonormality constraints, nuclear-norm
structure recovery and coordinate-descent refinement.

Also provides the symmetry-disabled baseline that treats the two halves as
independent keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CameraPose,
    FitReport,
    ObservationSet,
    PerImageShapeSet,
    SymmetryOp,
    center_observations,
    rearrange_compact,
)
from .numerics import (
    GramSolution,
    NuclearResult,
    SolverConfig,
    complete_rotation,
    masked_low_rank_factorization,
    nuclear_min_structure,
    project_row_orthonormal,
    psd_rank_feasible_point,
    rotation_from_axis_angle,
    skew_part_vector,
    solve_gram_sdp,
    truncated_factorization,
    _nuclear_min,
)
from .rigid import assemble_cameras, init_missing_rank3
from .validation import check_observations

_A = SymmetryOp().matrix


@dataclass(frozen=True)
class PriorFreeConfig:
    n_bases: int = 3
    max_refine_iters: int = 50
    rel_tol: float = 1e-6
    rank3_iters: int = 10
    solver: SolverConfig = field(default_factory=SolverConfig)
    gram_seed: int = 0
    gram_restarts: int = 10


@dataclass(frozen=True)
class DecoupledPair:
    """Half-difference / half-sum decomposition and its factorizations.

    The half-difference carries only symmetry-axis content (rank K on exact
    data), the half-sum only in-plane content (rank 2K).
    """

    diff_part: np.ndarray
    mean_part: np.ndarray
    axis_motion: np.ndarray
    axis_shape: np.ndarray
    plane_motion: np.ndarray
    plane_shape: np.ndarray
    residual_diff: float
    residual_mean: float
    n_bases: int
    flags: tuple = ()


def decouple(obs: ObservationSet):
    """Rotate the two halves into independent components:
    diff = (Y - Y')/2 and mean = (Y + Y')/2."""
    return (obs.y - obs.y_mirror) / 2.0, (obs.y + obs.y_mirror) / 2.0


def factorize_decoupled(diff: np.ndarray, mean: np.ndarray, n_bases: int) -> DecoupledPair:
    """Rank-K factorization of the difference part and rank-2K factorization
    of the mean part."""
    if 2 * n_bases > min(diff.shape):
        raise ValueError("basis count too large for the observation size")
    axis_motion, axis_shape, res_d = truncated_factorization(diff, n_bases)
    plane_motion, plane_shape, res_m = truncated_factorization(mean, 2 * n_bases)
    flags = ()
    if np.linalg.norm(diff) < 1e-12 * max(np.linalg.norm(mean), 1e-300):
        flags = ("degenerate_axis_content",)
    return DecoupledPair(diff, mean, axis_motion, axis_shape,
                         plane_motion, plane_shape, res_d, res_m, n_bases, flags)


def build_orthonormality_system(pair: DecoupledPair) -> np.ndarray:
    """Stack per-image orthonormality constraints on the Gram blocks.

    Each image contributes the row difference (eliminating the unknown
    squared coefficient) and the row cross term; coefficients act on the
    row-major vecs of the axis and plane Gram blocks.
    """
    n = pair.axis_motion.shape[0] // 2
    rows = np.zeros((2 * n, 5 * pair.n_bases ** 2))
    for i in range(n):
        a1, a2 = pair.axis_motion[2 * i], pair.axis_motion[2 * i + 1]
        b1, b2 = pair.plane_motion[2 * i], pair.plane_motion[2 * i + 1]
        rows[2 * i] = np.concatenate([np.kron(a1, a1) - np.kron(a2, a2),
                                      np.kron(b1, b1) - np.kron(b2, b2)])
        rows[2 * i + 1] = np.concatenate([np.kron(a1, a2), np.kron(b1, b2)])
    return rows


def camera_conditioning(pair: DecoupledPair):
    """Candidate score: smallest per-image row norm of the assembled
    projections. Gauge-equivalent Gram factors whose implied coefficients
    nearly vanish for some image give ill-conditioned cameras."""
    def score(factors):
        h1 = factors[0][:, 0]
        h2 = factors[1]
        worst = np.inf
        n = pair.axis_motion.shape[0] // 2
        for i in range(n):
            col1 = pair.axis_motion[2 * i:2 * i + 2] @ h1
            cols23 = pair.plane_motion[2 * i:2 * i + 2] @ h2
            norms = np.linalg.norm(np.column_stack([col1, cols23]), axis=1)
            worst = min(worst, norms.min())
        return worst
    return score


def recover_cameras(pair: DecoupledPair, gram: GramSolution):
    """Per-image projections from the factor blocks and Gram factors.

    Rows are normalized to unit length, the per-image sign is resolved by
    reprojecting a consensus shape against both candidates, and the result
    is projected to row-orthonormality. Scales are 1.
    """
    y = pair.mean_part + pair.diff_part
    y_mirror = pair.mean_part - pair.diff_part
    poses, _ = assemble_cameras(pair.axis_motion, pair.plane_motion, gram, y, y_mirror)
    return poses


def _full_energy(obs: ObservationSet, poses, shapes) -> float:
    """Reprojection energy over both halves.

    Occluded entries are optimization variables whose optimum is the model
    prediction, where their residual vanishes, so the energy reduces to the
    visible terms.
    """
    total = 0.0
    for i, pose in enumerate(poses):
        rows = slice(2 * i, 2 * i + 2)
        s = shapes[3 * i:3 * i + 3]
        diff = obs.y[rows] - pose.rotation @ s
        diff_m = obs.y_mirror[rows] - pose.rotation @ _A @ s
        total += float((diff[:, obs.visible[i]] ** 2).sum())
        total += float((diff_m[:, obs.visible_mirror[i]] ** 2).sum())
    return total


def update_pose_orthonormal(pose: CameraPose, data_cross: np.ndarray,
                            shape_sq: np.ndarray) -> CameraPose:
    """One rotation increment toward the stationarity condition R @ Phi = C.

    Completes the projection to a full rotation, solves the linearized
    increment by pseudo-inverse, applies the exact exponential of its skew
    part and re-orthonormalizes.
    """
    q = complete_rotation(pose.rotation)
    m = np.eye(2, 3)
    b = q @ shape_sq
    alpha = np.kron(b.T, m)
    beta = (data_cross - m @ b).ravel(order="F")
    try:
        xi_vec = np.linalg.lstsq(alpha, beta, rcond=None)[0]
    except np.linalg.LinAlgError:
        return pose
    xi = xi_vec.reshape(3, 3, order="F")
    rot = rotation_from_axis_angle(skew_part_vector(xi))
    new_rows = project_row_orthonormal((m @ rot @ q))
    return CameraPose(new_rows, pose.scale, pose.translation)


def _refine_pose(obs, i, pose, shape):
    """Accept the rotation increment only when the image energy improves.

    Only the visible entries drive the update; the occluded ones are free
    variables of the energy.
    """
    rows = slice(2 * i, 2 * i + 2)
    y, ym = obs.y[rows], obs.y_mirror[rows]
    v, vm = obs.visible[i], obs.visible_mirror[i]
    sv = shape[:, v]
    svm = (_A @ shape)[:, vm]
    shape_sq = sv @ sv.T + svm @ svm.T
    data_cross = y[:, v] @ sv.T + ym[:, vm] @ svm.T
    candidate = update_pose_orthonormal(pose, data_cross, shape_sq)

    def energy(p):
        diff = y - p.rotation @ shape
        diff_m = ym - p.rotation @ _A @ shape
        return float((diff[:, v] ** 2).sum() + (diff_m[:, vm] ** 2).sum())

    return candidate if energy(candidate) <= energy(pose) else pose


def coordinate_descent_refine(obs: ObservationSet, poses, shapes,
                              cfg: PriorFreeConfig = PriorFreeConfig()):
    """Coordinate descent on the full reprojection energy.

    Alternates the nuclear-norm structure update, per-image rotation
    increments, refilling of the occluded entries from the model and a
    translation re-estimate with re-centering, until the relative energy
    change drops below ``cfg.rel_tol``.
    """
    poses = list(poses)
    shapes = np.array(shapes)
    energy = _full_energy(obs, poses, shapes)
    data_scale = (float((obs.y[np.repeat(obs.visible, 2, axis=0)] ** 2).sum())
                  + float((obs.y_mirror[np.repeat(obs.visible_mirror, 2,
                                                  axis=0)] ** 2).sum()))
    floor = 1e-16 * max(data_scale, 1e-300)
    trace = [energy]
    flags = []
    converged = energy <= floor
    for _ in range(cfg.max_refine_iters):
        if converged:
            break
        result = nuclear_min_structure(obs.y, obs.y_mirror, poses, cfg=cfg.solver,
                                       visible=obs.visible,
                                       visible_mirror=obs.visible_mirror)
        if _full_energy(obs, poses, result.shapes) <= energy:
            shapes = result.shapes
        poses = [_refine_pose(obs, i, poses[i], shapes[3 * i:3 * i + 3])
                 for i in range(len(poses))]
        y = obs.y.copy()
        ym = obs.y_mirror.copy()
        t_new = np.zeros((obs.n_images, 2))
        for i, pose in enumerate(poses):
            rows = slice(2 * i, 2 * i + 2)
            s = shapes[3 * i:3 * i + 3]
            proj = pose.rotation @ s
            proj_m = pose.rotation @ _A @ s
            y[rows] = np.where(obs.visible[i], y[rows], proj)
            ym[rows] = np.where(obs.visible_mirror[i], ym[rows], proj_m)
            count = obs.visible[i].sum() + obs.visible_mirror[i].sum()
            resid = ((y[rows] - proj)[:, obs.visible[i]].sum(axis=1)
                     + (ym[rows] - proj_m)[:, obs.visible_mirror[i]].sum(axis=1))
            t_new[i] = resid / max(count, 1)
            y[rows] -= t_new[i][:, None]
            ym[rows] -= t_new[i][:, None]
        obs = obs.replace_values(y, ym, obs.translations + t_new)
        poses = [CameraPose(p.rotation, p.scale, obs.translations[i])
                 for i, p in enumerate(poses)]
        new_energy = _full_energy(obs, poses, shapes)
        trace.append(new_energy)
        if (new_energy <= floor
                or abs(energy - new_energy) <= cfg.rel_tol * max(energy, 1e-300)):
            energy = new_energy
            converged = True
            break
        energy = new_energy
    if not converged:
        flags.append("refine_not_converged")
    return poses, shapes, obs, FitReport(converged, len(trace) - 1, tuple(trace),
                                         tuple(flags))


def _shape_set(shapes: np.ndarray, n_bases: int) -> PerImageShapeSet:
    """Attach a rank-K factorization of the compact form to the shapes."""
    compact = rearrange_compact(shapes)
    coeffs, flat_bases, _ = truncated_factorization(compact, n_bases)
    p = shapes.shape[1]
    bases = flat_bases.reshape(n_bases, 3, p).reshape(3 * n_bases, p)
    return PerImageShapeSet(shapes, coeffs, bases, n_bases)


def _factorize_pair(obs: ObservationSet, filled: ObservationSet,
                    n_bases: int, iters: int = 60) -> DecoupledPair:
    """Decoupled factorization honoring occlusions.

    On complete data this is the plain truncated factorization. With
    occlusions the axis and plane factors are refitted jointly to every
    visible entry: where both halves are visible they pin the decoupled
    parts directly, and a point visible in a single half still constrains
    the factors through that half's projection (the sum or difference of
    the two parts). Warm-started from the rank-3-filled matrices.
    """
    diff_f, mean_f = decouple(filled)
    if obs.visible.all() and obs.visible_mirror.all():
        return factorize_decoupled(diff_f, mean_f, n_bases)
    k = n_bases
    n, p = obs.n_images, obs.n_pairs
    axis_motion, axis_shape, _ = truncated_factorization(diff_f, k)
    plane_motion, plane_shape, _ = truncated_factorization(mean_f, 2 * k)
    vis2 = np.repeat(obs.visible, 2, axis=0)
    vis2_m = np.repeat(obs.visible_mirror, 2, axis=0)
    for _ in range(iters):
        for j in range(p):
            rows, rhs = [], []
            for r in range(2 * n):
                if vis2[r, j]:
                    rows.append(np.concatenate([axis_motion[r], plane_motion[r]]))
                    rhs.append(obs.y[r, j])
                if vis2_m[r, j]:
                    rows.append(np.concatenate([-axis_motion[r], plane_motion[r]]))
                    rhs.append(obs.y_mirror[r, j])
            if len(rows) >= 3 * k:
                sol = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
                axis_shape[:, j] = sol[:k]
                plane_shape[:, j] = sol[k:]
        for r in range(2 * n):
            rows, rhs = [], []
            for j in range(p):
                if vis2[r, j]:
                    rows.append(np.concatenate([axis_shape[:, j], plane_shape[:, j]]))
                    rhs.append(obs.y[r, j])
                if vis2_m[r, j]:
                    rows.append(np.concatenate([-axis_shape[:, j], plane_shape[:, j]]))
                    rhs.append(obs.y_mirror[r, j])
            if len(rows) >= 3 * k:
                sol = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
                axis_motion[r] = sol[:k]
                plane_motion[r] = sol[k:]
    res_d = float(np.linalg.norm(
        ((obs.y - obs.y_mirror) / 2 - axis_motion @ axis_shape)[
            vis2 & vis2_m]))
    res_m = float(np.linalg.norm(
        ((obs.y + obs.y_mirror) / 2 - plane_motion @ plane_shape)[
            vis2 & vis2_m]))
    flags = ()
    if np.linalg.norm(diff_f) < 1e-12 * max(np.linalg.norm(mean_f), 1e-300):
        flags = ("degenerate_axis_content",)
    return DecoupledPair(diff_f, mean_f, axis_motion, axis_shape,
                         plane_motion, plane_shape, res_d, res_m, n_bases, flags)


def fit_sym_priorfree(obs: ObservationSet, cfg: PriorFreeConfig = PriorFreeConfig()):
    """Full symmetric prior-free pipeline.

    Centering, rank-3 occlusion fill, decoupled factorization (masked when
    occlusions are present), Gram solve, camera recovery, nuclear-norm
    structure recovery and coordinate-descent refinement. Returns the
    per-image shapes, poses and a report.
    """
    check_observations(obs)
    raw = obs
    obs, _ = center_observations(obs)
    filled = init_missing_rank3(obs, cfg.rank3_iters)
    pair = _factorize_pair(obs, filled, cfg.n_bases)
    system = build_orthonormality_system(pair)
    gram = solve_gram_sdp(system, cfg.n_bases, seed=cfg.gram_seed,
                          n_restarts=cfg.gram_restarts,
                          conditioning=camera_conditioning(pair),
                          strict=False)
    poses, pose_flags = assemble_cameras(pair.axis_motion, pair.plane_motion,
                                         gram, filled.y, filled.y_mirror,
                                         obs.visible, obs.visible_mirror)
    poses = [CameraPose(p.rotation, 1.0, obs.translations[i])
             for i, p in enumerate(poses)]
    init = nuclear_min_structure(obs.y, obs.y_mirror, poses, cfg=cfg.solver,
                                 visible=obs.visible,
                                 visible_mirror=obs.visible_mirror)
    poses, shapes, obs, report = coordinate_descent_refine(obs, poses, init.shapes, cfg)
    flags = pair.flags + pose_flags + report.flags
    if not init.converged:
        flags += ("structure_init_not_converged",)
    report = FitReport(report.converged, report.n_iter, report.objective_trace, flags)
    return _shape_set(shapes, cfg.n_bases), poses, report


# ---------------------------------------------------------------------------
# Symmetry-disabled baseline
# ---------------------------------------------------------------------------

def _plain_orthonormality_system(motion: np.ndarray, k3: int) -> np.ndarray:
    n = motion.shape[0] // 2
    rows = np.zeros((2 * n, k3 * k3))
    for i in range(n):
        a1, a2 = motion[2 * i], motion[2 * i + 1]
        rows[2 * i] = np.kron(a1, a1) - np.kron(a2, a2)
        rows[2 * i + 1] = np.kron(a1, a2)
    return rows


def _plain_sign_fix(w, mask, poses, rounds=6):
    n = len(poses)
    signs = np.ones(n)

    def common_shape():
        shape = np.zeros((3, w.shape[1]))
        for j in range(w.shape[1]):
            rows = [signs[i] * poses[i].rotation for i in range(n) if mask[i, j]]
            rhs = [w[2 * i:2 * i + 2, j] for i in range(n) if mask[i, j]]
            if rows:
                shape[:, j] = np.linalg.lstsq(np.vstack(rows),
                                              np.concatenate(rhs), rcond=None)[0]
        return shape

    for _ in range(rounds):
        common = common_shape()
        changed = False
        for i in range(n):
            wi = w[2 * i:2 * i + 2][:, mask[i]]
            proj = (poses[i].rotation @ common)[:, mask[i]]
            s_new = (1.0 if np.linalg.norm(wi - proj) <= np.linalg.norm(wi + proj)
                     else -1.0)
            changed |= s_new != signs[i]
            signs[i] = s_new
        if not changed:
            break
    return [CameraPose(signs[i] * poses[i].rotation, poses[i].scale,
                       poses[i].translation) for i in range(n)]


def _refine_pose_plain(w, mask, i, pose, shape):
    rows = slice(2 * i, 2 * i + 2)
    y = w[rows][:, mask[i]]
    sv = shape[:, mask[i]]
    candidate = update_pose_orthonormal(pose, y @ sv.T, sv @ sv.T)

    def energy(p):
        return np.linalg.norm(y - (p.rotation @ shape)[:, mask[i]]) ** 2

    return candidate if energy(candidate) <= energy(pose) else pose


def fit_priorfree(obs: ObservationSet, cfg: PriorFreeConfig = PriorFreeConfig()):
    """Prior-free baseline ignoring the pairing: both halves enter as
    independent keypoint columns of a single (2N, 2P) track matrix."""
    check_observations(obs)
    obs, _ = center_observations(obs)
    filled = init_missing_rank3(obs, cfg.rank3_iters)
    k = cfg.n_bases
    w = np.hstack([obs.y, obs.y_mirror])
    w_filled = np.hstack([filled.y, filled.y_mirror])
    mask = np.hstack([obs.visible, obs.visible_mirror])
    mask2 = np.repeat(mask, 2, axis=0)
    motion, _, _ = masked_low_rank_factorization(w, mask2, 3 * k, init=w_filled)
    system = _plain_orthonormality_system(motion, 3 * k)

    def conditioning(factors):
        h = factors[0]
        worst = np.inf
        for i in range(obs.n_images):
            norms = np.linalg.norm(motion[2 * i:2 * i + 2] @ h, axis=1)
            worst = min(worst, norms.min())
        return worst

    factors, _ = psd_rank_feasible_point(system, dims=(3 * k,), ranks=(3,),
                                         seed=cfg.gram_seed,
                                         n_restarts=cfg.gram_restarts,
                                         score_factors=conditioning,
                                         strict=False)
    h = factors[0]
    poses = []
    for i in range(obs.n_images):
        mat = motion[2 * i:2 * i + 2] @ h
        norms = np.linalg.norm(mat, axis=1)
        norms = np.maximum(norms, 1e-12 * max(norms.max(), 1e-300))
        poses.append(CameraPose(project_row_orthonormal(mat / norms[:, None]),
                                1.0, obs.translations[i]))
    poses = _plain_sign_fix(w, mask, poses)

    targets = [w[2 * i:2 * i + 2] for i in range(obs.n_images)]
    row_masks = [np.tile(mask[i], (2, 1)) for i in range(obs.n_images)]

    def solve_structure():
        return _nuclear_min([p.rotation for p in poses], targets, cfg.solver,
                            row_masks)

    def energy_of(current):
        return sum(
            float((((targets[i] - poses[i].rotation
                     @ current[3 * i:3 * i + 3]))[:, mask[i]] ** 2).sum())
            for i in range(obs.n_images))

    shapes = solve_structure().shapes
    energy = energy_of(shapes)
    floor = 1e-16 * max(float((w[mask2] ** 2).sum()), 1e-300)
    trace = [energy]
    converged = energy <= floor
    for _ in range(cfg.max_refine_iters):
        if converged:
            break
        cand = solve_structure().shapes
        if energy_of(cand) <= energy:
            shapes = cand
        poses = [_refine_pose_plain(w, mask, i, poses[i],
                                    shapes[3 * i:3 * i + 3])
                 for i in range(obs.n_images)]
        new_energy = energy_of(shapes)
        trace.append(new_energy)
        if (new_energy <= floor
                or abs(energy - new_energy) <= cfg.rel_tol * max(energy, 1e-300)):
            energy = new_energy
            converged = True
            break
        energy = new_energy
    report = FitReport(converged, len(trace) - 1, tuple(trace),
                       () if converged else ("refine_not_converged",))
    return _shape_set(shapes, k), poses, report
