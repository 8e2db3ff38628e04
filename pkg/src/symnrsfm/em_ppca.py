"""EM fitting of the symmetric mean-shape-plus-bases model under weak
perspective, and the unconstrained baseline that treats both halves as
independent keypoints.

Per-image keypoint vectors and shape vectors are point-major throughout
(``[u1, v1, u2, v2, ...]`` and ``[x1, y1, z1, x2, ...]``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    CameraPose,
    FitReport,
    MeanShapeModel,
    ObservationSet,
    PosteriorStats,
    SymmetryOp,
    center_observations,
    reflect_points,
)
from .numerics import complete_rotation, project_row_orthonormal, \
    rotation_from_axis_angle, skew_part_vector
from .rigid import RigidInitResult, init_missing_rank3, rigid_factorization, sym_rigid_sfm
from .validation import check_observations

_A = SymmetryOp().matrix


@dataclass(frozen=True)
class EmConfig:
    n_bases: int = 3
    coupling: float = 1.0
    max_em_iters: int = 100
    rel_tol: float = 1e-6
    rank3_iters: int = 10
    min_noise: float = 1e-12
    anneal_decay: float = 0.85

    def __post_init__(self):
        if self.n_bases < 1:
            raise ValueError("need at least one deformation basis")
        if self.coupling < 0:
            raise ValueError("coupling weight must be nonnegative")
        if not 0.0 < self.anneal_decay < 1.0:
            raise ValueError("annealing decay must lie in (0, 1)")


def point_major(points: np.ndarray) -> np.ndarray:
    """(d, P) array of columns to a point-major dP vector."""
    return np.asarray(points, dtype=float).T.ravel()


def as_columns(vec: np.ndarray, rows: int) -> np.ndarray:
    """Inverse of :func:`point_major`."""
    return np.asarray(vec, dtype=float).reshape(-1, rows).T


def projection_matrix(pose: CameraPose, n_points: int) -> np.ndarray:
    """Block-diagonal weak-perspective projection acting on a point-major
    shape vector."""
    return np.kron(np.eye(n_points), pose.scale * pose.rotation)


def _expand_reflection(n_points: int) -> np.ndarray:
    return np.kron(np.eye(n_points), _A)


def e_step(model: MeanShapeModel, pose: CameraPose, yn: np.ndarray,
           yn_mirror: np.ndarray) -> PosteriorStats:
    """Posterior statistics of one image's deformation coefficients.

    Conditioning the unit Gaussian prior on both halves gives a Gaussian
    with covariance sigma^2 * (V^T G^T G V + V'^T G^T G V' + sigma^2 I)^-1.
    """
    if model.noise_var <= 0:
        raise ValueError("noise variance must be positive")
    p = model.n_pairs
    g = projection_matrix(pose, p)
    t = np.tile(pose.translation, p)
    gv = g @ model.bases
    gvm = g @ model.mirror_bases
    gram = gv.T @ gv + gvm.T @ gvm + model.noise_var * np.eye(model.n_bases)
    gamma = np.linalg.inv(gram)
    resid = yn - g @ model.mean_shape - t
    resid_m = yn_mirror - g @ model.mirror_mean_shape - t
    mean = gamma @ (gv.T @ resid + gvm.T @ resid_m)
    covariance = model.noise_var * gamma
    return PosteriorStats(mean, covariance, covariance + np.outer(mean, mean))


def m_step_shape(obs: ObservationSet, poses, stats, cfg: EmConfig):
    """Joint update of the mean shape and both basis stacks.

    All three are coupled through the expected complete-data objective, so
    the stationarity conditions form one linear system solved at once.
    Returns ``(mean_shape, bases, mirror_bases, flags)``; a singular system
    falls back to a diagonally damped solve and is flagged.
    """
    p = obs.n_pairs
    k = stats[0].mean.size
    refl = _expand_reflection(p)
    d3 = 3 * p
    a_blk = np.zeros((d3, d3))
    b_blk = np.zeros((k * d3, d3))
    d_blk = np.zeros((k * d3, k * d3))
    c_blk = np.zeros((d3, k * d3))
    r1 = np.zeros(d3)
    r2 = np.zeros(k * d3)
    r3 = np.zeros(k * d3)
    for i, pose in enumerate(poses):
        g = projection_matrix(pose, p)
        gtg = g.T @ g
        t = np.tile(pose.translation, p)
        yn = point_major(obs.image(i))
        ym = point_major(obs.image_mirror(i))
        mu = stats[i].mean
        phi = stats[i].second_moment
        a_blk += gtg + refl @ gtg @ refl
        b_blk += np.kron(mu[:, None], gtg)
        c_blk += np.kron(mu[None, :], refl @ gtg)
        d_blk += np.kron(phi, gtg)
        gy = g.T @ (yn - t)
        gym = g.T @ (ym - t)
        r1 += gy + refl @ gym
        r2 += np.kron(mu, gy)
        r3 += np.kron(mu, gym)
    damp = 2.0 * cfg.coupling * _current_noise(stats)
    eye_big = np.eye(k * d3)
    cross = np.kron(np.eye(k), refl)
    lhs = np.block([
        [a_blk, b_blk.T, c_blk],
        [b_blk, d_blk + damp * eye_big, -damp * cross],
        [b_blk @ refl, -damp * cross, d_blk + damp * eye_big],
    ])
    rhs = np.concatenate([r1, r2, r3])
    flags = ()
    try:
        sol = np.linalg.solve(lhs, rhs)
        if not np.isfinite(sol).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.solve(lhs + 1e-9 * np.eye(lhs.shape[0]), rhs)
        flags = ("damped_shape_solve",)
    mean_shape = sol[:d3]
    bases = sol[d3:d3 + k * d3].reshape(k, d3).T
    mirror = sol[d3 + k * d3:].reshape(k, d3).T
    return mean_shape, bases, mirror, flags


def _current_noise(stats) -> float:
    # the damping 2*lambda*sigma^2 uses the noise level the statistics were
    # computed under, carried on the stats wrapper by the fit loop
    return getattr(stats, "noise_var", 1.0)


class _StatsList(list):
    """Posterior statistics plus the noise level they were computed under."""

    def __init__(self, items, noise_var):
        super().__init__(items)
        self.noise_var = noise_var


def _homogenized(model: MeanShapeModel):
    vt = np.column_stack([model.mean_shape, model.bases])
    vtm = np.column_stack([model.mirror_mean_shape, model.mirror_bases])
    return vt, vtm


def _homog_stats(stats: PosteriorStats):
    k = stats.mean.size
    mu_t = np.concatenate([[1.0], stats.mean])
    phi_t = np.zeros((k + 1, k + 1))
    phi_t[0, 0] = 1.0
    phi_t[0, 1:] = stats.mean
    phi_t[1:, 0] = stats.mean
    phi_t[1:, 1:] = stats.second_moment
    return mu_t, phi_t


def expected_image_residual(pose: CameraPose, vt, vtm, mu_t, phi_t, yn, ym):
    """Posterior expectation of the squared reprojection error of one image,
    both halves."""
    p = yn.size // 2
    g = projection_matrix(pose, p)
    t = np.tile(pose.translation, p)
    total = 0.0
    for y, v in ((yn, vt), (ym, vtm)):
        d = y - t
        gv = g @ v
        total += (d @ d - 2.0 * d @ (gv @ mu_t)
                  + np.trace(gv.T @ gv @ phi_t))
    return total


def m_step_camera_noise(obs: ObservationSet, model: MeanShapeModel, stats, poses):
    """Closed-form updates of the translations, scales and noise variance."""
    p = obs.n_pairs
    vt, vtm = _homogenized(model)
    new_t = np.zeros((obs.n_images, 2))
    new_c = np.zeros(obs.n_images)
    total = 0.0
    new_poses = []
    for i, pose in enumerate(poses):
        yn = point_major(obs.image(i))
        ym = point_major(obs.image_mirror(i))
        mu_t, phi_t = _homog_stats(stats[i])
        r = pose.rotation
        pred = as_columns(vt @ mu_t, 3)
        pred_m = as_columns(vtm @ mu_t, 3)
        proj = pose.scale * r @ pred
        proj_m = pose.scale * r @ pred_m
        new_t[i] = ((obs.image(i) - proj).sum(axis=1)
                    + (obs.image_mirror(i) - proj_m).sum(axis=1)) / (2 * p)
        num = 0.0
        den = 0.0
        rtr = r.T @ r
        for j in range(p):
            vp = vt[3 * j:3 * j + 3]
            vpm = vtm[3 * j:3 * j + 3]
            yj = obs.image(i)[:, j] - new_t[i]
            yjm = obs.image_mirror(i)[:, j] - new_t[i]
            num += mu_t @ vp.T @ r.T @ yj + mu_t @ vpm.T @ r.T @ yjm
            den += np.trace(vp.T @ rtr @ vp @ phi_t) + np.trace(vpm.T @ rtr @ vpm @ phi_t)
        if den <= 0:
            raise ValueError(f"degenerate pose {i}: scale denominator not positive")
        new_c[i] = num / den
        if new_c[i] <= 0:
            raise ValueError(f"degenerate pose {i}: nonpositive scale estimate")
        candidate = CameraPose(r, new_c[i], new_t[i])
        total += expected_image_residual(candidate, vt, vtm, mu_t, phi_t, yn, ym)
        new_poses.append(candidate)
    sigma2 = max(total / (4 * p * obs.n_images), 1e-300)
    return sigma2, new_t, new_c, new_poses


def update_rotation_increment(pose: CameraPose, model: MeanShapeModel, stats,
                              yn: np.ndarray, yn_mirror: np.ndarray) -> CameraPose:
    """Rotation update through the full-rotation parameterization.

    Solves the linearized stationarity condition for the increment by
    pseudo-inverse, applies the exact exponential of its skew part and
    keeps the previous pose whenever the expected residual would not
    improve.
    """
    vt, vtm = _homogenized(model)
    mu_t, phi_t = _homog_stats(stats)
    p = yn.size // 2
    c = pose.scale
    q = complete_rotation(pose.rotation)
    m = np.eye(2, 3)
    phi3 = np.zeros((3, 3))
    cross = np.zeros((2, 3))
    yc = as_columns(yn, 2) - pose.translation[:, None]
    ycm = as_columns(yn_mirror, 2) - pose.translation[:, None]
    for j in range(p):
        vp = vt[3 * j:3 * j + 3]
        vpm = vtm[3 * j:3 * j + 3]
        phi3 += vp @ phi_t @ vp.T + vpm @ phi_t @ vpm.T
        cross += np.outer(yc[:, j], vp @ mu_t) + np.outer(ycm[:, j], vpm @ mu_t)
    alpha = np.kron((c * c * q @ phi3).T, m)
    beta = (c * cross - c * c * m @ q @ phi3).ravel(order="F")
    try:
        xi = np.linalg.lstsq(alpha, beta, rcond=None)[0].reshape(3, 3, order="F")
    except np.linalg.LinAlgError:
        return pose
    rot = rotation_from_axis_angle(skew_part_vector(xi))
    candidate = CameraPose(project_row_orthonormal(m @ rot @ q), c, pose.translation)

    def expected(p_):
        return expected_image_residual(p_, vt, vtm, mu_t, phi_t, yn, yn_mirror)

    return candidate if expected(candidate) <= expected(pose) else pose


def init_bases_pca(obs: ObservationSet, rigid: RigidInitResult, n_bases: int,
                   rounds: int = 3):
    """Deformation bases from PCA on lifted reprojection residuals.

    Residuals of both halves against the rigid model are lifted to 3D per
    point through the stacked projection and its reflection, stacked over
    images and reduced to the leading principal directions; the mirror
    bases start as the exact reflection. Falls back to small seeded random
    symmetric-pair bases when the residuals vanish.
    """
    n, p = obs.n_images, obs.n_pairs
    k = n_bases
    if n < k:
        warnings.warn(f"only {n} images for {k} bases, reducing", stacklevel=2)
        k = max(1, n)
    mean_mat = rigid.mean_shape
    lifted = np.zeros((n, 3 * p))
    bases = np.zeros((3 * p, k))
    for _ in range(rounds):
        for i in range(n):
            r = rigid.poses[i].rotation
            res = obs.image(i) - r @ mean_mat
            res_m = obs.image_mirror(i) - r @ _A @ mean_mat
            lift = np.linalg.lstsq(np.vstack([r, r @ _A]),
                                   np.vstack([res, res_m]), rcond=None)[0]
            lifted[i] = point_major(lift)
        u, s, vtv = np.linalg.svd(lifted, full_matrices=False)
        if s[0] <= 1e-12 * max(np.linalg.norm(mean_mat), 1e-300):
            rng = np.random.default_rng(0)
            raw = 1e-3 * rng.normal(size=(3 * p, k))
            return raw, _mirror_columns(raw), ("random_bases_fallback",)
        bases = (vtv[:k] * (s[:k, None] / np.sqrt(n))).T
    return bases, _mirror_columns(bases), ()


def _mirror_columns(bases: np.ndarray) -> np.ndarray:
    out = np.empty_like(bases)
    for j in range(bases.shape[1]):
        out[:, j] = reflect_points(bases[:, j])
    return out


def _objective(obs, model, stats, poses, cfg) -> float:
    """Free-energy objective: expected complete-data misfit, prior and
    entropy terms, plus the mirror-basis coupling penalty. Non-increasing
    across full EM iterations."""
    vt, vtm = _homogenized(model)
    s2 = model.noise_var
    p = obs.n_pairs
    k = model.n_bases
    total = 0.0
    for i, pose in enumerate(poses):
        mu_t, phi_t = _homog_stats(stats[i])
        res = expected_image_residual(pose, vt, vtm, mu_t, phi_t,
                                      point_major(obs.image(i)),
                                      point_major(obs.image_mirror(i)))
        total += res / (2.0 * s2) + 2.0 * p * np.log(2.0 * np.pi * s2)
        total += 0.5 * np.trace(stats[i].second_moment)
        sign, logdet = np.linalg.slogdet(stats[i].covariance)
        total -= 0.5 * (logdet + k * (1.0 + np.log(2.0 * np.pi)))
    total += cfg.coupling * np.linalg.norm(
        model.mirror_bases - _mirror_columns(model.bases)) ** 2
    return total


def _impute(obs: ObservationSet, model: MeanShapeModel, stats, poses) -> ObservationSet:
    """Replace occluded entries by the posterior-mean model prediction."""
    if obs.visible.all() and obs.visible_mirror.all():
        return obs
    y = obs.y.copy()
    ym = obs.y_mirror.copy()
    for i, pose in enumerate(poses):
        rows = slice(2 * i, 2 * i + 2)
        shape = as_columns(model.mean_shape + model.bases @ stats[i].mean, 3)
        shape_m = as_columns(model.mirror_mean_shape
                             + model.mirror_bases @ stats[i].mean, 3)
        proj = pose.scale * pose.rotation @ shape + pose.translation[:, None]
        proj_m = pose.scale * pose.rotation @ shape_m + pose.translation[:, None]
        y[rows] = np.where(obs.visible[i], y[rows], proj)
        ym[rows] = np.where(obs.visible_mirror[i], ym[rows], proj_m)
    return obs.replace_values(y, ym)


def _reinit_cameras_decoupled(obs: ObservationSet, n_bases: int, poses):
    """Camera re-initialization at the model's true rank.

    The rigid recovery carries a systematic deformation-induced pose bias
    that the EM cannot escape at desk scale, so the poses are re-derived
    from the rank-K decoupled factorization of the occlusion-filled data;
    the rigid poses are kept when the factorization path fails.
    """
    from .numerics import solve_gram_sdp
    from .priorfree import (
        build_orthonormality_system,
        camera_conditioning,
        decouple,
        factorize_decoupled,
    )
    from .rigid import assemble_cameras

    try:
        diff, mean = decouple(obs)
        pair = factorize_decoupled(diff, mean, n_bases)
        system = build_orthonormality_system(pair)
        gram = solve_gram_sdp(system, n_bases,
                              conditioning=camera_conditioning(pair))
        new_poses, flags = assemble_cameras(pair.axis_motion, pair.plane_motion,
                                            gram, obs.y, obs.y_mirror)
        return new_poses, flags
    except (ValueError, np.linalg.LinAlgError):
        return list(poses), ("camera_reinit_failed",)


def fit_sym_em_ppca(obs: ObservationSet, cfg: EmConfig = EmConfig()):
    """Full symmetric EM pipeline.

    Rigid initialization, camera re-initialization at the working rank,
    residual-PCA bases, then alternating E and M steps until the objective
    stabilizes. The noise variance is annealed down a geometric floor so
    early iterations stay mean-dominated; the floor never moves below the
    closed-form update, keeping the objective non-increasing.
    """
    check_observations(obs)
    obs, _ = center_observations(obs)
    obs = init_missing_rank3(obs, cfg.rank3_iters)
    rigid = sym_rigid_sfm(obs)
    obs = rigid.completed
    poses, reinit_flags = _reinit_cameras_decoupled(obs, cfg.n_bases, rigid.poses)
    rigid = RigidInitResult(tuple(poses), rigid.mean_shape, obs, rigid.flags)
    bases, mirror_bases, flags = init_bases_pca(obs, rigid, cfg.n_bases)
    flags = tuple(flags) + tuple(rigid.flags) + tuple(reinit_flags)
    k = bases.shape[1]
    resid0 = sum(
        np.linalg.norm(obs.image(i) - poses[i].rotation @ rigid.mean_shape) ** 2
        + np.linalg.norm(obs.image_mirror(i)
                         - poses[i].rotation @ _A @ rigid.mean_shape) ** 2
        for i in range(obs.n_images))
    noise0 = max(resid0 / (4 * obs.n_pairs * obs.n_images), 1e-8)
    model = MeanShapeModel(point_major(rigid.mean_shape), bases, mirror_bases,
                           np.zeros((obs.n_images, k)), noise0, cfg.coupling)
    trace = []
    converged = False
    stats = None
    noise_prev = noise0
    for it in range(cfg.max_em_iters):
        if stats is not None:
            obs = _impute(obs, model, stats, poses)
        stats = _StatsList([e_step(model, poses[i],
                                   point_major(obs.image(i)),
                                   point_major(obs.image_mirror(i)))
                            for i in range(obs.n_images)], model.noise_var)
        mean_shape, bases, mirror_bases, step_flags = m_step_shape(obs, poses, stats, cfg)
        flags += step_flags
        model = MeanShapeModel(mean_shape, bases, mirror_bases, model.coeffs,
                               model.noise_var, cfg.coupling)
        sigma2, _, _, poses = m_step_camera_noise(obs, model, stats, poses)
        floor = noise0 * cfg.anneal_decay ** it
        noise = min(noise_prev, max(sigma2, floor, cfg.min_noise))
        noise_prev = noise
        model = MeanShapeModel(mean_shape, bases, mirror_bases, model.coeffs,
                               noise, cfg.coupling)
        poses = [update_rotation_increment(poses[i], model, stats[i],
                                           point_major(obs.image(i)),
                                           point_major(obs.image_mirror(i)))
                 for i in range(obs.n_images)]
        trace.append(_objective(obs, model, stats, poses, cfg))
        if it > 0 and abs(trace[-1] - trace[-2]) <= cfg.rel_tol * max(abs(trace[-2]), 1e-300):
            converged = True
            break
    coeffs = np.vstack([s.mean for s in stats])
    model = MeanShapeModel(model.mean_shape, model.bases, model.mirror_bases,
                           coeffs, model.noise_var, cfg.coupling)
    if not converged:
        flags += ("em_not_converged",)
    return model, poses, FitReport(converged, len(trace), tuple(trace), flags)


# ---------------------------------------------------------------------------
# Unconstrained EM-PPCA baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlainPpcaModel:
    """Mean-plus-bases model over the 2P unconstrained keypoints."""

    mean_shape: np.ndarray
    bases: np.ndarray
    coeffs: np.ndarray
    noise_var: float

    @property
    def n_points(self) -> int:
        return self.mean_shape.size // 3

    @property
    def n_bases(self) -> int:
        return self.bases.shape[1]


def _plain_e_step(model: PlainPpcaModel, pose: CameraPose, yn: np.ndarray):
    g = projection_matrix(pose, model.n_points)
    t = np.tile(pose.translation, model.n_points)
    gv = g @ model.bases
    gamma = np.linalg.inv(gv.T @ gv + model.noise_var * np.eye(model.n_bases))
    mean = gamma @ (gv.T @ (yn - g @ model.mean_shape - t))
    covariance = model.noise_var * gamma
    return PosteriorStats(mean, covariance, covariance + np.outer(mean, mean))


def _plain_expected_residual(pose, vt, mu_t, phi_t, yn):
    g = projection_matrix(pose, yn.size // 2)
    d = yn - np.tile(pose.translation, yn.size // 2)
    gv = g @ vt
    return d @ d - 2.0 * d @ (gv @ mu_t) + np.trace(gv.T @ gv @ phi_t)


def fit_em_ppca(obs: ObservationSet, cfg: EmConfig = EmConfig()):
    """Baseline EM-PPCA over the 2P keypoints with no symmetry coupling."""
    check_observations(obs)
    obs, _ = center_observations(obs)
    obs = init_missing_rank3(obs, cfg.rank3_iters)
    n, p2 = obs.n_images, 2 * obs.n_pairs
    stacked = np.hstack([obs.y, obs.y_mirror])
    mask = np.hstack([obs.visible, obs.visible_mirror])
    poses, mean_mat = rigid_factorization(stacked)
    k = min(cfg.n_bases, n)
    if k < cfg.n_bases:
        warnings.warn(f"only {n} images for {cfg.n_bases} bases, reducing", stacklevel=2)
    lifted = np.zeros((n, 3 * p2))
    for i in range(n):
        res = stacked[2 * i:2 * i + 2] - poses[i].rotation @ mean_mat
        lift = np.linalg.pinv(poses[i].rotation) @ res
        lifted[i] = point_major(lift)
    u, s, vtv = np.linalg.svd(lifted, full_matrices=False)
    if s[0] <= 1e-12 * max(np.linalg.norm(mean_mat), 1e-300):
        rng = np.random.default_rng(0)
        bases = 1e-3 * rng.normal(size=(3 * p2, k))
    else:
        bases = (vtv[:k] * (s[:k, None] / np.sqrt(n))).T
    resid0 = sum(np.linalg.norm(stacked[2 * i:2 * i + 2]
                                - poses[i].rotation @ mean_mat) ** 2
                 for i in range(n))
    noise0 = max(resid0 / (2 * p2 * n), 1e-8)
    model = PlainPpcaModel(point_major(mean_mat), bases, np.zeros((n, k)), noise0)
    trace = []
    converged = False
    stats = None
    noise_prev = noise0
    for it in range(cfg.max_em_iters):
        if stats is not None and not mask.all():
            for i, pose in enumerate(poses):
                rows = slice(2 * i, 2 * i + 2)
                shape = as_columns(model.mean_shape + model.bases @ stats[i].mean, 3)
                proj = pose.scale * pose.rotation @ shape + pose.translation[:, None]
                stacked[rows] = np.where(mask[i], stacked[rows], proj)
        stats = [_plain_e_step(model, poses[i], point_major(stacked[2 * i:2 * i + 2]))
                 for i in range(n)]
        model, poses, total_residual = _plain_m_step(stacked, poses, stats, model, cfg)
        floor = noise0 * cfg.anneal_decay ** it
        sigma2 = max(total_residual / (2 * p2 * n), cfg.min_noise)
        noise = min(noise_prev, max(sigma2, floor, cfg.min_noise))
        noise_prev = noise
        model = PlainPpcaModel(model.mean_shape, model.bases, model.coeffs, noise)
        objective = total_residual / (2 * noise) + p2 * n * np.log(2 * np.pi * noise) \
            + 0.5 * sum(np.trace(s.second_moment) for s in stats)
        for s in stats:
            _, logdet = np.linalg.slogdet(s.covariance)
            objective -= 0.5 * (logdet + s.mean.size * (1.0 + np.log(2.0 * np.pi)))
        trace.append(objective)
        if it > 0 and abs(trace[-1] - trace[-2]) <= cfg.rel_tol * max(abs(trace[-2]), 1e-300):
            converged = True
            break
    model = PlainPpcaModel(model.mean_shape, model.bases,
                           np.vstack([s.mean for s in stats]), model.noise_var)
    flags = () if converged else ("em_not_converged",)
    return model, poses, FitReport(converged, len(trace), tuple(trace), flags)


def _plain_m_step(stacked, poses, stats, model, cfg):
    n = len(poses)
    p2 = stacked.shape[1]
    d3 = 3 * p2
    k = model.n_bases
    a_blk = np.zeros((d3, d3))
    b_blk = np.zeros((k * d3, d3))
    d_blk = np.zeros((k * d3, k * d3))
    r1 = np.zeros(d3)
    r2 = np.zeros(k * d3)
    for i, pose in enumerate(poses):
        g = projection_matrix(pose, p2)
        gtg = g.T @ g
        t = np.tile(pose.translation, p2)
        yn = point_major(stacked[2 * i:2 * i + 2])
        mu = stats[i].mean
        phi = stats[i].second_moment
        a_blk += gtg
        b_blk += np.kron(mu[:, None], gtg)
        d_blk += np.kron(phi, gtg)
        gy = g.T @ (yn - t)
        r1 += gy
        r2 += np.kron(mu, gy)
    lhs = np.block([[a_blk, b_blk.T], [b_blk, d_blk]])
    try:
        sol = np.linalg.solve(lhs, np.concatenate([r1, r2]))
        if not np.isfinite(sol).all():
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        sol = np.linalg.solve(lhs + 1e-9 * np.eye(lhs.shape[0]),
                              np.concatenate([r1, r2]))
    mean_shape = sol[:d3]
    bases = sol[d3:].reshape(k, d3).T

    vt = np.column_stack([mean_shape, bases])
    total = 0.0
    new_poses = []
    for i, pose in enumerate(poses):
        yn = point_major(stacked[2 * i:2 * i + 2])
        mu_t, phi_t = _homog_stats(stats[i])
        r = pose.rotation
        pred = as_columns(vt @ mu_t, 3)
        t_new = (stacked[2 * i:2 * i + 2] - pose.scale * r @ pred).sum(axis=1) / p2
        num = den = 0.0
        rtr = r.T @ r
        yc = stacked[2 * i:2 * i + 2] - t_new[:, None]
        for j in range(p2):
            vp = vt[3 * j:3 * j + 3]
            num += mu_t @ vp.T @ r.T @ yc[:, j]
            den += np.trace(vp.T @ rtr @ vp @ phi_t)
        c_new = num / den if den > 0 else pose.scale
        if c_new <= 0:
            c_new = pose.scale
        candidate = CameraPose(r, c_new, t_new)

        phi3 = np.zeros((3, 3))
        cross = np.zeros((2, 3))
        for j in range(p2):
            vp = vt[3 * j:3 * j + 3]
            phi3 += vp @ phi_t @ vp.T
            cross += np.outer(yc[:, j], vp @ mu_t)
        q = complete_rotation(candidate.rotation)
        alpha = np.kron((c_new * c_new * q @ phi3).T, np.eye(2, 3))
        beta = (c_new * cross - c_new * c_new * np.eye(2, 3) @ q @ phi3).ravel(order="F")
        xi = np.linalg.lstsq(alpha, beta, rcond=None)[0].reshape(3, 3, order="F")
        rot = rotation_from_axis_angle(skew_part_vector(xi))
        rotated = CameraPose(project_row_orthonormal(np.eye(2, 3) @ rot @ q),
                             c_new, t_new)
        if (_plain_expected_residual(rotated, vt, mu_t, phi_t, yn)
                <= _plain_expected_residual(candidate, vt, mu_t, phi_t, yn)):
            candidate = rotated
        total += _plain_expected_residual(candidate, vt, mu_t, phi_t, yn)
        new_poses.append(candidate)
    new_model = PlainPpcaModel(mean_shape, bases, model.coeffs, model.noise_var)
    return new_model, new_poses, total
