"""Reusable numerical kernels: truncated factorization, null spaces,
Procrustes alignment, the Gram-block feasibility solve and the
affine-constrained nuclear-norm structure solver."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    IllPosedError,
    InfeasibleError,
    SymmetryOp,
    rearrange_compact,
    restore_stacked,
)


def masked_low_rank_factorization(mat: np.ndarray, mask: np.ndarray, rank: int,
                                  init: np.ndarray | None = None,
                                  iters: int = 60):
    """Rank-r factorization fitted to the visible entries only.

    Alternating per-column and per-row least squares from an SVD warm start
    of ``init`` (the mask-filled matrix by default). Rows or columns with
    fewer visible entries than the rank keep their warm-start values.
    Returns ``(left, right, residual)`` with the residual measured on the
    visible entries.
    """
    mat = np.asarray(mat, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return truncated_factorization(mat, rank)
    base = np.where(mask, mat, 0.0) if init is None else np.asarray(init, float)
    u, s, vt = np.linalg.svd(base, full_matrices=False)
    left = u[:, :rank] * np.sqrt(s[:rank])
    right = np.sqrt(s[:rank])[:, None] * vt[:rank]
    for _ in range(iters):
        for j in range(mat.shape[1]):
            m = mask[:, j]
            if m.sum() >= rank:
                right[:, j] = np.linalg.lstsq(left[m], mat[m, j], rcond=None)[0]
        for i in range(mat.shape[0]):
            m = mask[i]
            if m.sum() >= rank:
                left[i] = np.linalg.lstsq(right[:, m].T, mat[i, m], rcond=None)[0]
    residual = float(np.linalg.norm((mat - left @ right)[mask]))
    return left, right, residual


def truncated_factorization(mat: np.ndarray, rank: int):
    """Best rank-r factorization of ``mat`` in the Frobenius sense.

    Returns ``(A, B, residual)`` with ``A = U_r sqrt(S_r)``,
    ``B = sqrt(S_r) V_r^T`` (balanced split) and
    ``residual = ||mat - A B||_F``.
    """
    mat = np.asarray(mat, dtype=float)
    if rank > min(mat.shape):
        raise ValueError(f"rank {rank} exceeds min(m, p) = {min(mat.shape)}")
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    root = np.sqrt(s[:rank])
    a = u[:, :rank] * root
    b = root[:, None] * vt[:rank]
    residual = float(np.sqrt(max(0.0, (s[rank:] ** 2).sum())))
    return a, b, residual


def nullspace(mat: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the (numerical) null space of ``mat``.

    A direction counts as null when its singular value is at most
    ``tol`` times the largest one.
    """
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    u, s, vt = np.linalg.svd(mat, full_matrices=True)
    if s.size == 0:
        return np.eye(mat.shape[1])
    rank = int(np.sum(s > tol * s[0]))
    return vt[rank:].T


def procrustes_rotation(s_est: np.ndarray, s_gt: np.ndarray) -> np.ndarray:
    """Proper rotation minimizing ||Rot @ s_est - s_gt||_F.

    Both point sets must be centered; degenerate (rank < 2) sets are
    rejected because the minimizer is then not unique.
    """
    s_est = np.asarray(s_est, dtype=float)
    s_gt = np.asarray(s_gt, dtype=float)
    if s_est.shape != s_gt.shape or s_est.shape[0] != 3:
        raise ValueError("point sets must both be (3, P)")
    if s_est.shape[1] < 3:
        raise IllPosedError("need at least 3 points to align")
    for pts in (s_est, s_gt):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[1] <= 1e-12 * max(sv[0], 1e-300):
            raise IllPosedError("degenerate point set, rank < 2")
    return _polar_rotation(s_gt @ s_est.T)


def _polar_rotation(cross_cov: np.ndarray) -> np.ndarray:
    """Closest proper rotation to a 3x3 cross-covariance (det forced to +1)."""
    u, _, vt = np.linalg.svd(cross_cov)
    d = np.sign(np.linalg.det(u @ vt))
    return (u * np.array([1.0, 1.0, d])) @ vt


def project_row_orthonormal(mat: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal rows (polar factor of a 2x3)."""
    mat = np.asarray(mat, dtype=float)
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    if s[-1] <= 1e-12 * max(s[0], 1e-300):
        raise IllPosedError("rank-deficient projection cannot be orthonormalized")
    return u @ vt


def complete_rotation(rows: np.ndarray) -> np.ndarray:
    """Complete a row-orthonormal 2x3 to a proper rotation via cross product."""
    rows = np.asarray(rows, dtype=float)
    third = np.cross(rows[0], rows[1])
    return np.vstack([rows, third])


def rotation_from_axis_angle(w: np.ndarray) -> np.ndarray:
    """Exact matrix exponential of the skew matrix built from a 3-vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    if theta < 1e-300:
        return np.eye(3)
    k = w / theta
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)


def skew_part_vector(xi: np.ndarray) -> np.ndarray:
    """Axis-angle vector of the antisymmetric part of a 3x3 increment."""
    a = (xi - xi.T) / 2.0
    return np.array([a[2, 1], a[0, 2], a[1, 0]])


# ---------------------------------------------------------------------------
# Gram-block feasibility solve
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GramSolution:
    """PSD Gram blocks of the factorization-ambiguity correction and their
    rank-1 / rank-2 factors."""

    gram_axis: np.ndarray
    gram_plane: np.ndarray
    axis_factor: np.ndarray
    plane_factor: np.ndarray
    residual: float


def _sym_basis(dim: int):
    """Index pairs of the upper triangle, row-major."""
    return [(i, j) for i in range(dim) for j in range(i, dim)]


def _sym_to_vec(mats, dims):
    out = []
    for mat, dim in zip(mats, dims):
        for i, j in _sym_basis(dim):
            out.append(mat[i, j])
    return np.array(out)


def _vec_to_sym(x, dims):
    mats = []
    pos = 0
    for dim in dims:
        mat = np.zeros((dim, dim))
        for i, j in _sym_basis(dim):
            mat[i, j] = mat[j, i] = x[pos]
            pos += 1
        mats.append(mat)
    return mats


def _duplication(dim: int) -> np.ndarray:
    """Maps the upper-triangle parameterization to the full row-major vec."""
    cols = []
    for i, j in _sym_basis(dim):
        e = np.zeros((dim, dim))
        e[i, j] = e[j, i] = 1.0
        cols.append(e.ravel())
    return np.array(cols).T


def psd_rank_projection(mat: np.ndarray, rank: int) -> np.ndarray:
    """Nearest PSD matrix of rank at most ``rank`` (eigenvalue truncation)."""
    sym = (mat + mat.T) / 2.0
    w, u = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    if rank < w.size:
        w[: w.size - rank] = 0.0
    return (u * w) @ u.T


def _factor_psd(mat: np.ndarray, rank: int) -> np.ndarray:
    w, u = np.linalg.eigh((mat + mat.T) / 2.0)
    w = np.clip(w[::-1][:rank], 0.0, None)
    u = u[:, ::-1][:, :rank]
    return u * np.sqrt(w)


def _quadratic_residual(system: np.ndarray, factors, dims):
    grams = [f @ f.T for f in factors]
    return system @ np.concatenate([g.ravel() for g in grams])


def _gauss_newton_polish(system, factors, dims, iters=80):
    """Levenberg-Marquardt refinement of the factors (h1, h2, ...) so the
    quadratic constraints system @ vec(h h^T) = 0 hold to machine precision,
    under a unit-norm gauge."""
    shapes = [f.shape for f in factors]
    sizes = [f.size for f in factors]

    def unpack(x):
        out, pos = [], 0
        for shp, size in zip(shapes, sizes):
            out.append(x[pos:pos + size].reshape(shp))
            pos += size
        return out

    x = np.concatenate([f.ravel() for f in factors])
    norm = np.linalg.norm(x)
    if norm < 1e-300:
        return factors, np.inf
    x = x / norm
    r = _quadratic_residual(system, unpack(x), dims)
    cost = float(r @ r)
    lam = 1e-8
    for _ in range(iters):
        jac = np.zeros((r.size, x.size))
        eps = 1e-7
        for i in range(x.size):
            xp = x.copy()
            xp[i] += eps
            jac[:, i] = (_quadratic_residual(system, unpack(xp), dims) - r) / eps
        try:
            step = np.linalg.solve(jac.T @ jac + lam * np.eye(x.size), -jac.T @ r)
        except np.linalg.LinAlgError:
            break
        xn = x + step
        xn /= np.linalg.norm(xn)
        rn = _quadratic_residual(system, unpack(xn), dims)
        cn = float(rn @ rn)
        if cn < cost:
            x, r, cost = xn, rn, cn
            lam = max(lam * 0.3, 1e-12)
        else:
            lam *= 10.0
        if cost < 1e-30:
            break
    return unpack(x), float(np.sqrt(cost))


def psd_rank_feasible_point(system: np.ndarray, dims, ranks, seed=0,
                            n_restarts=10, ap_iters=200, tol=1e-8,
                            score_factors=None, strict=True):
    """Find symmetric PSD blocks of prescribed ranks in the null space of an
    affine system, normalized to unit total trace.

    ``system`` maps the concatenated row-major vecs of the blocks to the
    constraint values. Alternating projections between the affine set and
    the PSD rank-constrained product give a warm start; a local quadratic
    refinement of the factors drives the residual to machine precision.
    Among feasible candidates the one with the best ``score_factors`` value
    is kept (defaults to the refinement residual).

    When ``strict`` and no candidate comes close to the null space relative
    to the system's spectral norm, an empty null space is diagnosed and
    InfeasibleError raised; with ``strict=False`` the best effort is
    returned regardless.
    """
    dims = list(dims)
    ranks = list(ranks)
    dup = _block_duplication(dims)
    reduced = system @ dup
    trace_row = _sym_to_vec([np.eye(d) for d in dims], dims)
    constraints = np.vstack([reduced, trace_row[None, :]])
    target = np.zeros(constraints.shape[0])
    target[-1] = 1.0
    pinv = np.linalg.pinv(constraints, rcond=1e-12)
    sys_norm = 1.0 + np.linalg.norm(system)
    spectral = np.linalg.svd(system, compute_uv=False)
    spectral = float(spectral[0]) if spectral.size else 0.0

    rng = np.random.default_rng(seed)
    best = None
    for restart in range(n_restarts):
        if restart == 0:
            mats = [np.eye(d) for d in dims]
        else:
            mats = []
            for d, r in zip(dims, ranks):
                f = rng.normal(size=(d, r))
                mats.append(f @ f.T)
        x = _sym_to_vec(mats, dims)
        for _ in range(ap_iters):
            x = x - pinv @ (constraints @ x - target)
            mats = [psd_rank_projection(m, r) for m, r in zip(_vec_to_sym(x, dims), ranks)]
            x = _sym_to_vec(mats, dims)
        factors = [_factor_psd(m, r) for m, r in zip(mats, ranks)]
        factors, residual = _gauss_newton_polish(system, factors, dims)
        rel = residual / sys_norm
        feasible = rel < tol
        if score_factors is not None and feasible:
            score = score_factors(factors)
        else:
            score = -rel
        key = (feasible, score)
        if best is None or key > best[0]:
            best = (key, factors, rel, residual)
    _, factors, rel, residual = best
    if strict and not best[0][0] and spectral > 0:
        gram_scale = sum(float(np.linalg.norm(f @ f.T)) for f in factors)
        if residual > 0.3 * spectral * max(gram_scale, 1e-300):
            raise InfeasibleError(
                "no PSD rank-constrained point found; the constraint system "
                "has no nontrivial null space")
    return factors, rel


def _block_duplication(dims):
    blocks = [_duplication(d) for d in dims]
    total_rows = sum(d * d for d in dims)
    total_cols = sum(b.shape[1] for b in blocks)
    out = np.zeros((total_rows, total_cols))
    r = c = 0
    for b in blocks:
        out[r:r + b.shape[0], c:c + b.shape[1]] = b
        r += b.shape[0]
        c += b.shape[1]
    return out


def solve_gram_sdp(system: np.ndarray, n_bases: int, seed: int = 0,
                   n_restarts: int = 10, conditioning=None,
                   strict: bool = True) -> GramSolution:
    """Recover the Gram blocks of the ambiguity correction from the stacked
    orthonormality system.

    Minimizing the total trace subject to the affine constraints and the PSD
    cone, with the trace normalized to one to exclude the zero solution,
    reduces to finding a feasible point of the three-subspace intersection;
    the blocks are then truncated to ranks (1, 2) and factored.

    ``conditioning`` optionally scores feasible factor candidates (larger is
    better) so the caller can prefer well-conditioned camera recoveries among
    gauge-equivalent solutions.
    """
    k = n_bases
    if system.shape[1] != 5 * k * k:
        raise ValueError("system must have K^2 + 4K^2 columns")
    factors, rel = psd_rank_feasible_point(
        system, dims=(k, 2 * k), ranks=(1, 2), seed=seed,
        n_restarts=n_restarts, score_factors=conditioning, strict=strict)
    h1 = factors[0][:, 0]
    h2 = factors[1]
    return GramSolution(
        gram_axis=np.outer(h1, h1),
        gram_plane=h2 @ h2.T,
        axis_factor=h1,
        plane_factor=h2,
        residual=rel,
    )


# ---------------------------------------------------------------------------
# Nuclear-norm structure recovery
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 500
    rcond: float = 1e-6


@dataclass(frozen=True)
class NuclearResult:
    shapes: np.ndarray
    residual: float
    objective_trace: tuple
    converged: bool


def _svt(mat: np.ndarray, tau: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(mat, full_matrices=False)
    s = np.maximum(s - tau, 0.0)
    return (u * s) @ vt


def _restricted_lsq_op(block, rcond):
    """Correction operator toward the data on the observable directions of a
    block (directions with singular value below ``rcond`` times the largest
    are left to the low-rank prior)."""
    u, s, vt = np.linalg.svd(block, full_matrices=False)
    keep = s > rcond * max(s[0] if s.size else 0.0, 1e-300)
    return (vt[keep].T * (1.0 / s[keep])) @ u[:, keep].T


def _pattern_groups(mask):
    """Column indices grouped by their row-visibility pattern."""
    groups = {}
    for j in range(mask.shape[1]):
        groups.setdefault(tuple(mask[:, j]), []).append(j)
    return {k: np.array(v) for k, v in groups.items()}


def _nuclear_min(blocks, targets, cfg: SolverConfig, masks=None) -> NuclearResult:
    """min ||S_compact||_* subject to the visible rows of
    block_n @ S_n = target_n.

    Solved by the splitting Z = S_compact with singular-value thresholding
    on Z, exact least-squares projection of Z - U onto the affine data
    constraint for S, and a dual update; the penalty anneals upward so the
    thresholding vanishes at convergence. ``masks`` optionally marks which
    equations carry data; fully unconstrained directions are left to the
    low-rank prior. Stops when both the constraint residual and the
    relative objective change drop below ``cfg.tol``.
    """
    n = len(blocks)
    p = targets[0].shape[1]
    if masks is None:
        masks = [np.ones(t.shape, dtype=bool) for t in targets]
    correctors = []
    for i in range(n):
        groups = []
        for pattern, cols in _pattern_groups(masks[i]).items():
            rows = np.array(pattern)
            if rows.any():
                sub = blocks[i][rows]
                groups.append((rows, cols, _restricted_lsq_op(sub, cfg.rcond), sub))
        correctors.append(groups)

    def correct(stack):
        out = stack.copy()
        for i in range(n):
            rows = slice(3 * i, 3 * i + 3)
            for sel, cols, op, sub in correctors[i]:
                out[rows][:, cols] += op @ (targets[i][np.ix_(sel, cols)]
                                            - sub @ out[rows][:, cols])
        return out

    def residual_of(stack):
        total = 0.0
        for i in range(n):
            diff = targets[i] - blocks[i] @ stack[3 * i:3 * i + 3]
            total += float((diff[masks[i]] ** 2).sum())
        return float(np.sqrt(total))

    data_norm = max(np.sqrt(sum(float((t[m] ** 2).sum())
                                for t, m in zip(targets, masks))), 1e-300)
    shapes = correct(np.zeros((3 * n, p)))
    compact = rearrange_compact(shapes)
    top = float(np.linalg.svd(compact, compute_uv=False)[0]) if compact.size else 0.0
    dual = np.zeros_like(compact)
    rho = 1.0 / max(top, 1e-300)
    objective = float(np.linalg.svd(compact, compute_uv=False).sum())
    trace = [objective]
    converged = False
    for _ in range(cfg.max_iter):
        z = _svt(rearrange_compact(shapes) + dual, 1.0 / rho)
        shapes = correct(restore_stacked(z - dual))
        split = rearrange_compact(shapes) - z
        dual = dual + split
        rho *= 1.02
        new_objective = float(np.linalg.svd(rearrange_compact(shapes),
                                            compute_uv=False).sum())
        trace.append(new_objective)
        rel_change = abs(objective - new_objective) / max(objective, 1e-300)
        objective = new_objective
        split_rel = np.linalg.norm(split) / max(np.linalg.norm(z), 1e-300)
        if max(residual_of(shapes) / data_norm, split_rel, rel_change) <= cfg.tol:
            converged = True
            break
    return NuclearResult(shapes, residual_of(shapes), tuple(trace), converged)


def nuclear_min_structure(y: np.ndarray, y_mirror: np.ndarray, poses,
                          op: SymmetryOp = SymmetryOp(),
                          cfg: SolverConfig = SolverConfig(),
                          visible=None, visible_mirror=None) -> NuclearResult:
    """Recover per-image shapes of minimal compact-form nuclear norm subject
    to both halves reprojecting exactly: [Y, Y'] = R [S, reflect(S)].

    With both halves visible the reflection acts as a virtual second view,
    so generic images determine their shape pointwise; the low-rank prior
    fills the directions a degenerate view or an occlusion leaves
    unobservable (pass the visibility masks to exclude occluded entries).
    Returns the best iterate with a convergence flag when the residual
    tolerance is not reached within ``cfg.max_iter``.
    """
    n = y.shape[0] // 2
    a = op.matrix
    blocks, targets, masks = [], [], []
    for i in range(n):
        r = poses[i].rotation
        blocks.append(np.vstack([r, r @ a]))
        targets.append(np.vstack([y[2 * i:2 * i + 2], y_mirror[2 * i:2 * i + 2]]))
        if visible is None:
            masks.append(np.ones((4, y.shape[1]), dtype=bool))
        else:
            masks.append(np.vstack([np.tile(visible[i], (2, 1)),
                                    np.tile(visible_mirror[i], (2, 1))]))
    return _nuclear_min(blocks, targets, cfg, masks)
