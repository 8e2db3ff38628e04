import numpy as np
import pytest

from symnrsfm.core import IllPosedError, InfeasibleError, SymmetryOp
from symnrsfm.numerics import (
    GramSolution,
    SolverConfig,
    complete_rotation,
    nuclear_min_structure,
    nullspace,
    procrustes_rotation,
    project_row_orthonormal,
    psd_rank_feasible_point,
    rotation_from_axis_angle,
    solve_gram_sdp,
    truncated_factorization,
)
from symnrsfm.priorfree import (
    build_orthonormality_system,
    camera_conditioning,
    decouple,
    factorize_decoupled,
    recover_cameras,
)
from symnrsfm.core import center_observations, rearrange_compact
from symnrsfm.evaluation import rotation_error, shape_error, full_shapes_from_halves
from symnrsfm.synth import random_rotation

from conftest import REFLECT, make_scene, rotz


class TestTruncatedFactorization:
    def test_rank_one_outer_product(self, rng):
        u, v = rng.normal(size=6), rng.normal(size=4)
        a, b, residual = truncated_factorization(np.outer(u, v), 1)
        assert residual <= 1e-12
        np.testing.assert_allclose(a @ b, np.outer(u, v), atol=1e-12)

    def test_identity_full_rank(self):
        a, b, residual = truncated_factorization(np.eye(3), 3)
        np.testing.assert_allclose(a @ b, np.eye(3), atol=1e-12)
        assert residual <= 1e-12

    def test_residual_matches_svd_tail_oracle(self, rng):
        mat = rng.normal(size=(6, 5))
        sv = np.linalg.svd(mat, compute_uv=False)
        expected = np.sqrt((sv[2:] ** 2).sum())
        _, _, residual = truncated_factorization(mat, 2)
        assert residual == pytest.approx(expected, abs=1e-10)

    def test_residual_non_increasing_in_rank(self, rng):
        mat = rng.normal(size=(7, 6))
        residuals = [truncated_factorization(mat, r)[2] for r in range(1, 7)]
        assert all(residuals[i + 1] <= residuals[i] + 1e-12 for i in range(5))

    def test_rank_too_large(self):
        with pytest.raises(ValueError):
            truncated_factorization(np.eye(3), 4)


class TestNullspace:
    def test_single_row(self):
        basis = nullspace(np.array([[1.0, 0.0]]))
        assert basis.shape == (2, 1)
        np.testing.assert_allclose(np.abs(basis[:, 0]), [0.0, 1.0], atol=1e-14)

    def test_full_rank_square(self, rng):
        mat = rng.normal(size=(4, 4)) + 4 * np.eye(4)
        assert nullspace(mat).shape == (4, 0)

    def test_orthonormal_columns_annihilated(self, rng):
        mat = rng.normal(size=(3, 6))
        basis = nullspace(mat)
        assert basis.shape == (6, 3)
        np.testing.assert_allclose(basis.T @ basis, np.eye(3), atol=1e-12)
        assert np.linalg.norm(mat @ basis) <= 1e-10 * np.linalg.norm(mat)

    def test_ambiguity_system_dimension_matches_counting_oracle(self):
        # oracle: count singular values below tolerance on a clean system
        obs, _, _ = make_scene(n_images=20, n_pairs=8, n_bases=2, seed=0)
        obs, _ = center_observations(obs)
        pair = factorize_decoupled(*decouple(obs), 2)
        system = build_orthonormality_system(pair)
        sv = np.linalg.svd(system, compute_uv=False)
        oracle_dim = system.shape[1] - int(np.sum(sv > 1e-6 * sv[0]))
        assert oracle_dim == 8  # 3K^2 - 2K at K = 2, frozen from the oracle
        assert nullspace(system, tol=1e-6).shape[1] == oracle_dim


class TestProcrustes:
    def test_recovers_known_rotation(self, rng):
        shape = rng.normal(size=(3, 7))
        rot = rotz(np.deg2rad(30))
        recovered = procrustes_rotation(shape, rot @ shape)
        np.testing.assert_allclose(recovered, rot, atol=1e-10)

    def test_identity_for_equal_inputs(self, rng):
        shape = rng.normal(size=(3, 5))
        np.testing.assert_allclose(procrustes_rotation(shape, shape), np.eye(3),
                                   atol=1e-12)

    def test_beats_random_rotations(self, rng):
        est = rng.normal(size=(3, 9))
        gt = rotz(0.4) @ est + 0.05 * rng.normal(size=(3, 9))
        best = procrustes_rotation(est, gt)
        best_residual = np.linalg.norm(best @ est - gt)
        for _ in range(1000):
            rot = random_rotation(rng)
            assert best_residual <= np.linalg.norm(rot @ est - gt) + 1e-12

    def test_always_proper_and_orthonormal(self, rng):
        for _ in range(20):
            est = rng.normal(size=(3, 6))
            gt = rng.normal(size=(3, 6))
            rot = procrustes_rotation(est, gt)
            np.testing.assert_allclose(rot @ rot.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-12)

    def test_degenerate_points_rejected(self):
        line = np.vstack([np.arange(5.0), np.zeros(5), np.zeros(5)])
        with pytest.raises(IllPosedError):
            procrustes_rotation(line, line)


class TestProjectRowOrthonormal:
    def test_orthonormal_input_unchanged(self, rng):
        rows = random_rotation(rng)[:2]
        np.testing.assert_allclose(project_row_orthonormal(rows), rows, atol=1e-14)

    def test_scaled_rows_recovered(self, rng):
        rows = random_rotation(rng)[:2]
        np.testing.assert_allclose(project_row_orthonormal(2.0 * rows), rows,
                                   atol=1e-12)

    def test_nearest_among_random_candidates(self, rng):
        rows = random_rotation(rng)[:2] + 0.1 * rng.normal(size=(2, 3))
        projected = project_row_orthonormal(rows)
        best = np.linalg.norm(projected - rows)
        for _ in range(1000):
            cand = random_rotation(rng)[:2]
            assert best <= np.linalg.norm(cand - rows) + 1e-12

    def test_rank_deficient_rejected(self):
        with pytest.raises(IllPosedError):
            project_row_orthonormal(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))


class TestRotationHelpers:
    def test_complete_rotation_proper(self, rng):
        rows = random_rotation(rng)[:2]
        q = complete_rotation(rows)
        np.testing.assert_allclose(q @ q.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(q) == pytest.approx(1.0, abs=1e-12)

    def test_axis_angle_matches_small_angle_expansion(self):
        w = np.array([1e-8, -2e-8, 3e-8])
        skew = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        np.testing.assert_allclose(rotation_from_axis_angle(w), np.eye(3) + skew,
                                   atol=1e-15)


def _gram_truth(pair, k):
    """Ground-truth Gram pair for a clean scene: pick the first basis column."""
    system = build_orthonormality_system(pair)
    gram = solve_gram_sdp(system, k, conditioning=camera_conditioning(pair))
    return system, gram


class TestSolveGramSdp:
    def test_rigid_scene_cameras_recovered(self):
        obs, poses_gt, _ = make_scene(n_bases=1, deform=0.0, seed=5)
        obs, _ = center_observations(obs)
        pair = factorize_decoupled(*decouple(obs), 1)
        system, gram = _gram_truth(pair, 1)
        poses = recover_cameras(pair, gram)
        e_r, _ = rotation_error(poses, poses_gt)
        assert e_r <= 1e-3

    def test_zero_system_returns_normalized_feasible_pair(self):
        gram = solve_gram_sdp(np.zeros((6, 5)), 1)
        vec = np.concatenate([gram.gram_axis.ravel(), gram.gram_plane.ravel()])
        assert np.linalg.norm(np.zeros((6, 5)) @ vec) == 0.0
        assert gram.residual <= 1e-10

    def test_recovers_hand_built_null_space(self, rng):
        k = 2
        h1 = rng.normal(size=k)
        h2 = rng.normal(size=(2 * k, 2))
        truth = np.concatenate([np.outer(h1, h1).ravel(), (h2 @ h2.T).ravel()])
        unit = truth / np.linalg.norm(truth)
        rows = rng.normal(size=(30, truth.size))
        rows -= np.outer(rows @ unit, unit)
        gram = solve_gram_sdp(rows, k, n_restarts=16)
        got = np.concatenate([gram.gram_axis.ravel(), gram.gram_plane.ravel()])
        scale = got @ unit
        np.testing.assert_allclose(got, scale * unit, atol=1e-6 * abs(scale))

    def test_psd_and_rank_invariants(self):
        obs, _, _ = make_scene(n_bases=2, seed=1)
        obs, _ = center_observations(obs)
        pair = factorize_decoupled(*decouple(obs), 2)
        system, gram = _gram_truth(pair, 2)
        for block, rank in ((gram.gram_axis, 1), (gram.gram_plane, 2)):
            eigvals = np.linalg.eigvalsh(block)
            assert eigvals.min() >= -1e-8
            assert eigvals[::-1][rank] <= 1e-6 * max(eigvals.max(), 1e-300)
        vec = np.concatenate([gram.gram_axis.ravel(), gram.gram_plane.ravel()])
        norm = 1.0 + np.linalg.norm(system)
        assert np.linalg.norm(system @ vec) <= 1e-6 * norm

    def test_empty_null_space_is_infeasible(self, rng):
        rows = rng.normal(size=(40, 5))
        with pytest.raises(InfeasibleError):
            psd_rank_feasible_point(rows, dims=(1, 2), ranks=(1, 2), n_restarts=2)


class TestNuclearMinStructure:
    def test_noiseless_scene_recovered(self):
        obs, poses_gt, gt = make_scene(n_images=10, n_pairs=8, n_bases=2, seed=2)
        obs, _ = center_observations(obs)
        result = nuclear_min_structure(obs.y, obs.y_mirror, poses_gt)
        est = full_shapes_from_halves(result.shapes)
        gt_full = full_shapes_from_halves(gt.shapes)
        e_s, _ = shape_error(est, gt_full)
        assert e_s <= 1e-2

    def test_rigid_input_gives_rank_one_compact_form(self):
        obs, poses_gt, _ = make_scene(n_bases=1, deform=0.0, seed=4)
        obs, _ = center_observations(obs)
        result = nuclear_min_structure(obs.y, obs.y_mirror, poses_gt)
        sv = np.linalg.svd(rearrange_compact(result.shapes), compute_uv=False)
        assert sv[1] <= 1e-6 * sv[0]

    def test_zero_observations_give_zero_shapes(self):
        from symnrsfm.core import CameraPose
        poses = [CameraPose(np.eye(2, 3)) for _ in range(3)]
        result = nuclear_min_structure(np.zeros((6, 5)), np.zeros((6, 5)), poses)
        np.testing.assert_allclose(result.shapes, 0.0, atol=1e-12)

    def test_residual_and_monotone_objective(self):
        obs, poses_gt, _ = make_scene(n_images=8, n_pairs=6, n_bases=2, seed=6)
        obs, _ = center_observations(obs)
        result = nuclear_min_structure(obs.y, obs.y_mirror, poses_gt)
        data_norm = np.sqrt(np.linalg.norm(obs.y) ** 2
                            + np.linalg.norm(obs.y_mirror) ** 2)
        assert result.residual <= 1e-6 * data_norm
        trace = result.objective_trace
        assert all(trace[i + 1] <= trace[i] + 1e-9 * max(abs(trace[i]), 1.0)
                   for i in range(len(trace) - 1))
