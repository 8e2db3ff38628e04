import numpy as np
import pytest

from symnrsfm.core import CameraPose, DegenerateInputError
from symnrsfm.evaluation import (
    evaluate,
    full_shapes_from_halves,
    normalize_shape,
    rotation_error,
    shape_error,
)
from symnrsfm.synth import random_rotation

from conftest import make_scene, rot2, rotz


def _full_random_shapes(rng, n=5, p2=12):
    shapes = rng.normal(size=(n, 3, p2))
    return shapes - shapes.mean(axis=2, keepdims=True)


class TestNormalizeShape:
    def test_unit_spread_unchanged(self, rng):
        shape = rng.normal(size=(3, 200))
        shape = (shape - shape.mean(axis=1, keepdims=True))
        shape /= shape.std(axis=1)[:, None]
        np.testing.assert_allclose(normalize_shape(shape), shape, atol=1e-12)

    def test_scale_invariance(self, rng):
        shape = rng.normal(size=(3, 9))
        np.testing.assert_allclose(normalize_shape(7.0 * shape),
                                   normalize_shape(shape), atol=1e-12)

    def test_output_spread_is_three(self, rng):
        shape = rng.normal(size=(3, 11))
        out = normalize_shape(shape)
        assert out.std(axis=1).sum() == pytest.approx(3.0, abs=1e-12)

    def test_coincident_points_rejected(self):
        with pytest.raises(DegenerateInputError):
            normalize_shape(np.ones((3, 4)))


class TestShapeError:
    def test_exact_match_is_zero(self, rng):
        shapes = _full_random_shapes(rng)
        e_s, _ = shape_error(shapes, shapes)
        assert e_s <= 1e-12

    def test_rotated_estimate_is_zero(self, rng):
        shapes = _full_random_shapes(rng)
        rotated = np.einsum("ij,njm->nim", rotz(0.7), shapes)
        e_s, _ = shape_error(rotated, shapes)
        assert e_s <= 1e-10

    def test_axis_rescaling_oracle(self, rng):
        # exact-oracle construction: align ground truth with its principal
        # axes, rescale two axes keeping the std sum fixed; the optimal
        # alignment is then provably the identity rotation plus a
        # least-squares scale, so the expected error has a closed form
        shape = rng.normal(size=(3, 40))
        shape -= shape.mean(axis=1, keepdims=True)
        _, vecs = np.linalg.eigh(shape @ shape.T)
        gt = normalize_shape(vecs.T @ shape)
        sx, sy, _ = gt.std(axis=1)

        def oracle(alpha):
            f, g = 1.0 + alpha, 1.0 - alpha * sx / sy
            est = np.diag([f, g, 1.0]) @ gt
            a, b, c = (gt[0] @ gt[0], gt[1] @ gt[1], gt[2] @ gt[2])
            scale = (a * f + b * g + c) / (a * f * f + b * g * g + c)
            return est, np.linalg.norm(scale * est - gt, axis=0).mean()

        lo, hi = 0.0, 0.5
        for _ in range(200):
            mid = (lo + hi) / 2
            _, val = oracle(mid)
            lo, hi = (mid, hi) if val < 0.1 else (lo, mid)
        est, expected = oracle(lo)
        assert expected == pytest.approx(0.1, abs=1e-9)
        e_s, _ = shape_error(est[None], gt[None])
        assert e_s == pytest.approx(0.1, abs=1e-6)

    def test_invariant_to_rotation_and_scaling_of_estimate(self, rng):
        gt = _full_random_shapes(rng)
        est = gt + 0.05 * rng.normal(size=gt.shape)
        base, _ = shape_error(est, gt)
        moved = 3.7 * np.einsum("ij,njm->nim", rotz(-1.1), est)
        moved_err, _ = shape_error(moved, gt)
        assert moved_err == pytest.approx(base, abs=1e-9)

    def test_mirror_branch_is_gauge(self, rng):
        gt = _full_random_shapes(rng)
        mirrored = np.einsum("ij,njm->nim", np.diag([-1.0, 1.0, 1.0]), gt)
        e_s, _ = shape_error(mirrored, gt)
        assert e_s <= 1e-10


class TestRotationError:
    def _poses(self, rng, n=10):
        return [CameraPose(random_rotation(rng)[:2]) for _ in range(n)]

    def test_exact_match_is_zero(self, rng):
        poses = self._poses(rng)
        e_r, _ = rotation_error(poses, poses)
        assert e_r <= 1e-12

    def test_shared_gauge_removed(self, rng):
        poses = self._poses(rng)
        gauge = random_rotation(rng)
        moved = [CameraPose(p.rotation @ gauge) for p in poses]
        e_r, _ = rotation_error(moved, poses)
        assert e_r <= 1e-10

    def test_independent_rotations_not_removed(self, rng):
        poses = self._poses(rng)
        moved = [CameraPose(p.rotation @ random_rotation(rng)) for p in poses]
        e_r, _ = rotation_error(moved, poses)
        assert e_r > 0.1

    def test_closed_form_perturbation_pair(self, rng):
        # two poses sharing one rotation perturbed by opposite in-plane
        # angles keep the joint gauge exactly at the identity, so the
        # closed form 2 * (2 sqrt(2) sin(theta/2)) / N is exact
        n, theta = 10, np.deg2rad(10)
        rotations = [random_rotation(rng) for _ in range(n)]
        rotations[9] = rotations[8]
        gt = [CameraPose(q[:2]) for q in rotations]
        est = [CameraPose(q[:2]) for q in rotations]
        est[8] = CameraPose(rot2(theta) @ rotations[8][:2])
        est[9] = CameraPose(rot2(-theta) @ rotations[9][:2])
        expected = 2.0 * (2.0 * np.sqrt(2.0) * np.sin(theta / 2.0)) / n
        e_r, _ = rotation_error(est, gt)
        assert e_r == pytest.approx(expected, abs=1e-6)

    def test_single_perturbed_pose_near_closed_form(self, rng):
        n, theta = 10, np.deg2rad(10)
        gt = self._poses(rng, n)
        est = list(gt)
        est[3] = CameraPose(rot2(theta) @ gt[3].rotation)
        closed = 2.0 * np.sqrt(2.0) * np.sin(theta / 2.0) / n
        e_r, _ = rotation_error(est, gt)
        assert 0.5 * closed <= e_r <= 2.0 * closed

    def test_mirror_twin_is_gauge(self, rng):
        poses = self._poses(rng)
        refl = np.diag([-1.0, 1.0, 1.0])
        twisted = [CameraPose(p.rotation @ refl) for p in poses]
        e_r, _ = rotation_error(twisted, poses)
        assert e_r <= 1e-10


class TestEvaluate:
    def test_grouped_report(self, rng):
        gt = _full_random_shapes(rng, n=6)
        poses = [CameraPose(random_rotation(rng)[:2]) for _ in range(6)]
        groups = ["a", "a", "b", "b", "b", "a"]
        report = evaluate(gt, poses, gt, poses, groups=groups)
        assert set(report.groups) == {"a", "b"}
        assert report.e_r_mean <= 1e-12
        for label in report.groups:
            assert report.e_s_mean[label] <= 1e-12
            assert report.e_s_median[label] <= 1e-12
        assert len(report.per_image_shape_error) == 6

    def test_median_between_extremes(self, rng):
        gt = _full_random_shapes(rng, n=5)
        est = gt + 0.1 * rng.normal(size=gt.shape)
        poses = [CameraPose(random_rotation(rng)[:2]) for _ in range(5)]
        report = evaluate(est, poses, gt, poses)
        errors = np.array(report.per_image_shape_error)
        assert errors.min() <= report.e_s_median["all"] <= errors.max()
