import numpy as np
import pytest

from app.errors import GeometryError, ShapeError
from app.tensorcore import Tensor
from app.vision.keypoints import KeypointSet, pixel_centers
from app.vision.motion import (
    DeformationGrid,
    MotionModel,
    ThinPlateSpline,
    deform_features,
    estimate_grid,
    fit_affine,
)

AFFINE = np.array([[0.05, -0.02], [0.9, 0.1], [-0.05, 1.1]])


def affine(points):
    return np.hstack([np.ones((len(points), 1)), points]) @ AFFINE


class TestThinPlateSpline:
    @pytest.mark.parametrize("regularization", [0.0, 1e-3])
    def test_reproduces_affine_maps(self, rng, regularization):
        controls = rng.uniform(-1, 1, size=(12, 2))
        spline = ThinPlateSpline(controls, affine(controls), regularization)
        queries = rng.uniform(-1, 1, size=(50, 2))
        np.testing.assert_allclose(spline(queries), affine(queries), atol=1e-9)

    def test_interpolates_without_regularization(self, rng):
        controls = rng.uniform(-1, 1, size=(10, 2))
        values = rng.uniform(-1, 1, size=(10, 2))
        np.testing.assert_allclose(ThinPlateSpline(controls, values)(controls), values, atol=1e-9)

    def test_duplicate_controls_are_merged(self, rng):
        controls = rng.uniform(-1, 1, size=(6, 2))
        controls = np.vstack([controls, controls[:1]])
        values = affine(controls)
        spline = ThinPlateSpline(controls, values)
        assert len(spline.controls) == 6

    def test_collinear_controls(self):
        line = np.stack([np.linspace(0, 1, 5), np.zeros(5)], axis=1)
        with pytest.raises(GeometryError):
            ThinPlateSpline(line, line)

    def test_fit_affine(self, rng):
        controls = rng.uniform(-1, 1, size=(8, 2))
        np.testing.assert_allclose(fit_affine(controls, affine(controls)), AFFINE, atol=1e-12)

    def test_smoothing_pulls_towards_best_affine_fit(self, rng):
        for _ in range(5):
            controls = rng.uniform(-1, 1, size=(12, 2))
            values = controls + rng.normal(scale=0.1, size=(12, 2))
            best = np.hstack([np.ones((12, 1)), controls]) @ fit_affine(controls, values)
            deviations = [
                float(np.linalg.norm(ThinPlateSpline(controls, values, lam)(controls) - best))
                for lam in (0.0, 1e-3, 1e-2, 0.1, 1.0, 10.0, 1e4)
            ]
            assert deviations[0] > 0.1
            assert all(b <= a + 1e-9 for a, b in zip(deviations, deviations[1:]))
            assert deviations[-1] < 0.05 * deviations[0]


class TestEstimateGrid:
    def test_equal_keypoints_give_identity(self, neutral):
        grid = estimate_grid(MotionModel(), neutral, neutral.copy(), (8, 8))
        assert grid.identity
        np.testing.assert_array_equal(grid.grid, pixel_centers(8, 8))

    @pytest.mark.parametrize("kernel", ["thin-plate-spline", "per-triangle-affine"])
    def test_affine_motion_is_exact(self, neutral, kernel):
        src = KeypointSet(affine(neutral.points))
        grid = estimate_grid(MotionModel(kernel, 1e-3), src, neutral, (16, 16))
        assert not grid.identity
        expected = affine(pixel_centers(16, 16).reshape(-1, 2)).reshape(16, 16, 2)
        np.testing.assert_allclose(grid.grid, expected, atol=1e-8)

    def test_unknown_kernel(self):
        with pytest.raises(ValueError):
            MotionModel("optical-flow")
        with pytest.raises(ValueError):
            MotionModel(regularization=-1.0)


class TestDeformFeatures:
    def test_identity_grid_returns_input(self, rng):
        features = Tensor(rng.normal(size=(3, 6, 6)))
        assert deform_features(features, DeformationGrid.identity_grid((6, 6))) is features

    def test_resolution_mismatch(self, rng):
        with pytest.raises(ShapeError):
            deform_features(Tensor(rng.normal(size=(3, 6, 6))), DeformationGrid.identity_grid((4, 4)))

    def test_shifted_grid_samples_neighbours(self):
        ramp = Tensor(np.tile(np.arange(5.0), (5, 1))[None], dtype=np.float64)
        grid = pixel_centers(5, 5)
        grid[..., 0] += 0.5
        out = deform_features(ramp, DeformationGrid(grid)).data
        np.testing.assert_allclose(out[0, :, :4], ramp.data[0, :, 1:])
        np.testing.assert_allclose(out[0, :, 4], 4.0)

    def test_deforming_back_with_inverse_grid_restores_features(self, neutral):
        pts = neutral.points
        moved = KeypointSet(pts + 0.03 * np.stack([np.sin(3 * pts[:, 1]), np.cos(3 * pts[:, 0])], axis=1))
        centers = pixel_centers(32, 32)
        smooth = Tensor((np.sin(1.5 * centers[..., 0]) + np.cos(2.0 * centers[..., 1]))[None], dtype=np.float64)
        model = MotionModel(regularization=0.0)
        there = deform_features(smooth, estimate_grid(model, neutral, moved, (32, 32)))
        back = deform_features(there, estimate_grid(model, moved, neutral, (32, 32))).data
        interior = (slice(None), slice(8, 24), slice(8, 24))
        assert np.abs(there.data - smooth.data)[interior].max() > 1e-2
        np.testing.assert_allclose(back[interior], smooth.data[interior], atol=1e-2)
