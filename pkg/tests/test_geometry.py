import math

import numpy as np
import pytest

from app.corpus import expression_keypoints
from app.errors import GeometryError, ShapeError
from app.tensorcore import Tensor, bilinear_sample, float64_mode
from app.vision.keypoints import (
    FACE68_VR31,
    KeypointSet,
    distance_tensor,
    get_layout,
    pixel_centers,
    signature_distances,
)
from app.vision.masks import LowerFaceMask, lower_face_mask, scaled_dilation
from app.vision.projection import (
    ProjectionMap,
    Similarity,
    apply_projection,
    construct_driving,
    fit_projection,
    procrustes,
    validate_gaze,
)
from app.vision.triangulation import delaunay_triangulate, hull_mask, warp_psi


class TestLayout:
    def test_partition(self):
        assert FACE68_VR31.n_points == 70
        assert FACE68_VR31.n_vr == 31
        assert set(FACE68_VR31.vr) | set(FACE68_VR31.facial) == set(range(70))
        assert not set(FACE68_VR31.vr) & set(FACE68_VR31.facial)

    def test_pupils_and_eyes_are_facial(self):
        for eye in FACE68_VR31.eyes:
            assert eye.pupil in FACE68_VR31.facial
            assert eye.outer_corner in FACE68_VR31.facial

    def test_unknown_layout(self):
        with pytest.raises(GeometryError):
            get_layout("face5")

    def test_keypoint_shape_checked(self):
        with pytest.raises(ShapeError):
            KeypointSet(np.zeros((68, 2)))

    def test_non_finite_rejected(self):
        pts = np.zeros((70, 2))
        pts[3, 0] = np.nan
        with pytest.raises(GeometryError):
            KeypointSet(pts)

    def test_with_vr_replaces_only_vr(self, neutral):
        moved = neutral.with_vr(neutral.vr() + 0.1)
        facial = list(FACE68_VR31.facial)
        np.testing.assert_array_equal(moved.points[facial], neutral.points[facial])
        np.testing.assert_allclose(moved.vr(), neutral.vr() + 0.1)


class TestDistanceTensor:
    def test_translation_and_scale_invariant(self, neutral):
        base = distance_tensor(neutral)
        moved = distance_tensor(neutral.vr() * 2.5 + np.array([0.3, -0.7]))
        np.testing.assert_allclose(moved.values, base.values, atol=1e-12)

    def test_antisymmetric_and_bounded(self, open_mouth):
        d = distance_tensor(open_mouth).values
        np.testing.assert_allclose(d, -d.transpose(1, 0, 2))
        norms = np.linalg.norm(d, axis=-1)
        assert norms.max() == pytest.approx(1.0)
        np.testing.assert_array_equal(np.diagonal(norms), np.zeros(31))

    def test_coincident_points_give_zeros(self):
        d = distance_tensor(np.ones((5, 2)))
        np.testing.assert_array_equal(d.values, np.zeros((5, 5, 2)))

    def test_needs_two_points(self):
        with pytest.raises(GeometryError):
            distance_tensor(np.zeros((1, 2)))

    def test_distance_separates_expressions(self, neutral, open_mouth):
        a, b = distance_tensor(neutral), distance_tensor(open_mouth)
        assert a.distance(a) == 0.0
        assert a.distance(b) > 0.0
        table = np.stack([a.flatten(), b.flatten()])
        np.testing.assert_allclose(signature_distances(b, table), [a.distance(b), 0.0], atol=1e-12)


class TestSimilarity:
    def test_quarter_turn(self):
        assert math.isclose(Similarity(1.0, math.pi / 2).apply(np.array([[1.0, 0.0]]))[0, 1], 1.0)

    def test_inverse(self, rng):
        s = Similarity(1.7, 0.4, (0.2, -0.1))
        pts = rng.normal(size=(10, 2))
        np.testing.assert_allclose(s.inverse().apply(s.apply(pts)), pts, atol=1e-12)

    def test_procrustes_recovers_transform(self, rng):
        src = rng.normal(size=(20, 2))
        truth = Similarity(0.8, -0.3, (0.05, 0.4))
        fit = procrustes(src, truth.apply(src))
        assert fit.scale == pytest.approx(0.8)
        assert fit.rotation == pytest.approx(-0.3)
        np.testing.assert_allclose(fit.translation, truth.translation, atol=1e-12)

    def test_procrustes_degenerate(self):
        with pytest.raises(GeometryError):
            procrustes(np.zeros((4, 2)), np.ones((4, 2)))


class TestProjection:
    def test_recovers_headset_similarity(self, neutral):
        truth = Similarity(0.7, 0.0, (0.1, -0.5))
        faces = [expression_keypoints(neutral, o, s) for o, s in ((0.0, 0.0), (0.5, 0.0), (1.0, 0.0), (0.3, 1.0))]
        mouth = [truth.inverse().apply(f.vr()) for f in faces]
        projection = fit_projection(mouth, faces)
        assert projection.similarity.scale == pytest.approx(0.7)
        np.testing.assert_allclose(projection.residuals, 0.0, atol=1e-9)
        for m, f in zip(mouth, faces):
            np.testing.assert_allclose(apply_projection(projection, m), f.vr(), atol=1e-9)

    def test_single_pair_is_reproduced_exactly(self, open_mouth, rng):
        mouth = open_mouth.vr() * 1.4 + rng.normal(scale=0.01, size=(31, 2))
        projection = fit_projection([mouth], [open_mouth])
        np.testing.assert_allclose(apply_projection(projection, mouth), open_mouth.vr(), atol=1e-12)

    def test_empty_sequences(self, neutral):
        with pytest.raises(GeometryError):
            fit_projection([], [neutral])

    def test_layout_mismatch(self, neutral):
        with pytest.raises(ShapeError):
            apply_projection(ProjectionMap.identity(31), np.zeros((20, 2)))
        with pytest.raises(ShapeError):
            fit_projection([np.zeros((20, 2))], [neutral])

    def test_dict_round_trip(self, rng):
        projection = ProjectionMap(Similarity(1.1, 0.2, (0.3, 0.4)), rng.normal(size=(31, 2)))
        again = ProjectionMap.from_dict(projection.to_dict())
        assert again.similarity == projection.similarity
        np.testing.assert_array_equal(again.residuals, projection.residuals)


class TestDriving:
    def test_neutral_gaze_keeps_facial_keypoints(self, neutral, open_mouth):
        driving = construct_driving(neutral, open_mouth.vr(), ProjectionMap.identity(31))
        facial = list(FACE68_VR31.facial)
        np.testing.assert_allclose(driving.points[facial], neutral.points[facial], atol=1e-12)
        np.testing.assert_array_equal(driving.vr(), open_mouth.vr())

    def test_pupils_follow_gaze(self, neutral):
        driving = construct_driving(neutral, neutral.vr(), ProjectionMap.identity(31), gaze=(1.0, -0.5, 1.0),
                                    eye_radius=0.05)
        for eye in FACE68_VR31.eyes:
            center = (neutral.points[eye.outer_corner] + neutral.points[eye.inner_corner]) / 2
            np.testing.assert_allclose(driving.points[eye.pupil], center + [0.05, -0.025])

    def test_closed_eyes_collapse_lids(self, neutral):
        driving = construct_driving(neutral, neutral.vr(), ProjectionMap.identity(31), gaze=(0.0, 0.0, 0.0))
        for eye in FACE68_VR31.eyes:
            for up, lo in zip(eye.upper, eye.lower):
                np.testing.assert_allclose(driving.points[up], driving.points[lo])

    @pytest.mark.parametrize("gaze", [(1.5, 0.0, 1.0), (0.0, 0.0, 1.2), (0.0, 0.0)])
    def test_invalid_gaze(self, gaze):
        with pytest.raises(GeometryError):
            validate_gaze(gaze)

    def test_driving_pupils_are_input_independent_for_vr(self, neutral, open_mouth):
        a = construct_driving(neutral, neutral.vr(), ProjectionMap.identity(31))
        b = construct_driving(neutral, open_mouth.vr(), ProjectionMap.identity(31))
        for eye in FACE68_VR31.eyes:
            np.testing.assert_array_equal(a.points[eye.pupil], b.points[eye.pupil])


def circumcircle(a, b, c):
    d = 2 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    ux = ((a @ a) * (b[1] - c[1]) + (b @ b) * (c[1] - a[1]) + (c @ c) * (a[1] - b[1])) / d
    uy = ((a @ a) * (c[0] - b[0]) + (b @ b) * (a[0] - c[0]) + (c @ c) * (b[0] - a[0])) / d
    center = np.array([ux, uy])
    return center, float(np.linalg.norm(a - center))


class TestTriangulation:
    def test_empty_circumcircles(self, open_mouth):
        tri = delaunay_triangulate(open_mouth)
        pts = tri.points
        for t in tri.triangles:
            center, radius = circumcircle(*pts[t])
            others = np.delete(pts, t, axis=0)
            assert np.all(np.linalg.norm(others - center, axis=1) >= radius - 1e-9)

    def test_random_point_sets_are_delaunay(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            pts = rng.uniform(-1, 1, size=(int(rng.integers(3, 31)), 2))
            tri = delaunay_triangulate(pts)
            assert len(tri.triangles) > 0
            for t in tri.triangles:
                center, radius = circumcircle(*tri.points[t])
                others = np.delete(tri.points, t, axis=0)
                assert np.all(np.linalg.norm(others - center, axis=1) >= radius * (1 - 1e-9) - 1e-12)

    def test_collinear_rejected(self):
        with pytest.raises(GeometryError):
            delaunay_triangulate(np.stack([np.linspace(0, 1, 5), np.linspace(0, 2, 5)], axis=1))

    def test_too_few_points(self):
        with pytest.raises(GeometryError):
            delaunay_triangulate(np.zeros((2, 2)))

    def test_identity_warp(self, spec64, neutral, rng):
        image = rng.random((3, 64, 64))
        out = warp_psi(image, neutral, neutral).data
        inside = hull_mask(neutral, (64, 64))
        assert inside.sum() > 100
        np.testing.assert_allclose(out[:, inside], image[:, inside], atol=1e-5)
        np.testing.assert_array_equal(out[:, ~inside], 0.0)

    def test_translation_warp(self, neutral):
        ramp = np.tile(np.linspace(-1.0, 1.0, 64), (64, 1))[None]
        shift = np.array([0.1, 0.0])
        dst = neutral.vr() + shift
        out = warp_psi(ramp, neutral.vr(), dst).data
        inside = hull_mask(dst, (64, 64))
        np.testing.assert_allclose(out[0][inside], ramp[0][inside] - 0.1, atol=1e-5)

    def test_scaling_warp_samples_inverse_position(self, rng):
        center = np.array([0.1, -0.1])
        angles = np.linspace(0, 2 * np.pi, 9)[:-1]
        src = np.vstack([center, center + 0.35 * np.stack([np.cos(angles), np.sin(angles)], axis=1)])
        dst = center + 2.0 * (src - center)
        with float64_mode():
            image = Tensor(rng.random((2, 48, 48)))
            out = warp_psi(image, src, dst).data
            expected = bilinear_sample(image, center + (pixel_centers(48, 48) - center) / 2.0).data
        inside = hull_mask(dst, (48, 48))
        assert inside.sum() > 500
        np.testing.assert_allclose(out[:, inside], expected[:, inside], atol=1e-9)
        np.testing.assert_array_equal(out[:, ~inside], 0.0)

    def test_warp_needs_matching_sets(self, neutral):
        with pytest.raises(ShapeError):
            warp_psi(np.zeros((1, 8, 8)), neutral.vr(), neutral.vr()[:10])


class TestMask:
    def test_mask_covers_lower_face_only(self, neutral):
        m = lower_face_mask(neutral, (64, 64), dilation=3)
        assert m.mask.dtype == np.uint8
        assert set(np.unique(m.mask)) == {0, 1}
        assert m.mask[:30].sum() == 0
        assert m.area() > 0

    def test_dilation_grows_mask(self, neutral):
        plain = lower_face_mask(neutral, (64, 64), 0)
        dilated = lower_face_mask(neutral, (64, 64), 3)
        assert dilated.area() > plain.area()
        assert np.all(dilated.mask[plain.mask == 1] == 1)

    def test_scaled_dilation(self):
        assert scaled_dilation(3, 64, 64) == 3
        assert scaled_dilation(3, 64, 16) == 1
        assert scaled_dilation(3, 64, 256) == 12

    def test_invalid_arguments(self, neutral):
        with pytest.raises(GeometryError):
            lower_face_mask(np.zeros((2, 2)), (8, 8))
        with pytest.raises(GeometryError):
            lower_face_mask(neutral, (8, 8), dilation=-1)

    def test_filled(self):
        m = LowerFaceMask.filled((4, 5), 1)
        assert m.area() == 20
        assert m.as_tensor().shape == (1, 4, 5)
