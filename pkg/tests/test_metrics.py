import numpy as np
import pytest

from app.errors import ShapeError
from app.metrics import (
    PerceptualProxy,
    TemporalConsistencyFilter,
    masked_metrics,
    psnr_masked,
    ssim_masked,
    tcf_filter,
    temporal_inconsistency,
)
from app.vision.masks import lower_face_mask
from app.vision.motion import DeformationGrid


@pytest.fixture
def images(rng):
    target = rng.random((3, 32, 32))
    pred = np.clip(target + rng.normal(scale=0.05, size=target.shape), 0, 1)
    return pred, target


@pytest.fixture
def mask():
    m = np.zeros((32, 32), dtype=np.uint8)
    m[16:28, 8:24] = 1
    return m


class TestMaskedMetrics:
    def test_identical_images(self, images, mask):
        _, target = images
        report = masked_metrics(target, target.copy(), mask)
        assert report.psnr == 99.0
        assert report.ssim == pytest.approx(1.0)
        assert report.perceptual == 0.0
        assert report.pixels == mask.sum()

    def test_psnr_of_constant_offset(self, mask):
        target = np.full((3, 32, 32), 0.5)
        assert psnr_masked(target + 0.1, target, mask) == pytest.approx(20.0)

    def test_psnr_respects_cap(self, mask):
        target = np.full((3, 32, 32), 0.5)
        assert psnr_masked(target + 1e-7, target, mask, cap=60.0) == 60.0

    def test_outside_pixels_are_ignored(self, images, mask, rng):
        pred, target = images
        before = masked_metrics(pred, target, mask)
        outside = mask == 0
        pred2, target2 = pred.copy(), target.copy()
        pred2[:, outside] = rng.random((3, int(outside.sum())))
        target2[:, outside] = 0.0
        after = masked_metrics(pred2, target2, mask)
        assert after == before

    def test_ssim_drops_with_noise(self, images, mask):
        pred, target = images
        assert ssim_masked(pred, target, mask) < 1.0

    def test_empty_mask(self, images):
        pred, target = images
        with pytest.raises(ShapeError):
            masked_metrics(pred, target, np.zeros((32, 32)))

    def test_shape_mismatch(self, images, mask):
        pred, _ = images
        with pytest.raises(ShapeError):
            psnr_masked(pred, pred[:, :16], mask)
        with pytest.raises(ShapeError):
            masked_metrics(pred, pred, np.ones((16, 16)))

    def test_perceptual_proxy_is_seeded(self, images, mask):
        pred, target = images
        a = PerceptualProxy(seed=3).distance(pred, target, mask)
        b = PerceptualProxy(seed=3).distance(pred, target, mask)
        assert a == b > 0.0

    def test_accepts_lower_face_mask(self, images, neutral):
        pred, target = images
        report = masked_metrics(pred, target, lower_face_mask(neutral.vr(), (32, 32), 1))
        assert report.region == "lower-face"
        assert report.pixels > 0


class TestTemporalInconsistency:
    def test_static_sequence_is_consistent(self, rng, neutral):
        frame = rng.random((3, 32, 32))
        assert temporal_inconsistency([frame] * 4, [neutral] * 4) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("count", [0, 1])
    def test_needs_two_frames(self, rng, neutral, count):
        with pytest.raises(ValueError):
            temporal_inconsistency([rng.random((3, 8, 8))] * count, [neutral] * count)

    def test_flicker_is_detected(self, rng, neutral):
        a, b = rng.random((3, 32, 32)), rng.random((3, 32, 32))
        assert temporal_inconsistency([a, b, a, b], [neutral] * 4) > 0.0

    def test_length_mismatch(self, rng, neutral):
        with pytest.raises(ShapeError):
            temporal_inconsistency([rng.random((3, 8, 8))] * 2, [neutral])


class TestTemporalConsistencyFilter:
    def test_first_frame_passes_through(self, rng):
        x = rng.random((3, 4, 4)).astype(np.float32)
        np.testing.assert_array_equal(tcf_filter(x, None, None, 0.5), x)

    def test_alpha_one_disables_smoothing(self, rng):
        x, prev = rng.random((3, 4, 4)), rng.random((3, 4, 4))
        np.testing.assert_allclose(tcf_filter(x, prev, None, 1.0), x.astype(np.float32))

    def test_blend(self):
        out = tcf_filter(np.ones((1, 2, 2)), np.zeros((1, 2, 2)), DeformationGrid.identity_grid((2, 2)), 0.25)
        np.testing.assert_allclose(out, 0.25)

    def test_alternating_signal_is_attenuated(self):
        state = None
        for t in range(60):
            x = np.full((1, 2, 2), 1.0 if t % 2 == 0 else -1.0)
            state = tcf_filter(x, state, None, 0.5)
        assert abs(state[0, 0, 0]) == pytest.approx(1.0 / 3.0, rel=1e-4)

    def test_constant_signal_is_fixed_point(self, neutral):
        tcf = TemporalConsistencyFilter(alpha=0.5)
        x = np.full((3, 8, 8), 0.7, dtype=np.float32)
        for _ in range(5):
            out = tcf.update(x, neutral)
        np.testing.assert_allclose(out, x, atol=1e-6)
        tcf.reset()
        assert tcf.state is None

    @pytest.mark.parametrize("alpha", [0.0, 1.5])
    def test_alpha_range(self, alpha):
        with pytest.raises(ValueError):
            TemporalConsistencyFilter(alpha)
        with pytest.raises(ValueError):
            tcf_filter(np.zeros((1, 2, 2)), None, None, alpha)
