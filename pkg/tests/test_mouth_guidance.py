import numpy as np
import pytest

from app.config import NoiseConfig
from app.corpus import render_face
from app.errors import ShapeError
from app.mouth_guidance import (
    GATE_LOGIT_LIMIT,
    GatingNetwork,
    MouthEncoder,
    NoiseParams,
    emulate_training_guidance,
    encode_mouth,
    gate,
    image_noise,
    inference_guidance,
    keypoint_noise,
)
from app.tensorcore import Tensor
from app.vision.projection import ProjectionMap, Similarity
from app.vision.triangulation import hull_mask, warp_psi


class TestNoise:
    def test_zero_noise_is_identity(self, neutral, rng):
        zero = NoiseParams.zero()
        np.testing.assert_array_equal(keypoint_noise(neutral, zero, rng), neutral.vr())
        image = rng.random((3, 8, 8)).astype(np.float32)
        np.testing.assert_array_equal(image_noise(image, zero, rng), image)

    def test_noise_from_config(self):
        params = NoiseParams.from_config(NoiseConfig())
        assert params.sigma_scale == 0.05
        assert not params.keypoint_identity and not params.image_identity

    def test_image_noise_stays_in_range(self, rng):
        image = rng.random((3, 8, 8)).astype(np.float32)
        noisy = image_noise(image, NoiseParams(read_noise_sigma=0.5, shot_noise_gain=0.5), rng)
        assert noisy.dtype == np.float32
        assert noisy.min() >= 0.0 and noisy.max() <= 1.0
        assert not np.array_equal(noisy, image)

    @pytest.mark.parametrize("read,gain", [(0.02, 0.0), (0.0, 0.05), (0.02, 0.05)])
    def test_image_noise_magnitude_on_mid_gray(self, rng, read, gain):
        gray = np.full((3, 64, 64), 0.5, dtype=np.float32)
        noisy = image_noise(gray, NoiseParams(read_noise_sigma=read, shot_noise_gain=gain), rng)
        expected = np.sqrt(read ** 2 + gain ** 2 * 0.5)
        assert float((noisy - gray).std()) == pytest.approx(expected, rel=0.1)
        assert float((noisy - gray).mean()) == pytest.approx(0.0, abs=0.1 * expected)

    def test_keypoint_noise_magnitude(self, neutral, rng):
        params = NoiseParams(sigma_scale=0.0, sigma_trans=0.0, sigma_kp=0.01)
        offsets = np.concatenate([keypoint_noise(neutral, params, rng) - neutral.vr() for _ in range(50)])
        assert offsets.std() == pytest.approx(0.01, rel=0.1)

    def test_scale_about_centroid(self, neutral):
        params = NoiseParams(sigma_scale=0.2, sigma_trans=0.0, sigma_kp=0.0)
        out = keypoint_noise(neutral, params, np.random.default_rng(3))
        np.testing.assert_allclose(out.mean(axis=0), neutral.vr().mean(axis=0), atol=1e-12)


class TestGuidanceImages:
    def test_zero_noise_gives_lower_face_crop(self, spec64, open_mouth, rng):
        face = render_face(spec64, open_mouth)
        guidance = emulate_training_guidance(face, open_mouth.vr(), NoiseParams.zero(), rng).data
        inside = hull_mask(open_mouth.vr(), (64, 64))
        np.testing.assert_allclose(guidance[:, inside], face[:, inside], atol=1e-5)
        np.testing.assert_array_equal(guidance[:, ~inside], 0.0)

    def test_inference_guidance_undoes_headset_shift(self, spec64, open_mouth):
        face = render_face(spec64, open_mouth)
        headset = Similarity(1.0, 0.0, (4.0 / 63.0, 40.0 / 63.0))
        mouth_kps = headset.inverse().apply(open_mouth.vr())
        mouth_image = warp_psi(face, open_mouth.vr(), mouth_kps).data
        projection = ProjectionMap(headset, np.zeros((31, 2)))
        guidance = inference_guidance(mouth_image, mouth_kps, projection).data
        inside = hull_mask(open_mouth.vr(), (64, 64))
        inner = inside & np.roll(inside, 2, 0) & np.roll(inside, -2, 0) & np.roll(inside, 2, 1) & np.roll(inside, -2, 1)
        assert inner.sum() > 50
        np.testing.assert_allclose(guidance[:, inner], face[:, inner], atol=1e-5)


class TestEncoderAndGate:
    def test_encoder_downsamples_by_four(self, rng):
        encoder = MouthEncoder(3, 4, rng)
        assert encode_mouth(np.zeros((3, 16, 16), dtype=np.float32), encoder).shape == (4, 4, 4)

    def test_encoder_rejects_odd_sizes(self, rng):
        with pytest.raises(ShapeError):
            encode_mouth(np.zeros((3, 10, 10)), MouthEncoder(3, 4, rng))

    def test_gate_mask_in_unit_interval(self, rng):
        network = GatingNetwork(4, 3, rng)
        E_M = Tensor(rng.normal(size=(4, 4, 4)))
        aggregated = Tensor(rng.normal(size=(4, 4, 4)))
        f, m_f = gate(E_M, aggregated, network)
        assert m_f.shape == (1, 4, 4)
        assert np.all((m_f.data > 0) & (m_f.data < 1))
        np.testing.assert_allclose(f.data, m_f.data * aggregated.data, rtol=1e-6)

    def test_gate_logits_are_bounded(self, rng):
        network = GatingNetwork(2, 2, rng)
        network.conv_out.bias.data[:] = 1e4
        _, m_f = gate(Tensor(np.zeros((2, 4, 4))), Tensor(np.ones((2, 4, 4))), network)
        expected = 1.0 / (1.0 + np.exp(-GATE_LOGIT_LIMIT))
        np.testing.assert_allclose(m_f.data, expected, rtol=1e-6)

    def test_gate_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            gate(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((2, 2, 2))), GatingNetwork(2, 2, rng))
