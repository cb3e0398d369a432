import numpy as np
import pytest

from app.attention import AttentionWeights
from app.corpus import Frame, expression_keypoints, neutral_keypoints, render_face
from app.errors import CheckpointFormatError, ShapeError, StageError
from app.generator import FaceGenerator, load_generator
from app.tensorcore import Tensor, backward, float64_mode
from app.tensorcore.checkpoint import write_checkpoint_file
from app.vision.masks import LowerFaceMask


@pytest.fixture
def sources(spec16):
    neutral = neutral_keypoints(spec16)
    smile = expression_keypoints(neutral, 0.2, smile=1.0)
    return [Frame(render_face(spec16, k), k) for k in (neutral, smile)]


@pytest.fixture
def driving(spec16):
    return expression_keypoints(neutral_keypoints(spec16), 0.7)


@pytest.fixture
def guidance(rng):
    return rng.random((3, 16, 16)).astype(np.float32)


def run(generator, sources, driving, guidance, **kwargs):
    weights = generator.attend([s.keypoints for s in sources], driving)
    return generator.forward(sources, driving, guidance, weights, **kwargs)


class TestForward:
    def test_output_shape_and_range(self, tiny_generator, sources, driving, guidance):
        out = run(tiny_generator, sources, driving, guidance)
        assert out.shape == (3, 16, 16)
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_deterministic(self, tiny_generator, sources, driving, guidance):
        a = run(tiny_generator, sources, driving, guidance).data
        b = run(tiny_generator, sources, driving, guidance).data
        np.testing.assert_array_equal(a, b)

    def test_same_seed_same_weights(self, tiny_config):
        a, b = FaceGenerator.from_config(tiny_config), FaceGenerator.from_config(tiny_config)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_missing_guidance_names_gate_stage(self, tiny_generator, sources, driving):
        with pytest.raises(StageError) as info:
            run(tiny_generator, sources, driving, None, frame_index=7)
        assert info.value.stage == "gate"
        assert info.value.frame_index == 7

    def test_open_gate_needs_no_guidance(self, tiny_generator, sources, driving):
        assert run(tiny_generator, sources, driving, None, open_gate=True).shape == (3, 16, 16)

    def test_weight_count_mismatch(self, tiny_generator, sources, driving, guidance):
        with pytest.raises(ShapeError):
            tiny_generator.forward(sources, driving, guidance, AttentionWeights.uniform(3))

    def test_empty_mask_ignores_extra_sources(self, tiny_generator, sources, driving, guidance, spec16):
        mask = LowerFaceMask.filled((4, 4), 0)
        weights = AttentionWeights.uniform(2)
        a = tiny_generator.forward(sources, driving, guidance, weights, mask_override=mask).data
        other = Frame(np.zeros_like(sources[1].image), sources[1].keypoints)
        b = tiny_generator.forward([sources[0], other], driving, guidance, weights, mask_override=mask).data
        np.testing.assert_array_equal(a, b)

    def test_wrong_image_size(self, tiny_generator):
        with pytest.raises(ShapeError):
            tiny_generator.encode(np.zeros((3, 18, 18)))


class TestGradients:
    def test_open_gate_leaves_mouth_branch_without_gradient(self, tiny_generator, sources, driving):
        out = run(tiny_generator, sources, driving, None, open_gate=True)
        backward((out * out).sum())
        for name, p in tiny_generator.named_parameters():
            if name.startswith(("mouth_enc.", "gate.")):
                assert not np.any(p.grad), name
        assert np.any(tiny_generator.dec.conv3.bias.grad)

    def test_phase_parameters(self, tiny_generator):
        phase1 = {id(p) for p in tiny_generator.phase_parameters(1)}
        assert phase1 == {id(p) for p in tiny_generator.enc.parameters() + tiny_generator.dec.parameters()}
        assert len(tiny_generator.phase_parameters(2)) == len(tiny_generator.parameters())

    @pytest.mark.parametrize("name", ["dec.conv3.bias", "gate.conv_out.bias", "mouth_enc.conv3.bias"])
    def test_matches_finite_differences(self, tiny_generator, sources, driving, guidance, name):
        tiny_generator.astype(np.float64)
        params = dict(tiny_generator.named_parameters())
        p = params[name]

        def loss():
            out = run(tiny_generator, sources, driving, guidance)
            return (out * out).sum()

        with float64_mode():
            tiny_generator.zero_grad()
            backward(loss())
            analytic = p.grad.copy()
            numeric = np.zeros_like(p.data)
            for i in np.ndindex(p.data.shape):
                orig = p.data[i]
                p.data[i] = orig + 1e-6
                hi = loss().item()
                p.data[i] = orig - 1e-6
                lo = loss().item()
                p.data[i] = orig
                numeric[i] = (hi - lo) / 2e-6
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        assert np.abs(analytic - numeric).max() / scale < 1e-4

    def test_attention_projection_gets_gradient(self, tiny_generator, sources, driving, guidance):
        out = run(tiny_generator, sources, driving, guidance, mask_override=LowerFaceMask.filled((4, 4), 1))
        backward((out * out).sum())
        assert np.any(tiny_generator.attn.W_S.grad)
        assert np.any(tiny_generator.attn.W_D.grad)


class TestCheckpointNames:
    def test_entry_prefixes(self, tiny_generator):
        names = [n for n, _ in tiny_generator.state_entries()]
        assert len(names) == len(set(names))
        prefixes = {n.split(".")[0] for n in names}
        assert prefixes == {"enc", "dec", "mouth_enc", "gate", "attn"}
        assert "attn.W_S" in names and "attn.W_D" in names

    def test_load_generator_round_trip(self, tmp_path, tiny_config, tiny_generator, sources, driving, guidance):
        for p in tiny_generator.parameters():
            p.data = p.data + np.float32(0.01)
        path = write_checkpoint_file(tmp_path / "model.facc", tiny_generator.state_entries())
        loaded = load_generator(tiny_config, path)
        np.testing.assert_array_equal(
            run(loaded, sources, driving, guidance).data,
            run(tiny_generator, sources, driving, guidance).data,
        )

    def test_load_rejects_other_architecture(self, tmp_path, tiny_config, tiny_generator):
        from app.config import apply_overrides

        path = write_checkpoint_file(tmp_path / "model.facc", tiny_generator.state_entries())
        wider = apply_overrides(tiny_config, {"network.feature_channels": 6})
        with pytest.raises(CheckpointFormatError):
            load_generator(wider, path)

    def test_missing_checkpoint_file(self, tmp_path, tiny_config):
        with pytest.raises(CheckpointFormatError):
            load_generator(tiny_config, tmp_path / "absent.facc")


def test_tensor_guidance_accepted(tiny_generator, sources, driving, guidance):
    out = run(tiny_generator, sources, driving, Tensor(guidance))
    assert out.shape == (3, 16, 16)
