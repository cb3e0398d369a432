import numpy as np
import pytest

from app.config import apply_overrides
from app.corpus import (
    MouthCamModel,
    SyntheticFaceSpec,
    expression_keypoints,
    make_corpus,
    neutral_keypoints,
    render_face,
    synth_trajectory,
    synth_vr_pair,
)
from app.errors import CorpusError, GeometryError
from app.vision.projection import ProjectionMap, Similarity, apply_projection


class TestFaces:
    def test_spec_depends_only_on_seed(self):
        assert SyntheticFaceSpec.from_seed(3) == SyntheticFaceSpec.from_seed(3)
        assert SyntheticFaceSpec.from_seed(3) != SyntheticFaceSpec.from_seed(4)

    def test_render_shape_and_range(self, spec64, neutral):
        image = render_face(spec64, neutral)
        assert image.shape == (3, 64, 64)
        assert image.dtype == np.float32
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_opening_changes_the_lower_face_only(self, spec64, neutral, open_mouth):
        a, b = render_face(spec64, neutral), render_face(spec64, open_mouth)
        changed = np.abs(a - b).max(axis=0) > 1e-6
        rows = np.nonzero(changed.any(axis=1))[0]
        assert rows.size > 0
        assert rows.min() > 32

    def test_pupils_sit_between_eye_corners(self, neutral):
        pts = neutral.points
        np.testing.assert_allclose(pts[68], (pts[36] + pts[39]) / 2)
        np.testing.assert_allclose(pts[69], (pts[42] + pts[45]) / 2)

    def test_expression_moves_mouth_and_jaw_only(self, neutral):
        moved = np.linalg.norm(expression_keypoints(neutral, 1.0, 0.5).points - neutral.points, axis=1) > 1e-9
        assert set(np.nonzero(moved)[0]) <= set(range(3, 14)) | set(range(48, 68))


class TestTrajectory:
    def test_starts_neutral_and_respects_velocity_cap(self, spec16):
        traj = synth_trajectory(spec16, 40, np.random.default_rng(0), velocity_cap=0.01, event_rate=0.2)
        assert len(traj) == 40
        assert traj[0] == neutral_keypoints(spec16)
        for a, b in zip(traj, traj[1:]):
            assert np.linalg.norm(b.points - a.points, axis=1).max() <= 0.01 + 1e-12

    def test_needs_a_frame(self, spec16):
        with pytest.raises(CorpusError):
            synth_trajectory(spec16, 0, np.random.default_rng(0))


class TestMouthCamera:
    def test_identity_model_keeps_keypoints(self, neutral):
        np.testing.assert_allclose(MouthCamModel.identity().mouth_keypoints(neutral.vr()), neutral.vr())

    def test_similarity_is_exactly_invertible(self, neutral):
        sim = Similarity(1.1, 0.05, (0.02, -0.15))
        model = MouthCamModel(sim, np.zeros((31, 2)))
        mouth = model.mouth_keypoints(neutral.vr())
        np.testing.assert_allclose(apply_projection(ProjectionMap(sim, np.zeros((31, 2))), mouth),
                                   neutral.vr(), atol=1e-12)

    def test_wrong_keypoint_count(self, neutral):
        with pytest.raises(GeometryError):
            MouthCamModel.identity().mouth_keypoints(neutral.points)

    def test_config_sag_has_requested_magnitude(self, tiny_config, neutral):
        model = MouthCamModel.from_config(tiny_config.corpus, tiny_config.noise, neutral.vr(),
                                          np.random.default_rng(0))
        rms = np.sqrt((model.sag ** 2).sum(axis=1).mean())
        assert rms == pytest.approx(tiny_config.corpus.hmd_sag)
        np.testing.assert_allclose(model.sag.mean(axis=0), 0.0, atol=1e-12)

    def test_vr_pair_fields(self, spec64, open_mouth):
        pair = synth_vr_pair(spec64, open_mouth, MouthCamModel.identity(), operator_id="op")
        assert pair.operator_id == "op"
        assert pair.mouth_image.shape == pair.face_image.shape == (3, 64, 64)
        np.testing.assert_allclose(pair.mouth_kps, open_mouth.vr())


class TestCorpus:
    def test_make_corpus_counts(self, tiny_config):
        corpus = make_corpus(tiny_config)
        assert [c.identity for c in corpus.videos] == ["id000", "id001"]
        assert all(len(c) == 8 for c in corpus.videos)
        assert len(corpus.vr_pairs) == 12
        assert corpus.videos[0].frames[0].image.shape == (3, 16, 16)

    def test_make_corpus_is_seeded(self, tiny_config):
        a, b = make_corpus(tiny_config), make_corpus(tiny_config)
        np.testing.assert_array_equal(a.videos[1].frames[5].image, b.videos[1].frames[5].image)
        other = make_corpus(apply_overrides(tiny_config, {"seed": 1}))
        assert not np.array_equal(a.videos[1].frames[5].image, other.videos[1].frames[5].image)

    def test_sessions_share_the_operator(self, tiny_session, tiny_test_session):
        assert tiny_session.spec == tiny_test_session.spec
        np.testing.assert_array_equal(tiny_session.model.sag, tiny_test_session.model.sag)
        assert len(tiny_session.mouth) == 6
        assert [m.index for m in tiny_test_session.mouth] == [0, 1, 2, 3]
