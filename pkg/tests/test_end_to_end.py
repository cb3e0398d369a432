"""Long-running experiments on the synthetic oracle (run with ``pytest -m slow``)."""

import pytest

from app.config import Config, apply_overrides
from app.corpus import make_corpus, synth_session
from app.enrolment import enroll
from app.experiments import evaluate_variants, ordering_holds, tcf_reduction, temporal_ordering
from app.generator import FaceGenerator
from app.inference import Animator, InferenceOptions
from app.pipeline import outputs_identical, run_pipeline
from app.training import TrainingCorpora, train

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def config():
    return apply_overrides(Config(), {"training.steps": 3000, "training.phase1_steps": 500,
                                      "training.checkpoint_every": 1000})


@pytest.fixture(scope="module")
def operator(config):
    identity_seed = config.seed * 1000 + config.corpus.identities
    return (
        synth_session(config, identity_seed, config.corpus.frames, stream_seed=0),
        synth_session(config, identity_seed, 500, stream_seed=1),
    )


@pytest.fixture(scope="module")
def trained(config, tmp_path_factory):
    corpus = make_corpus(config)
    generator, log = train(config, TrainingCorpora(corpus.videos, corpus.vr_pairs),
                           out_dir=tmp_path_factory.mktemp("ckpt"))
    assert log.losses()[-1] < log.losses()[0]
    return generator


def test_guidance_and_sources_improve_quality(trained, operator, config):
    capture, stream = operator
    results = {r.variant: r for r in evaluate_variants(
        {"full": trained}, capture, stream, config, ["full", "no_guidance", "single_source"]
    )}
    assert results["full"].psnr >= results["no_guidance"].psnr + 0.5
    assert results["full"].psnr >= results["single_source"].psnr + 1.0


def test_retrieval_flicker_ordering(trained, operator, config):
    capture, stream = operator
    values = temporal_ordering(trained, capture, stream, config)
    assert ordering_holds(values)
    assert values["fixed"] < values["hard_switch"]
    assert tcf_reduction(values) >= 0.25


def test_pipelined_throughput(operator, config):
    capture, stream = operator
    cfg = apply_overrides(config, {"pipeline.stages": 4, "retrieval.enabled": True})
    animator = Animator(enroll(capture.mouth, capture.clip.frames, cfg), FaceGenerator.from_config(cfg),
                        InferenceOptions.from_config(cfg))
    seq_out, seq = run_pipeline(animator, stream.mouth, cfg, pipelined=False)
    pipe_out, pipe = run_pipeline(animator, stream.mouth, cfg, pipelined=True)
    assert outputs_identical(seq_out, pipe_out)
    assert pipe.frames == seq.frames == 500
    assert pipe.fps >= 1.1 * seq.fps
