import logging
import math

import pytest

from app.errors import ConfigError
from app.experiments import (
    TEMPORAL_VARIANTS,
    EnrolmentCache,
    Variant,
    evaluate_variants,
    normalized,
    ordering_holds,
    parse_variant,
    quality,
    tcf_reduction,
    temporal_ordering,
    variant_options,
)


class TestVariants:
    @pytest.mark.parametrize("name, expected", [
        ("full", Variant("full")),
        ("fixed", Variant("fixed")),
        ("no_finetune", Variant("no_finetune", model="no_finetune")),
        ("no_guidance", Variant("no_guidance", open_gate=True)),
        ("single_source", Variant("single_source", open_gate=True, single_source=True)),
        ("hard_switch", Variant("hard_switch", retrieval=True, hard_switch=True)),
        ("hard_switch_tcf", Variant("hard_switch_tcf", retrieval=True, hard_switch=True, tcf=True)),
        ("retrieval_amax_0.5", Variant("retrieval_amax_0.5", retrieval=True, a_max=0.5)),
        ("retrieval_amax_1", Variant("retrieval_amax_1", retrieval=True, a_max=1.0)),
        ("skip4", Variant("skip4", retrieval=True, skip=4)),
    ])
    def test_parse(self, name, expected):
        assert parse_variant(name) == expected

    @pytest.mark.parametrize("name", ["", "bogus", "retrieval_amax_0", "retrieval_amax_1.5", "skip0", "skip-1"])
    def test_rejects(self, name):
        with pytest.raises(ConfigError):
            parse_variant(name)

    def test_options(self, tiny_config):
        opts = variant_options(parse_variant("retrieval_amax_0.5"), tiny_config)
        assert opts.retrieval and opts.a_max == 0.5 and not opts.hard_switch
        opts = variant_options(parse_variant("fixed"), tiny_config)
        assert not opts.retrieval and opts.a_max == tiny_config.attention.a_max


class TestSummaries:
    def test_normalized(self):
        assert normalized({"fixed": 2.0, "hard_switch": 5.0}) == {"fixed": 1.0, "hard_switch": 2.5}
        assert normalized({"fixed": 0.0, "x": 0.0, "y": 1.0}) == {"fixed": 1.0, "x": 1.0, "y": math.inf}

    def test_ordering(self):
        values = {"fixed": 1.0, "retrieval_amax_0.25": 1.0, "retrieval_amax_0.5": 2.0, "hard_switch": 3.0}
        assert ordering_holds(values)
        values["retrieval_amax_0.5"] = 4.0
        assert not ordering_holds(values)

    def test_tcf_reduction(self):
        assert tcf_reduction({"hard_switch": 4.0, "hard_switch_tcf": 1.0}) == pytest.approx(0.75)
        assert tcf_reduction({"hard_switch": 0.0, "hard_switch_tcf": 0.0}) == 0.0


class TestEvaluation:
    def test_cache_reuses_enrolments(self, tiny_session, tiny_config):
        cache = EnrolmentCache(tiny_session, tiny_config)
        assert cache.get(True, 2) is cache.get(True, 2)
        assert cache.get(False, 3) is cache.get(False, 1)
        assert cache.get(True, 2).store.skip == 2

    def test_ground_truth_scores_the_cap(self, tiny_test_session, tiny_config):
        outputs = [f.image for f in tiny_test_session.clip.frames]
        psnr, ssim, perceptual = quality(outputs, tiny_test_session, tiny_config)
        assert psnr == 99.0
        assert ssim == pytest.approx(1.0)
        assert perceptual == 0.0

    def test_variant_rows(self, tiny_generator, tiny_session, tiny_test_session, tiny_config, caplog):
        with caplog.at_level(logging.WARNING):
            results = evaluate_variants(
                {"full": tiny_generator}, tiny_session, tiny_test_session, tiny_config,
                ["full", "no_finetune", "single_source"], temporal=True,
            )
        assert [r.variant for r in results] == ["full", "single_source"]
        assert "no_finetune" in caplog.text
        for r in results:
            row = r.to_row()
            assert row["frames"] == 4
            assert 0.0 < row["psnr"] <= 99.0
            assert row["temporal"] >= 0.0

    def test_temporal_ordering_covers_every_variant(self, tiny_generator, tiny_session, tiny_test_session, tiny_config):
        values = temporal_ordering(tiny_generator, tiny_session, tiny_test_session, tiny_config)
        assert list(values) == list(TEMPORAL_VARIANTS)
        assert all(math.isfinite(v) and v >= 0.0 for v in values.values())
