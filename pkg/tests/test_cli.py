import json
import logging

import pytest

from app.main import build_parser, run
from conftest import TINY


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    return path


def last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture
def corpus_dir(tmp_path, config_file, capsys):
    out = tmp_path / "corpus"
    assert run(["synth-corpus", "--config", str(config_file), "--out", str(out), "--frames", "6"]) == 0
    capsys.readouterr()
    return out


class TestParser:
    def test_unknown_command_exits_with_usage_error(self):
        with pytest.raises(SystemExit) as info:
            run(["paint"])
        assert info.value.code == 2

    def test_mode_flags_are_exclusive(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["bench", "--pipeline", "--sequential"])

    def test_flags_override_config(self, config_file):
        from app.main import resolve_config

        args = build_parser().parse_args(
            ["bench", "--config", str(config_file), "--retrieval", "on", "--a-max", "0.5", "--sequential"]
        )
        config = resolve_config(args)
        assert config.resolution == 16
        assert config.retrieval.enabled and config.attention.a_max == 0.5
        assert config.pipeline.pipelined is False


class TestCommands:
    def test_synth_corpus_layout(self, corpus_dir):
        assert (corpus_dir / "videos" / "id000" / "manifest.json").exists()
        assert (corpus_dir / "vr_pairs" / "id001" / "manifest.json").exists()
        for name in ("source", "mouth", "test_truth", "test_mouth"):
            assert (corpus_dir / "operator" / name / "keypoints.jsonl").exists()

    def test_train_zero_steps(self, corpus_dir, config_file, tmp_path, capsys):
        out = tmp_path / "ckpt"
        code = run(["train", "--config", str(config_file), "--corpus", str(corpus_dir), "--steps", "0",
                    "--out", str(out)])
        assert code == 0
        result = last_json(capsys)
        assert result["steps"] == 0
        assert (out / "final.facc").exists()

    def test_enroll_infer_and_eval(self, corpus_dir, config_file, tmp_path, capsys):
        cfg = ["--config", str(config_file)]
        op = corpus_dir / "operator"
        assert run(["enroll", *cfg, "--mouth", str(op / "mouth"), "--source", str(op / "source"),
                    "--out", str(tmp_path / "enrol")]) == 0
        assert last_json(capsys)["source_indices"][0] == 0

        assert run(["infer", *cfg, "--enrolment", str(tmp_path / "enrol"), "--mouth", str(op / "test_mouth"),
                    "--out", str(tmp_path / "frames")]) == 0
        assert last_json(capsys)["frames"] == 6
        assert len(list((tmp_path / "frames").glob("frame_*.ppm"))) == 6
        assert (tmp_path / "frames" / "report.json").exists()

        assert run(["eval", *cfg, "--pred", str(tmp_path / "frames"), "--target", str(op / "test_truth")]) == 0
        result = last_json(capsys)
        assert result["region"] == "lower-face"
        assert result["frames"] == 6

    def test_seeded_runs_are_reproducible(self, corpus_dir, config_file, tmp_path):
        again = tmp_path / "again"
        assert run(["synth-corpus", "--config", str(config_file), "--out", str(again), "--frames", "6"]) == 0
        first = corpus_dir / "operator" / "test_mouth" / "mouth_0003.ppm"
        assert first.read_bytes() == (again / "operator" / "test_mouth" / "mouth_0003.ppm").read_bytes()

        op = corpus_dir / "operator"
        cfg = ["--config", str(config_file)]
        assert run(["enroll", *cfg, "--mouth", str(op / "mouth"), "--source", str(op / "source"),
                    "--out", str(tmp_path / "enrol")]) == 0
        for name in ("a", "b"):
            assert run(["infer", *cfg, "--enrolment", str(tmp_path / "enrol"), "--mouth", str(op / "test_mouth"),
                        "--sequential" if name == "a" else "--pipeline", "--out", str(tmp_path / name)]) == 0
        for i in range(6):
            frame = f"frame_{i:04d}.ppm"
            assert (tmp_path / "a" / frame).read_bytes() == (tmp_path / "b" / frame).read_bytes()

    def test_eval_identical_frames(self, corpus_dir, config_file, capsys):
        truth = corpus_dir / "operator" / "test_truth"
        assert run(["eval", "--config", str(config_file), "--pred", str(truth), "--target", str(truth)]) == 0
        result = last_json(capsys)
        assert result["psnr"] == 99.0
        assert result["ssim"] == pytest.approx(1.0)

    def test_eval_without_keypoints_uses_lower_half(self, corpus_dir, config_file, tmp_path, capsys):
        truth = corpus_dir / "operator" / "test_truth"
        assert run(["eval", "--config", str(config_file), "--pred", str(truth), "--target", str(truth),
                    "--keypoints", str(tmp_path / "none.jsonl")]) == 0
        assert last_json(capsys)["region"] == "lower-half"

    def test_bench_reports_bit_identity(self, config_file, capsys):
        assert run(["bench", "--config", str(config_file), "--frames", "4"]) == 0
        result = last_json(capsys)
        assert result["frames"] == 4
        assert result["bit_identical"] is True


class TestFailures:
    def test_missing_out(self, config_file, capsys):
        assert run(["synth-corpus", "--config", str(config_file)]) == 1
        assert "--out" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert run(["bench", "--config", str(tmp_path / "absent.conf")]) == 1

    def test_invalid_override(self, config_file):
        assert run(["bench", "--config", str(config_file), "--a-max", "2.0"]) == 1

    def test_eval_needs_both_sides(self, corpus_dir, config_file):
        assert run(["eval", "--config", str(config_file), "--pred", str(corpus_dir)]) == 1

    def test_variant_eval_needs_two_frames(self, config_file, capsys):
        assert run(["eval", "--config", str(config_file), "--frames", "1", "--variants", "fixed"]) == 1
        assert "at least 2 frames" in capsys.readouterr().err
