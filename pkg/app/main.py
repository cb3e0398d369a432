"""Main application entry point."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from app.camera import MouthFrameStream
from app.config import Config, LoggingConfig, apply_overrides, load_config
from app.corpus import make_corpus, synth_session
from app.enrolment import enroll
from app.errors import ConfigError, FaceAnimError
from app.experiments import QUALITY_VARIANTS, evaluate_variants, normalized
from app.generator import load_generator
from app.inference import Animator, InferenceOptions
from app.metrics import MetricReport, PerceptualProxy, masked_metrics
from app.pipeline import outputs_identical, run_pipeline
from app.training import TrainingCorpora, train
from app.vision.masks import lower_face_mask, scaled_dilation
from export.report_exporter import export_variant_csv, write_report_json
from storage.datasets import (
    read_corpus,
    read_enrolment,
    read_mouth_stream,
    read_video,
    write_corpus,
    write_enrolment,
    write_mouth_stream,
    write_video,
)
from storage.image_io import read_ppm, write_ppm
from storage.keypoint_stream import read_keypoint_stream

logger = logging.getLogger(__name__)

COMMANDS = ("enroll", "synth-corpus", "train", "finetune", "infer", "eval", "bench")


def setup_logging(config: LoggingConfig) -> None:
    """Setup logging configuration; stdout stays free for reports."""
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if config.file:
        Path(config.file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(config.file))
    logging.basicConfig(
        level=getattr(logging, config.level),
        format=config.format,
        handlers=handlers,
        force=True,
    )


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Config file (section.key = value lines)")
    common.add_argument("--seed", type=int, help="Seed for every random stream")
    common.add_argument("--resolution", type=int, help="Square working resolution")
    common.add_argument("--a-max", type=float, dest="a_max", help="Bound on the retrieved source's weight")
    common.add_argument("--n-sources", type=int, dest="n_sources", help="Sources per frame")
    common.add_argument("--retrieval", choices=("on", "off"), help="Expression retrieval mode")
    common.add_argument("--skip", type=int, help="Expression store subsampling")
    mode = common.add_mutually_exclusive_group()
    mode.add_argument("--pipeline", dest="pipelined", action="store_const", const=True, help="Staged execution")
    mode.add_argument("--sequential", dest="pipelined", action="store_const", const=False, help="Sequential loop")
    common.add_argument("--steps", type=int, help="Training steps")
    common.add_argument("--out", type=Path, help="Output directory")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="faceanim", description="Keypoint and mouth-camera driven face animation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", parents=[common], help="Render a synthetic training corpus and operator")
    p.add_argument("--frames", type=int, help="Frames of the operator capture and test streams")

    p = sub.add_parser("enroll", parents=[common], help="Enrol an operator from two capture videos")
    p.add_argument("--mouth", type=Path, required=True, help="Mouth stream directory")
    p.add_argument("--source", type=Path, required=True, help="Frontal video directory")

    for name, text in (("train", "Train from scratch"), ("finetune", "Finetune a checkpoint with VR pairs")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--corpus", type=Path, required=True, help="Corpus directory")
        p.add_argument("--checkpoint", type=Path, required=(name == "finetune"), help="Starting checkpoint")

    p = sub.add_parser("infer", parents=[common], help="Animate a mouth stream")
    p.add_argument("--enrolment", type=Path, required=True, help="Enrolment directory")
    p.add_argument("--mouth", type=Path, required=True, help="Mouth stream directory")
    p.add_argument("--checkpoint", type=Path, help="Generator checkpoint")

    p = sub.add_parser("eval", parents=[common], help="Lower-face metrics or variant evaluation")
    p.add_argument("--pred", type=Path, help="Predicted frames directory")
    p.add_argument("--target", type=Path, help="Target frames directory")
    p.add_argument("--keypoints", type=Path, help="Target keypoint stream (defaults to target/keypoints.jsonl)")
    p.add_argument("--checkpoint", type=Path, help="Full-model checkpoint (variant evaluation)")
    p.add_argument("--checkpoint-nf", type=Path, dest="checkpoint_nf", help="Checkpoint trained without finetuning")
    p.add_argument("--variants", nargs="+", help="Variant names (variant evaluation)")
    p.add_argument("--frames", type=int, help="Frames of the synthetic streams")

    p = sub.add_parser("bench", parents=[common], help="Sequential vs pipelined throughput")
    p.add_argument("--frames", type=int, default=500, help="Frames of the synthetic stream")
    p.add_argument("--enrolment", type=Path, help="Enrolment directory (synthetic operator otherwise)")
    p.add_argument("--mouth", type=Path, help="Mouth stream directory (synthetic stream otherwise)")
    p.add_argument("--checkpoint", type=Path, help="Generator checkpoint")
    return parser


def resolve_config(args: argparse.Namespace) -> Config:
    """Config file and environment first, then CLI flags."""
    config = load_config(args.config)
    retrieval = None if args.retrieval is None else args.retrieval == "on"
    return apply_overrides(config, {
        "seed": args.seed,
        "resolution": args.resolution,
        "attention.a_max": args.a_max,
        "training.n_sources": args.n_sources,
        "retrieval.enabled": retrieval,
        "retrieval.skip": args.skip,
        "pipeline.pipelined": args.pipelined,
        "training.steps": args.steps,
    })


def _require_out(args: argparse.Namespace) -> Path:
    if args.out is None:
        raise FaceAnimError(f"'{args.command}' needs --out DIR")
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_synth_corpus(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    out = _require_out(args)
    corpus = make_corpus(config)
    write_corpus(out, corpus)
    frames = args.frames or config.corpus.frames
    identity_seed = config.seed * 1000 + config.corpus.identities
    capture = synth_session(config, identity_seed, frames, stream_seed=0)
    test = synth_session(config, identity_seed, frames, stream_seed=1)
    write_video(out / "operator" / "source", capture.clip)
    write_mouth_stream(out / "operator" / "mouth", capture.mouth)
    write_video(out / "operator" / "test_truth", test.clip)
    write_mouth_stream(out / "operator" / "test_mouth", test.mouth)
    return {
        "corpus": str(out),
        "videos": len(corpus.videos),
        "vr_pairs": len(corpus.vr_pairs),
        "operator_frames": frames,
    }


def cmd_enroll(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    out = _require_out(args)
    record = enroll(read_mouth_stream(args.mouth), read_video(args.source).frames, config)
    write_enrolment(out, record)
    return {
        "enrolment": str(out),
        "source_indices": record.source_indices,
        "store": len(record.store) if record.store is not None else 0,
    }


def cmd_train(args: argparse.Namespace, config: Config, finetune: bool = False) -> Dict[str, Any]:
    out = _require_out(args)
    videos, pairs = read_corpus(args.corpus)
    generator = load_generator(config, args.checkpoint) if args.checkpoint else None
    _, log = train(config, TrainingCorpora(videos, pairs), generator, out, finetune=finetune)
    losses = log.losses()
    return {
        "checkpoint": str(out / "final.facc"),
        "steps": len(losses),
        "first_loss": losses[0] if losses else None,
        "last_loss": losses[-1] if losses else None,
    }


def cmd_infer(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    out = _require_out(args)
    enrolment = read_enrolment(args.enrolment)
    animator = Animator(enrolment, load_generator(config, args.checkpoint), InferenceOptions.from_config(config))
    stream = MouthFrameStream(args.mouth)

    def sink(index: int, image: np.ndarray) -> None:
        write_ppm(out / f"frame_{index:04d}.ppm", image)

    _, report = run_pipeline(animator, stream, config, sink=sink)
    write_report_json(out / "report.json", report.to_dict())
    return report.to_dict()


def _frame_paths(directory: Path) -> List[Path]:
    paths = sorted(directory.glob("frame_*.ppm"))
    if not paths:
        raise FaceAnimError(f"{directory} holds no frame_XXXX.ppm images")
    return paths


def _eval_files(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    pred_paths, target_paths = _frame_paths(args.pred), _frame_paths(args.target)
    if [p.name for p in pred_paths] != [p.name for p in target_paths]:
        raise FaceAnimError(f"frame lists differ: {len(pred_paths)} predictions, {len(target_paths)} targets")
    kp_path = args.keypoints or (args.target / "keypoints.jsonl")
    records = {r.frame: r for r in read_keypoint_stream(kp_path)} if kp_path.exists() else None

    proxy = None
    reports: List[MetricReport] = []
    for p_path, t_path in zip(pred_paths, target_paths):
        pred, target = read_ppm(p_path), read_ppm(t_path)
        C, H, W = target.shape
        proxy = proxy or PerceptualProxy(config.eval.perceptual_seed, config.eval.perceptual_channels, C)
        if records is not None:
            index = int(t_path.stem.split("_")[-1])
            if index not in records:
                raise FaceAnimError(f"no keypoints for target frame {index}")
            dilation = scaled_dilation(config.geometry.mask_dilation, config.geometry.mask_reference_resolution, W)
            mask, region = lower_face_mask(records[index].to_keypoint_set().vr(), (H, W), dilation).mask, "lower-face"
        else:
            mask = np.zeros((H, W), dtype=bool)
            mask[H // 2:] = True
            region = "lower-half"
        reports.append(masked_metrics(pred, target, mask, proxy, config.eval.psnr_cap, region))

    result = {
        "frames": len(reports),
        "region": reports[0].region,
        "psnr": float(np.mean([r.psnr for r in reports])),
        "ssim": float(np.mean([r.ssim for r in reports])),
        "perceptual": float(np.mean([r.perceptual for r in reports])),
    }
    if args.out is not None:
        write_report_json(_require_out(args) / "eval.json", result)
    return result


def _eval_variants(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    frames = args.frames or config.corpus.frames
    if frames < 2:
        raise ConfigError(f"variant evaluation needs at least 2 frames per stream, got {frames}")
    identity_seed = config.seed * 1000 + config.corpus.identities
    capture = synth_session(config, identity_seed, frames, stream_seed=0)
    test = synth_session(config, identity_seed, frames, stream_seed=1)
    generators = {"full": load_generator(config, args.checkpoint)}
    if args.checkpoint_nf is not None:
        generators["no_finetune"] = load_generator(config, args.checkpoint_nf)
    variants = args.variants or list(QUALITY_VARIANTS)
    results = evaluate_variants(generators, capture, test, config, variants, temporal=True)
    rows = [r.to_row() for r in results]
    temporal = {r.variant: r.temporal for r in results}
    reference = "fixed" if "fixed" in temporal else (rows[0]["variant"] if rows else None)
    if args.out is not None:
        out = _require_out(args)
        export_variant_csv(out / "variants.csv", rows, normalize_to=reference)
        write_report_json(out / "variants.json", {"rows": rows})
    return {
        "rows": rows,
        "temporal_normalized": normalized(temporal, reference) if reference is not None else {},
    }


def cmd_eval(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    if args.pred is not None or args.target is not None:
        if args.pred is None or args.target is None:
            raise FaceAnimError("file evaluation needs both --pred and --target")
        return _eval_files(args, config)
    return _eval_variants(args, config)


def cmd_bench(args: argparse.Namespace, config: Config) -> Dict[str, Any]:
    if args.enrolment is not None and args.mouth is not None:
        enrolment = read_enrolment(args.enrolment)
        frames = read_mouth_stream(args.mouth)[: args.frames]
    else:
        identity_seed = config.seed * 1000 + config.corpus.identities
        capture = synth_session(config, identity_seed, min(args.frames, config.corpus.frames), stream_seed=0)
        stream = synth_session(config, identity_seed, args.frames, stream_seed=1)
        enrolment = enroll(capture.mouth, capture.clip.frames, config)
        frames = stream.mouth
    animator = Animator(enrolment, load_generator(config, args.checkpoint), InferenceOptions.from_config(config))

    seq_out, seq = run_pipeline(animator, frames, config, pipelined=False)
    pipe_out, pipe = run_pipeline(animator, frames, config, pipelined=True)
    result: Dict[str, Any] = {
        "frames": len(frames),
        "mode": "pipelined" if config.pipeline.pipelined else "sequential",
        "sequential_fps": seq.fps,
        "pipelined_fps": pipe.fps,
        "speedup": pipe.fps / seq.fps if seq.fps > 0 else 0.0,
        "sequential": seq.to_dict(),
        "pipelined": pipe.to_dict(),
    }
    if config.pipeline.determinism:
        result["bit_identical"] = outputs_identical(seq_out, pipe_out)
        if not result["bit_identical"]:
            logger.error("Pipelined outputs differ from the sequential run")
    if args.out is not None:
        write_report_json(_require_out(args) / "bench.json", result)
    return result


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse, dispatch, print the JSON result. Returns the exit code."""
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        setup_logging(config.logging)
        logger.info(f"COMMAND_START: command={args.command}, seed={config.seed}, resolution={config.resolution}")
        handlers = {
            "synth-corpus": cmd_synth_corpus,
            "enroll": cmd_enroll,
            "train": cmd_train,
            "finetune": lambda a, c: cmd_train(a, c, finetune=True),
            "infer": cmd_infer,
            "eval": cmd_eval,
            "bench": cmd_bench,
        }
        result = handlers[args.command](args, config)
    except (FaceAnimError, OSError) as e:
        logger.error(f"Command '{args.command}' failed: {e}", exc_info=True)
        print(json.dumps({"error": str(e), "type": type(e).__name__}), file=sys.stderr)
        return 1
    print(json.dumps(result, default=str))
    return 0


def main():
    """Entry point."""
    sys.exit(run())


if __name__ == "__main__":
    main()
