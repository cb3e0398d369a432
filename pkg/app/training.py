"""Two-phase training: self-reconstruction, then mouth-guided fine-tuning with VR pairs."""

import json
import logging
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import AugmentConfig, Config
from app.corpus import Frame, VideoClip, VrPairRecord
from app.errors import CorpusError, NumericalError, ShapeError, TrainingError
from app.generator import FaceGenerator
from app.mouth_guidance import NoiseParams, emulate_training_guidance
from app.tensorcore import SGD, Tensor, absolute, avg_pool2d, backward, bilinear_sample
from app.tensorcore.checkpoint import write_checkpoint_file
from app.vision.keypoints import KeypointSet, pixel_centers
from app.vision.triangulation import warp_psi

logger = logging.getLogger(__name__)

LOSS_SCALES = 3
SampleSource = Literal["vr", "synth"]


def reconstruction_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Sum over 3 scales (1, 1/2, 1/4) of the mean absolute pixel difference.

    Raises:
        ShapeError: If the images differ in shape
    """
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    p, t = pred, target
    total = absolute(p - t).mean()
    for _ in range(1, LOSS_SCALES):
        p, t = avg_pool2d(p, 2), avg_pool2d(t, 2)
        total = total + absolute(p - t).mean()
    return total


@dataclass
class TrainingSample:
    """One training example.

    Attributes:
        driving: Target frame (image and keypoints)
        sources: Source frames, appearance source first
        guidance: Warped mouth image I'_M
        vr_sample: True when drawn from the annotated VR-pair corpus
    """
    driving: Frame
    sources: List[Frame]
    guidance: Tensor
    vr_sample: bool = False


@dataclass(frozen=True)
class AugmentRanges:
    """Sampling intervals of the augmentation transform."""
    scale: Tuple[float, float] = (1.0, 1.0)
    rotation_deg: Tuple[float, float] = (0.0, 0.0)
    crop: Tuple[float, float] = (1.0, 1.0)
    max_tries: int = 10

    @classmethod
    def from_config(cls, config: AugmentConfig) -> "AugmentRanges":
        return cls(
            scale=(1.0 - config.scale_range, 1.0 + config.scale_range),
            rotation_deg=(-config.rotation_deg, config.rotation_deg),
            crop=(config.crop_min, 1.0),
            max_tries=config.max_tries,
        )


@dataclass(frozen=True)
class AugmentTransform:
    """Output <- input map: o = D^-1 (s R p - c), D = diag(crop_x, crop_y)."""
    scale: float = 1.0
    rotation: float = 0.0
    center: Tuple[float, float] = (0.0, 0.0)
    crop: Tuple[float, float] = (1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.rotation == 0.0 and self.center == (0.0, 0.0) and self.crop == (1.0, 1.0)

    def _rot(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return np.array([[c, -s], [s, c]])

    def forward(self, points: np.ndarray) -> np.ndarray:
        q = self.scale * points @ self._rot().T
        return (q - np.asarray(self.center)) / np.asarray(self.crop)

    def inverse(self, points: np.ndarray) -> np.ndarray:
        q = points * np.asarray(self.crop) + np.asarray(self.center)
        return q @ self._rot() / self.scale

    def valid(self) -> bool:
        """The cropped window stays inside the input image."""
        corners = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
        return bool(np.all(np.abs(self.inverse(corners)) <= 1.0 + 1e-9))


def sample_transform(ranges: AugmentRanges, rng: np.random.Generator) -> AugmentTransform:
    scale = float(rng.uniform(*ranges.scale))
    rotation = math.radians(float(rng.uniform(*ranges.rotation_deg)))
    crop = (float(rng.uniform(*ranges.crop)), float(rng.uniform(*ranges.crop)))
    center = (float(rng.uniform(-(1.0 - crop[0]), 1.0 - crop[0])), float(rng.uniform(-(1.0 - crop[1]), 1.0 - crop[1])))
    return AugmentTransform(scale, rotation, center, crop)


def apply_transform(image: np.ndarray, kps: KeypointSet, transform: AugmentTransform) -> Tuple[np.ndarray, KeypointSet]:
    if transform.is_identity:
        return image.copy(), kps.copy()
    H, W = image.shape[1:]
    grid = transform.inverse(pixel_centers(H, W).reshape(-1, 2)).reshape(H, W, 2)
    warped = bilinear_sample(Tensor(image, dtype=image.dtype), grid).data
    points = np.clip(transform.forward(kps.points), -1.0, 1.0)
    return warped, KeypointSet(points, kps.layout)


def augment(
    image: np.ndarray,
    kps: KeypointSet,
    rng: np.random.Generator,
    ranges: AugmentRanges,
) -> Tuple[np.ndarray, KeypointSet]:
    """Random scale, rotation and crop applied to image and keypoints alike.

    Transforms whose crop leaves the image are resampled up to ``max_tries``
    times; after that the identity is used.
    """
    for _ in range(ranges.max_tries):
        transform = sample_transform(ranges, rng)
        if transform.valid():
            return apply_transform(image, kps, transform)
    logger.warning(f"AUGMENT_FALLBACK: no valid transform in {ranges.max_tries} tries, using identity")
    return image.copy(), kps.copy()


def _augment_frames(frames: Sequence[Frame], rng: np.random.Generator, ranges: AugmentRanges) -> List[Frame]:
    """One transform shared by every frame of a sample."""
    for _ in range(ranges.max_tries):
        transform = sample_transform(ranges, rng)
        if transform.valid():
            break
    else:
        logger.warning(f"AUGMENT_FALLBACK: no valid transform in {ranges.max_tries} tries, using identity")
        transform = AugmentTransform()
    return [Frame(*apply_transform(f.image, f.keypoints, transform)) for f in frames]


def validate_corpus(corpus: Sequence[VideoClip], n_sources: int) -> None:
    if not corpus:
        raise CorpusError("training corpus is empty")
    short = [v.identity for v in corpus if len(v) < n_sources + 1]
    if short:
        raise CorpusError(f"videos shorter than n_sources + 1 = {n_sources + 1} frames: {short}")


def sample_one(
    corpus: Sequence[VideoClip],
    n_sources: int,
    noise: NoiseParams,
    rng: np.random.Generator,
    augment_ranges: Optional[AugmentRanges] = None,
) -> TrainingSample:
    """Driving frame and n_sources distinct source frames from one video."""
    video = corpus[int(rng.integers(len(corpus)))]
    if len(video) < n_sources + 1:
        raise CorpusError(f"video {video.identity} has {len(video)} frames, needs {n_sources + 1}")
    idx = rng.choice(len(video), size=n_sources + 1, replace=False)
    frames = [video.frames[int(i)] for i in idx]
    if augment_ranges is not None:
        frames = _augment_frames(frames, rng, augment_ranges)
    driving, sources = frames[0], frames[1:]
    guidance = emulate_training_guidance(driving.image, driving.keypoints.vr(), noise, rng)
    return TrainingSample(driving, sources, guidance, vr_sample=False)


def sample_batch(corpus: Sequence[VideoClip], config: Config, rng: np.random.Generator) -> List[TrainingSample]:
    """``config.training.batch_size`` samples from the synthetic corpus."""
    noise = NoiseParams.from_config(config.noise)
    ranges = AugmentRanges.from_config(config.augment) if config.augment.enabled else None
    return [
        sample_one(corpus, config.training.n_sources, noise, rng, ranges)
        for _ in range(config.training.batch_size)
    ]


def finetune_sampler(
    vr_corpus: Sequence[VrPairRecord],
    synth_corpus: Sequence[VideoClip],
    vr_mix: float,
    rng: np.random.Generator,
) -> SampleSource:
    """Choose the corpus of the next fine-tuning sample (``"vr"`` with probability vr_mix).

    Raises:
        CorpusError: If the chosen mix needs a corpus that is empty
    """
    if not 0.0 <= vr_mix <= 1.0:
        raise ValueError(f"vr_mix must be in [0, 1], got {vr_mix}")
    if vr_mix > 0 and not vr_corpus:
        raise CorpusError("vr_mix > 0 but the VR-pair corpus is empty")
    if vr_mix < 1 and not synth_corpus:
        raise CorpusError("vr_mix < 1 but the synthetic corpus is empty")
    return "vr" if rng.random() < vr_mix else "synth"


def group_by_operator(vr_corpus: Sequence[VrPairRecord]) -> Dict[str, List[VrPairRecord]]:
    groups: Dict[str, List[VrPairRecord]] = {}
    for record in vr_corpus:
        groups.setdefault(record.operator_id, []).append(record)
    return groups


def sample_vr(
    groups: Dict[str, List[VrPairRecord]],
    n_sources: int,
    rng: np.random.Generator,
) -> TrainingSample:
    """VR-pair sample: real mouth image as guidance, sources from the same operator."""
    eligible = sorted(op for op, records in groups.items() if len(records) >= n_sources + 1)
    if not eligible:
        raise CorpusError(f"no operator has {n_sources + 1} VR-pair records")
    records = groups[eligible[int(rng.integers(len(eligible)))]]
    idx = rng.choice(len(records), size=n_sources + 1, replace=False)
    picked = [records[int(i)] for i in idx]
    target = picked[0]
    guidance = warp_psi(target.mouth_image, target.mouth_kps, target.face_kps.vr())
    sources = [Frame(r.face_image, r.face_kps) for r in picked[1:]]
    return TrainingSample(Frame(target.face_image, target.face_kps), sources, guidance, vr_sample=True)


@dataclass
class TrainingCorpora:
    synthetic: List[VideoClip]
    vr_pairs: List[VrPairRecord] = field(default_factory=list)


@dataclass
class TrainingLog:
    """Per-step records ``{"step", "loss", "vr_sample"}``."""
    records: List[Dict[str, Any]] = field(default_factory=list)

    def losses(self) -> List[float]:
        return [r["loss"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)


class SampleLoader:
    """Background producer filling a bounded queue with training batches.

    The producer owns the random generator, so the batch sequence depends
    only on the seed.
    """

    def __init__(
        self,
        config: Config,
        corpora: TrainingCorpora,
        rng: np.random.Generator,
        steps: int,
        finetune_from: int,
    ):
        """
        Initialize loader.

        Args:
            config: Full configuration
            corpora: Synthetic and VR-pair corpora
            rng: Generator used for every draw
            steps: Number of batches to produce
            finetune_from: First step that may draw VR-pair samples
        """
        self.config = config
        self.corpora = corpora
        self.rng = rng
        self.steps = steps
        self.finetune_from = finetune_from
        self._queue: "queue.Queue[Any]" = queue.Queue(maxsize=config.training.loader_queue)
        self._stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self._groups = group_by_operator(corpora.vr_pairs)
        self._noise = NoiseParams.from_config(config.noise)
        self._ranges = AugmentRanges.from_config(config.augment) if config.augment.enabled else None

    def start(self) -> None:
        self._thread = threading.Thread(target=self._worker, daemon=True, name="sample-loader")
        self._thread.start()

    def stop(self, timeout: float = 5.0) -> None:
        self._stop_event.set()
        while True:
            try:
                self._queue.get_nowait()
            except queue.Empty:
                break
        if self._thread:
            self._thread.join(timeout=timeout)
            if self._thread.is_alive():
                logger.warning("Sample loader thread did not stop within timeout")

    def _make_batch(self, step: int) -> List[TrainingSample]:
        tc = self.config.training
        batch = []
        for _ in range(tc.batch_size):
            if step >= self.finetune_from and tc.vr_mix > 0:
                source = finetune_sampler(self.corpora.vr_pairs, self.corpora.synthetic, tc.vr_mix, self.rng)
            else:
                source = "synth"
            if source == "vr":
                batch.append(sample_vr(self._groups, tc.n_sources, self.rng))
            else:
                batch.append(sample_one(self.corpora.synthetic, tc.n_sources, self._noise, self.rng, self._ranges))
        return batch

    def _put(self, item: Any) -> bool:
        while not self._stop_event.is_set():
            try:
                self._queue.put(item, timeout=0.5)
                return True
            except queue.Full:
                continue
        return False

    def _worker(self) -> None:
        for step in range(self.steps):
            if self._stop_event.is_set():
                return
            try:
                batch = self._make_batch(step)
            except Exception as e:
                logger.error(f"Sample loader failed at step {step}: {e}", exc_info=True)
                self._put(e)
                return
            if not self._put(batch):
                return

    def get(self) -> List[TrainingSample]:
        while True:
            try:
                item = self._queue.get(timeout=0.5)
            except queue.Empty:
                if self._thread is not None and not self._thread.is_alive() and self._queue.empty():
                    raise TrainingError("sample loader stopped before producing all batches")
                continue
            if isinstance(item, Exception):
                raise item
            return item


def _checkpoint(generator: FaceGenerator, out_dir: Optional[Path], name: str) -> None:
    if out_dir is not None:
        write_checkpoint_file(out_dir / name, generator.state_entries())


def train(
    config: Config,
    corpora: TrainingCorpora,
    generator: Optional[FaceGenerator] = None,
    out_dir: Optional[Union[str, Path]] = None,
    finetune: bool = False,
) -> Tuple[FaceGenerator, TrainingLog]:
    """Run the training schedule.

    Phase 1 (steps < phase1_steps, skipped when ``finetune``) trains encoder and
    decoder with the gate open. Phase 2 trains every parameter with the mouth
    gate active and mixes in VR-pair samples at rate ``vr_mix``.

    Args:
        config: Full configuration
        corpora: Training corpora
        generator: Model to continue from (fresh from the seed otherwise)
        out_dir: Directory for checkpoints and ``train_log.jsonl``
        finetune: Start directly in phase 2

    Returns:
        Tuple of (trained generator, training log)

    Raises:
        CorpusError: On unusable corpora
        TrainingError: When the loss becomes non-finite
    """
    tc = config.training
    validate_corpus(corpora.synthetic, tc.n_sources)
    if tc.vr_mix > 0 and not corpora.vr_pairs:
        raise CorpusError("vr_mix > 0 but no VR-pair records were given")

    generator = generator or FaceGenerator.from_config(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    phase1_end = 0 if finetune else min(tc.phase1_steps, tc.steps)

    optimizers = {
        1: SGD(generator.phase_parameters(1), tc.learning_rate, tc.momentum),
        2: SGD(generator.phase_parameters(2), tc.learning_rate, tc.momentum),
    }
    log = TrainingLog()
    log_file = open(out / "train_log.jsonl", "w", encoding="utf-8") if out is not None else None
    loader = SampleLoader(config, corpora, np.random.default_rng(config.seed), tc.steps, phase1_end)
    logger.info(
        f"TRAIN_START: steps={tc.steps}, phase1={phase1_end}, n_sources={tc.n_sources}, "
        f"batch={tc.batch_size}, lr={tc.learning_rate}, vr_mix={tc.vr_mix}"
    )

    loader.start()
    try:
        for step in range(tc.steps):
            phase = 1 if step < phase1_end else 2
            batch = loader.get()
            generator.zero_grad()
            try:
                loss = None
                for sample in batch:
                    weights = generator.attend([s.keypoints for s in sample.sources], sample.driving.keypoints)
                    pred = generator.forward(
                        sample.sources, sample.driving.keypoints, sample.guidance, weights, open_gate=(phase == 1)
                    )
                    term = reconstruction_loss(pred, sample.driving.image)
                    loss = term if loss is None else loss + term
                loss = loss * (1.0 / len(batch))
                backward(loss)
            except NumericalError as e:
                raise TrainingError(f"loss became non-finite at step {step}: {e}", step, log.losses()[-10:]) from e

            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss became non-finite at step {step}", step, log.losses()[-10:])
            optimizers[phase].step()

            record = {"step": step, "loss": value, "vr_sample": any(s.vr_sample for s in batch)}
            log.records.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            logger.debug(f"TRAIN_STEP: step={step}, phase={phase}, loss={value:.5f}")

            if (step + 1) % tc.checkpoint_every == 0:
                _checkpoint(generator, out, f"step_{step + 1:06d}.facc")
    finally:
        loader.stop()
        if log_file is not None:
            log_file.close()

    _checkpoint(generator, out, "final.facc")
    losses = log.losses()
    if losses:
        logger.info(f"TRAIN_DONE: steps={len(losses)}, first_loss={losses[0]:.5f}, last_loss={losses[-1]:.5f}")
    else:
        logger.info("TRAIN_DONE: steps=0, wrote initial checkpoint")
    return generator, log
