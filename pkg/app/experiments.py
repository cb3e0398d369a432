"""Ablation variants, held-out quality evaluation and the temporal-consistency experiment."""

import logging
import re
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.config import Config, apply_overrides
from app.corpus import OperatorSession
from app.enrolment import EnrolmentRecord, enroll
from app.errors import ConfigError
from app.generator import FaceGenerator
from app.inference import Animator, InferenceOptions, InferenceState
from app.metrics import PerceptualProxy, masked_metrics, temporal_inconsistency
from app.vision.keypoints import KeypointSet
from app.vision.masks import lower_face_mask, scaled_dilation
from app.vision.motion import MotionModel

logger = logging.getLogger(__name__)

_VARIANT_RE = re.compile(
    r"^(?:(?P<plain>full|no_finetune|no_guidance|single_source|fixed|hard_switch|hard_switch_tcf)"
    r"|retrieval_amax_(?P<amax>\d+(?:\.\d+)?)"
    r"|skip(?P<skip>\d+))$"
)

QUALITY_VARIANTS = ("full", "no_finetune", "no_guidance", "single_source")
TEMPORAL_VARIANTS = ("fixed", "retrieval_amax_0.25", "retrieval_amax_0.5", "hard_switch", "hard_switch_tcf")


@dataclass(frozen=True)
class Variant:
    """How one evaluated configuration differs from the full model.

    Attributes:
        name: Row name
        model: Key of the generator to use (``"full"`` or ``"no_finetune"``)
        retrieval: Append the retrieved expression image
        a_max: Retrieved-source bound (None = configured value)
        hard_switch: Retrieved source takes all the weight
        tcf: Temporal consistency filter on the retrieved image
        open_gate: No mouth guidance
        single_source: Appearance source alone
        skip: Expression store subsampling
    """
    name: str
    model: str = "full"
    retrieval: bool = False
    a_max: Optional[float] = None
    hard_switch: bool = False
    tcf: bool = False
    open_gate: bool = False
    single_source: bool = False
    skip: int = 1


def parse_variant(name: str) -> Variant:
    """Variant from its row name.

    Raises:
        ConfigError: On unknown names or out-of-range parameters
    """
    m = _VARIANT_RE.match(name)
    if m is None:
        raise ConfigError(f"unknown variant '{name}'")
    plain = m.group("plain")
    if plain in ("full", "fixed"):
        return Variant(name)
    if plain == "no_finetune":
        return Variant(name, model="no_finetune")
    if plain == "no_guidance":
        return Variant(name, open_gate=True)
    if plain == "single_source":
        return Variant(name, open_gate=True, single_source=True)
    if plain == "hard_switch":
        return Variant(name, retrieval=True, hard_switch=True)
    if plain == "hard_switch_tcf":
        return Variant(name, retrieval=True, hard_switch=True, tcf=True)
    if m.group("amax") is not None:
        a_max = float(m.group("amax"))
        if not 0.0 < a_max <= 1.0:
            raise ConfigError(f"variant '{name}': a_max must be in (0, 1]")
        return Variant(name, retrieval=True, a_max=a_max)
    skip = int(m.group("skip"))
    if skip < 1:
        raise ConfigError(f"variant '{name}': skip must be >= 1")
    return Variant(name, retrieval=True, skip=skip)


@dataclass
class VariantResult:
    variant: str
    frames: int
    psnr: float
    ssim: float
    perceptual: float
    temporal: Optional[float] = None

    def to_row(self) -> Dict[str, object]:
        row = {
            "variant": self.variant,
            "frames": self.frames,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "perceptual": self.perceptual,
        }
        if self.temporal is not None:
            row["temporal"] = self.temporal
        return row


class EnrolmentCache:
    """One enrolment per (retrieval, skip) combination of a session."""

    def __init__(self, session: OperatorSession, config: Config):
        self.session = session
        self.config = config
        self._records: Dict[Tuple[bool, int], EnrolmentRecord] = {}

    def get(self, retrieval: bool, skip: int) -> EnrolmentRecord:
        key = (retrieval, skip if retrieval else 1)
        if key not in self._records:
            cfg = apply_overrides(self.config, {"retrieval.enabled": retrieval, "retrieval.skip": key[1]})
            self._records[key] = enroll(self.session.mouth, self.session.clip.frames, cfg)
        return self._records[key]


def variant_options(variant: Variant, config: Config) -> InferenceOptions:
    base = InferenceOptions.from_config(config)
    return replace(
        base,
        retrieval=variant.retrieval,
        a_max=variant.a_max if variant.a_max is not None else config.attention.a_max,
        hard_switch=variant.hard_switch,
        tcf=variant.tcf,
        open_gate=variant.open_gate,
        single_source=variant.single_source,
    )


def animate(animator: Animator, session: OperatorSession) -> Tuple[List[np.ndarray], List[KeypointSet]]:
    """Outputs and the driving keypoints they were generated for."""
    state = InferenceState()
    outputs, driving = [], []
    for frame in session.mouth:
        prepared, state = animator.prepare(frame, state)
        outputs.append(animator.synthesize(prepared))
        driving.append(prepared.driving)
    if state.retrieval_fallbacks:
        logger.warning(f"Retrieval fell back to fixed sources on {state.retrieval_fallbacks} frame(s)")
    return outputs, driving


def _metric_dilation(config: Config, width: int) -> int:
    return scaled_dilation(config.geometry.mask_dilation, config.geometry.mask_reference_resolution, width)


def quality(
    outputs: Sequence[np.ndarray],
    truth: OperatorSession,
    config: Config,
    proxy: Optional[PerceptualProxy] = None,
) -> Tuple[float, float, float]:
    """Mean lower-face PSNR, SSIM and perceptual distance against the rendered ground truth."""
    frames = truth.clip.frames
    H, W = frames[0].image.shape[1:]
    proxy = proxy or PerceptualProxy(config.eval.perceptual_seed, config.eval.perceptual_channels, frames[0].image.shape[0])
    dilation = _metric_dilation(config, W)
    reports = [
        masked_metrics(out, f.image, lower_face_mask(f.keypoints.vr(), (H, W), dilation), proxy, config.eval.psnr_cap)
        for out, f in zip(outputs, frames)
    ]
    return (
        float(np.mean([r.psnr for r in reports])),
        float(np.mean([r.ssim for r in reports])),
        float(np.mean([r.perceptual for r in reports])),
    )


def evaluate_variants(
    generators: Mapping[str, FaceGenerator],
    enrolment_session: OperatorSession,
    test_session: OperatorSession,
    config: Config,
    variants: Sequence[str] = QUALITY_VARIANTS,
    temporal: bool = False,
) -> List[VariantResult]:
    """Animate the held-out stream with every variant and score it.

    Args:
        generators: Trained models by key (``"full"``, optionally ``"no_finetune"``)
        enrolment_session: Capture used for enrolment
        test_session: Held-out stream of the same operator with ground truth
        config: Configuration
        variants: Variant names
        temporal: Also compute the temporal inconsistency of each output stream

    Returns:
        One result per variant whose model is available
    """
    cache = EnrolmentCache(enrolment_session, config)
    proxy = PerceptualProxy(config.eval.perceptual_seed, config.eval.perceptual_channels,
                            config.network.image_channels)
    motion = MotionModel(config.motion.kernel, config.motion.metric_regularization)
    results = []
    for name in variants:
        variant = parse_variant(name)
        generator = generators.get(variant.model)
        if generator is None:
            logger.warning(f"Skipping variant '{name}': no '{variant.model}' model given")
            continue
        enrolment = cache.get(variant.retrieval, variant.skip)
        animator = Animator(enrolment, generator, variant_options(variant, config))
        outputs, driving = animate(animator, test_session)
        psnr, ssim, perceptual = quality(outputs, test_session, config, proxy)
        tmp = None
        if temporal:
            W = outputs[0].shape[2]
            tmp = temporal_inconsistency(outputs, driving, motion, proxy, _metric_dilation(config, W))
        results.append(VariantResult(name, len(outputs), psnr, ssim, perceptual, tmp))
        logger.info(
            f"VARIANT_DONE: variant={name}, psnr={psnr:.3f}, ssim={ssim:.4f}, perceptual={perceptual:.5f}"
            + (f", temporal={tmp:.5f}" if tmp is not None else "")
        )
    return results


def temporal_ordering(
    generator: FaceGenerator,
    enrolment_session: OperatorSession,
    stream_session: OperatorSession,
    config: Config,
    variants: Sequence[str] = TEMPORAL_VARIANTS,
) -> Dict[str, float]:
    """Temporal inconsistency of each variant on one stream."""
    cache = EnrolmentCache(enrolment_session, config)
    proxy = PerceptualProxy(config.eval.perceptual_seed, config.eval.perceptual_channels,
                            config.network.image_channels)
    motion = MotionModel(config.motion.kernel, config.motion.metric_regularization)
    values = {}
    for name in variants:
        variant = parse_variant(name)
        animator = Animator(cache.get(variant.retrieval, variant.skip), generator, variant_options(variant, config))
        outputs, driving = animate(animator, stream_session)
        values[name] = temporal_inconsistency(outputs, driving, motion, proxy, _metric_dilation(config, outputs[0].shape[2]))
        logger.info(f"TEMPORAL: variant={name}, value={values[name]:.6f}")
    return values


def normalized(values: Mapping[str, float], reference: str = "fixed") -> Dict[str, float]:
    ref = values[reference]
    if ref == 0:
        return {k: float("inf") if v else 1.0 for k, v in values.items()}
    return {k: v / ref for k, v in values.items()}


def ordering_holds(values: Mapping[str, float], chain: Sequence[str] = TEMPORAL_VARIANTS[:4]) -> bool:
    """True when the values are non-decreasing along ``chain``."""
    seq = [values[k] for k in chain]
    return all(a <= b for a, b in zip(seq, seq[1:]))


def tcf_reduction(values: Mapping[str, float]) -> float:
    """Relative drop of the hard-switch value when the filter is applied."""
    base = values["hard_switch"]
    return 0.0 if base == 0 else 1.0 - values["hard_switch_tcf"] / base
