"""Per-frame inference: mouth frame + enrolment -> synthesized operator face."""

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.attention import AttentionWeights
from app.config import Config
from app.corpus import Frame, MouthFrame
from app.enrolment import EnrolmentRecord
from app.errors import StageError, stage
from app.generator import FaceGenerator
from app.metrics import tcf_filter
from app.mouth_guidance import inference_guidance
from app.retrieval import retrieve
from app.tensorcore import Tensor
from app.vision.keypoints import KeypointSet
from app.vision.motion import MotionModel, estimate_grid
from app.vision.projection import Gaze, apply_projection, construct_driving

logger = logging.getLogger(__name__)

DEFAULT_GAZE: Gaze = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class InferenceOptions:
    """How sources are assembled and weighted.

    Attributes:
        retrieval: Append the retrieved expression image as the last source
        a_max: Upper bound of the retrieved source's attention weight
        hard_switch: Give the retrieved source all the weight
        tcf: Low-pass the retrieved image over time
        tcf_alpha: Blend weight of the current retrieved image
        open_gate: Bypass the mouth gate
        single_source: Use the appearance source alone
        eye_radius: Pupil displacement for a unit gaze
        tcf_regularization: TPS smoothing of the grid that carries the filter state
    """
    retrieval: bool = False
    a_max: Optional[float] = 0.25
    hard_switch: bool = False
    tcf: bool = False
    tcf_alpha: float = 0.5
    open_gate: bool = False
    single_source: bool = False
    eye_radius: float = 0.04
    tcf_regularization: float = 0.0

    def __post_init__(self):
        if self.a_max is not None and not 0.0 < self.a_max <= 1.0:
            raise ValueError(f"a_max must be in (0, 1], got {self.a_max}")

    @classmethod
    def from_config(cls, config: Config) -> "InferenceOptions":
        return cls(
            retrieval=config.retrieval.enabled,
            a_max=config.attention.a_max,
            tcf=config.retrieval.tcf,
            tcf_alpha=config.eval.tcf_alpha,
            eye_radius=config.geometry.eye_radius,
            tcf_regularization=config.motion.metric_regularization,
        )


@dataclass(frozen=True)
class InferenceState:
    """Carried between frames; every step returns a new state."""
    frame_index: int = 0
    tcf_image: Optional[np.ndarray] = None
    tcf_kps: Optional[KeypointSet] = None
    retrieval_fallbacks: int = 0
    last_retrieved: Optional[int] = None


@dataclass
class PreparedFrame:
    """Geometry-stage output consumed by the network stage."""
    index: int
    driving: KeypointSet
    sources: List[Frame]
    features: List[Tensor]
    weights: AttentionWeights
    guidance: Tensor
    retrieved_index: Optional[int] = None


class Animator:
    """Enrolment + generator with the fixed-source features encoded once."""

    def __init__(self, enrolment: EnrolmentRecord, generator: FaceGenerator, options: Optional[InferenceOptions] = None):
        self.enrolment = enrolment
        self.generator = generator
        self.options = options or InferenceOptions()
        fixed = enrolment.sources[:1] if self.options.single_source else enrolment.sources
        self.fixed_sources: List[Frame] = list(fixed)
        self.fixed_features: List[Tensor] = generator.encode_sources(self.fixed_sources)
        self.tcf_motion = MotionModel(generator.motion.kernel, self.options.tcf_regularization)

    def _retrieve(self, projected: np.ndarray, state: InferenceState, index: int):
        store = self.enrolment.store
        if store is None:
            logger.warning(f"RETRIEVAL_FALLBACK: frame={index}, no expression store, using fixed sources")
            return None, replace(state, retrieval_fallbacks=state.retrieval_fallbacks + 1)
        try:
            with stage("retrieve", index):
                hit = retrieve(store, projected)
        except StageError as e:
            logger.warning(f"RETRIEVAL_FALLBACK: frame={index}, {e}")
            return None, replace(state, retrieval_fallbacks=state.retrieval_fallbacks + 1)
        return hit, replace(state, last_retrieved=hit.index)

    def prepare(self, frame: MouthFrame, state: InferenceState) -> Tuple[PreparedFrame, InferenceState]:
        """Projection, retrieval, driving keypoints, attention weights and guidance."""
        opts = self.options
        index = frame.index
        appearance = self.enrolment.appearance

        with stage("project", index):
            projected = apply_projection(self.enrolment.projection, frame.keypoints)

        hit = None
        if opts.retrieval and not opts.single_source:
            hit, state = self._retrieve(projected, state, index)

        with stage("drive", index):
            gaze = frame.gaze if frame.gaze is not None else DEFAULT_GAZE
            driving = construct_driving(
                appearance.keypoints, frame.keypoints, self.enrolment.projection, gaze, opts.eye_radius
            )

        sources = list(self.fixed_sources)
        features = list(self.fixed_features)
        retrieved_index = None
        if hit is not None:
            image = hit.image
            if opts.tcf:
                with stage("tcf", index):
                    grid = None
                    if state.tcf_image is not None and state.tcf_kps is not None:
                        grid = estimate_grid(self.tcf_motion, state.tcf_kps, driving, image.shape[1:])
                    image = tcf_filter(image, state.tcf_image, grid, opts.tcf_alpha)
                state = replace(state, tcf_image=image, tcf_kps=driving)
            sources.append(Frame(image, hit.keypoints))
            with stage("encode", index):
                features.append(self.generator.encode(image))
            retrieved_index = len(sources) - 1

        with stage("attend", index):
            if retrieved_index is not None and opts.hard_switch:
                weights = AttentionWeights.one_hot(len(sources), retrieved_index)
            elif retrieved_index is not None:
                weights = self.generator.attend(
                    [s.keypoints for s in sources], driving, a_max=opts.a_max, retrieved_index=retrieved_index
                )
            else:
                weights = self.generator.attend([s.keypoints for s in sources], driving)

        with stage("guidance", index):
            guidance = inference_guidance(frame.image, frame.keypoints, self.enrolment.projection)

        prepared = PreparedFrame(index, driving, sources, features, weights, guidance, retrieved_index)
        return prepared, replace(state, frame_index=index + 1)

    def synthesize(self, prepared: PreparedFrame) -> np.ndarray:
        """Network stage: deform, aggregate, gate, decode."""
        out = self.generator.forward(
            prepared.sources,
            prepared.driving,
            prepared.guidance,
            prepared.weights,
            open_gate=self.options.open_gate,
            source_features=prepared.features,
            frame_index=prepared.index,
        )
        return out.data.copy()

    def step(self, frame: MouthFrame, state: InferenceState) -> Tuple[np.ndarray, InferenceState]:
        prepared, state = self.prepare(frame, state)
        return self.synthesize(prepared), state


def infer_step(
    enrolment: EnrolmentRecord,
    generator: FaceGenerator,
    mouth_frame: np.ndarray,
    mouth_kps: np.ndarray,
    gaze: Optional[Sequence[float]],
    state: Optional[InferenceState] = None,
    options: Optional[InferenceOptions] = None,
) -> Tuple[np.ndarray, InferenceState]:
    """One frame of the animation loop.

    Returns:
        Tuple of (output image (C, H, W), next state)

    Raises:
        StageError: Naming the failed stage and frame
    """
    state = state or InferenceState()
    animator = Animator(enrolment, generator, options)
    frame = MouthFrame(state.frame_index, mouth_frame, np.asarray(mouth_kps, dtype=np.float64),
                       tuple(gaze) if gaze is not None else None)
    return animator.step(frame, state)


def run_sequence(animator: Animator, frames: Sequence[MouthFrame]) -> List[np.ndarray]:
    """Sequential loop over a whole stream."""
    state = InferenceState()
    outputs = []
    for frame in frames:
        image, state = animator.step(frame, state)
        outputs.append(image)
    return outputs
