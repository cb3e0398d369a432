"""Keypoint-driven face generator with multi-source attention and mouth gating."""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.attention import (
    AttentionWeights,
    SimilarityProjection,
    aggregate_features,
    attention_scores,
    attention_weights,
    similarity_driving,
    similarity_source,
)
from app.config import Config
from app.corpus import Frame
from app.errors import ShapeError, stage
from app.mouth_guidance import GatingNetwork, MouthEncoder, encode_mouth, gate
from app.tensorcore import Conv2d, Module, Tensor, relu, sigmoid, upsample_nearest
from app.tensorcore.checkpoint import read_checkpoint_file
from app.vision.keypoints import FACE68_VR31, KeypointSet, distance_tensor
from app.vision.masks import LowerFaceMask, lower_face_mask, scaled_dilation
from app.vision.motion import MotionModel, deform_features, estimate_grid

logger = logging.getLogger(__name__)

ImageLike = Union[Tensor, np.ndarray]


class SourceEncoder(Module):
    """Appearance encoder E: C x H x W -> C_f x H/4 x W/4."""

    def __init__(self, image_channels: int, feature_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(image_channels, feature_channels, 3, stride=2, rng=rng)
        self.conv2 = Conv2d(feature_channels, feature_channels, 3, stride=2, rng=rng)
        self.conv3 = Conv2d(feature_channels, feature_channels, 3, stride=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.conv1(x))
        h = relu(self.conv2(h))
        return relu(self.conv3(h))


class Decoder(Module):
    """Decoder G: C_f x H/4 x W/4 -> C x H x W in [0, 1], nearest upsampling."""

    def __init__(self, feature_channels: int, image_channels: int, rng: np.random.Generator):
        self.conv1 = Conv2d(feature_channels, feature_channels, 3, rng=rng)
        self.conv2 = Conv2d(feature_channels, feature_channels, 3, rng=rng)
        self.conv3 = Conv2d(feature_channels, image_channels, 3, rng=rng)

    def __call__(self, f: Tensor) -> Tensor:
        h = relu(self.conv1(f))
        h = relu(self.conv2(upsample_nearest(h, 2)))
        return sigmoid(self.conv3(upsample_nearest(h, 2)))


class FaceGenerator(Module):
    """Encoder, decoder, mouth encoder, gate and attention projections.

    Parameter names (``enc.*``, ``dec.*``, ``mouth_enc.*``, ``gate.*``,
    ``attn.W_S``, ``attn.W_D``) are the checkpoint entry names.
    """

    def __init__(
        self,
        n_vr: int = FACE68_VR31.n_vr,
        feature_channels: int = 32,
        gate_hidden: int = 16,
        image_channels: int = 3,
        attention_dim: int = 256,
        motion: Optional[MotionModel] = None,
        mask_dilation: int = 3,
        mask_reference_resolution: int = 64,
        seed: int = 0,
    ):
        """
        Initialize all sub-networks from one seed.

        Args:
            n_vr: VR keypoint count of the layout
            feature_channels: Width of encoder/decoder features
            gate_hidden: Hidden width of the gating network
            image_channels: Image channel count
            attention_dim: Similarity vector length
            motion: Deformation grid estimator
            mask_dilation: B_LF dilation at the reference resolution
            mask_reference_resolution: Image width the dilation refers to
            seed: Init seed
        """
        rng = np.random.default_rng(seed)
        self.enc = SourceEncoder(image_channels, feature_channels, rng)
        self.dec = Decoder(feature_channels, image_channels, rng)
        self.mouth_enc = MouthEncoder(image_channels, feature_channels, rng)
        self.gate = GatingNetwork(feature_channels, gate_hidden, rng)
        self.attn = SimilarityProjection(n_vr, attention_dim, rng)
        self._motion = motion or MotionModel()
        self._mask_dilation = mask_dilation
        self._mask_reference = mask_reference_resolution
        self._image_channels = image_channels

    @classmethod
    def from_config(cls, config: Config) -> "FaceGenerator":
        return cls(
            n_vr=FACE68_VR31.n_vr,
            feature_channels=config.network.feature_channels,
            gate_hidden=config.network.gate_hidden,
            image_channels=config.network.image_channels,
            attention_dim=config.attention.dim,
            motion=MotionModel(config.motion.kernel, config.motion.regularization),
            mask_dilation=config.geometry.mask_dilation,
            mask_reference_resolution=config.geometry.mask_reference_resolution,
            seed=config.seed,
        )

    @property
    def motion(self) -> MotionModel:
        return self._motion

    def phase_parameters(self, phase: int):
        """Trainable parameters: encoder/decoder in phase 1, everything in phase 2."""
        if phase == 1:
            return self.enc.parameters() + self.dec.parameters()
        return self.parameters()

    def encode(self, image: ImageLike) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 3 or x.shape[0] != self._image_channels or x.shape[1] % 4 or x.shape[2] % 4:
            raise ShapeError(
                f"source image must be {self._image_channels}xHxW with H, W divisible by 4, got {x.shape}"
            )
        return self.enc(x)

    def encode_sources(self, sources: Sequence[Frame]) -> List[Tensor]:
        return [self.encode(s.image) for s in sources]

    def attend(
        self,
        source_kps: Sequence[KeypointSet],
        driving_kps: KeypointSet,
        a_max: Optional[float] = None,
        retrieved_index: Optional[int] = None,
    ) -> AttentionWeights:
        """Attention weights of the sources for the driving keypoints."""
        x_D = similarity_driving(distance_tensor(driving_kps), self.attn)
        x_S = [similarity_source(distance_tensor(k), self.attn) for k in source_kps]
        scores = attention_scores(x_S, x_D)
        return attention_weights(scores, a_max=a_max, retrieved_index=retrieved_index)

    def lower_face_mask(self, driving_kps: KeypointSet, resolution: Tuple[int, int], image_width: int) -> LowerFaceMask:
        dilation = scaled_dilation(self._mask_dilation, self._mask_reference, image_width)
        feature_dilation = max(0, int(round(dilation * resolution[1] / image_width)))
        return lower_face_mask(driving_kps.vr(), resolution, feature_dilation)

    def forward(
        self,
        sources: Sequence[Frame],
        driving_kps: KeypointSet,
        guidance: Optional[ImageLike],
        weights: AttentionWeights,
        open_gate: bool = False,
        source_features: Optional[Sequence[Tensor]] = None,
        mask_override: Optional[LowerFaceMask] = None,
        frame_index: Optional[int] = None,
    ) -> Tensor:
        """Synthesize the driving frame.

        Args:
            sources: Source frames, appearance source first
            driving_kps: Driving keypoints
            guidance: Warped mouth image I'_M (ignored when ``open_gate``)
            weights: Attention weights, one per source
            open_gate: Skip the mouth gate (m_f = 1); used in the first training phase
            source_features: Precomputed E(I_S) per source
            mask_override: Replace B_LF (constant masks in tests)
            frame_index: Frame being generated, for error reports

        Returns:
            Output image (C, H, W) in [0, 1]

        Raises:
            StageError: Naming the failed stage
        """
        if not sources:
            raise ShapeError("generator needs at least one source")
        if len(sources) != len(weights):
            raise ShapeError(f"{len(sources)} sources but {len(weights)} attention weights")
        H, W = sources[0].image.shape[-2:]

        with stage("encode", frame_index):
            feats = list(source_features) if source_features is not None else self.encode_sources(sources)
            if len(feats) != len(sources):
                raise ShapeError(f"{len(feats)} source feature maps for {len(sources)} sources")
        h, w = feats[0].shape[1:]

        with stage("deform", frame_index):
            deformed = [
                deform_features(f, estimate_grid(self._motion, s.keypoints, driving_kps, (h, w)))
                for f, s in zip(feats, sources)
            ]

        with stage("mask", frame_index):
            mask = mask_override if mask_override is not None else self.lower_face_mask(driving_kps, (h, w), W)

        with stage("aggregate", frame_index):
            aggregated = aggregate_features(deformed, weights, mask)

        with stage("gate", frame_index):
            if open_gate:
                f = aggregated
            else:
                if guidance is None:
                    raise ShapeError("mouth guidance is required unless the gate is open")
                E_M = encode_mouth(guidance, self.mouth_enc)
                f, _ = gate(E_M, aggregated, self.gate)

        with stage("decode", frame_index):
            return self.dec(f)


def load_generator(config: Config, path: Optional[Union[str, Path]] = None) -> FaceGenerator:
    """Generator built from ``config``, with weights from a checkpoint file when given.

    Raises:
        CheckpointFormatError: If the file does not match the configured architecture
    """
    generator = FaceGenerator.from_config(config)
    if path is None:
        logger.warning("No checkpoint given, using freshly initialised weights")
        return generator
    generator.load_entries(read_checkpoint_file(path))
    logger.info(f"CHECKPOINT_LOADED: path={path}, parameters={len(generator.parameters())}")
    return generator
