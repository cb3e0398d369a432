"""Mouth-camera guidance: training-time emulation, encoding and the soft gate."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from app.config import NoiseConfig
from app.errors import ShapeError
from app.tensorcore import Conv2d, Module, Tensor, clip, concat, relu, sigmoid
from app.vision.keypoints import PointsLike, as_vr_points
from app.vision.projection import ProjectionMap, apply_projection
from app.vision.triangulation import warp_psi

logger = logging.getLogger(__name__)

ImageLike = Union[Tensor, np.ndarray]

# |logit| bound applied before the sigmoid
GATE_LOGIT_LIMIT = 15.0


@dataclass(frozen=True)
class NoiseParams:
    """Perturbation strengths used to emulate mouth-camera guidance.

    Attributes:
        sigma_scale: Std of the keypoint scale factor (mean 1)
        sigma_trans: Std of the global keypoint translation
        sigma_kp: Std of independent per-keypoint offsets
        read_noise_sigma: Additive Gaussian image noise
        shot_noise_gain: Signal-dependent noise gain (std = gain * sqrt(I))
    """
    sigma_scale: float = 0.05
    sigma_trans: float = 0.02
    sigma_kp: float = 0.01
    read_noise_sigma: float = 0.02
    shot_noise_gain: float = 0.05

    @classmethod
    def from_config(cls, config: NoiseConfig) -> "NoiseParams":
        return cls(
            sigma_scale=config.sigma_scale,
            sigma_trans=config.sigma_trans,
            sigma_kp=config.sigma_kp,
            read_noise_sigma=config.read_noise_sigma,
            shot_noise_gain=config.shot_noise_gain,
        )

    @classmethod
    def zero(cls) -> "NoiseParams":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)

    @property
    def keypoint_identity(self) -> bool:
        return self.sigma_scale == 0 and self.sigma_trans == 0 and self.sigma_kp == 0

    @property
    def image_identity(self) -> bool:
        return self.read_noise_sigma == 0 and self.shot_noise_gain == 0


def image_noise(image: ImageLike, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Read plus shot noise, clipped to [0, 1]. Returns a float32 copy."""
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if params.image_identity:
        return img.copy()
    noisy = img.astype(np.float64)
    if params.read_noise_sigma > 0:
        noisy = noisy + rng.normal(0.0, params.read_noise_sigma, size=img.shape)
    if params.shot_noise_gain > 0:
        noisy = noisy + rng.normal(0.0, 1.0, size=img.shape) * params.shot_noise_gain * np.sqrt(np.clip(img, 0.0, None))
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)


def keypoint_noise(kps: PointsLike, params: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Random scale about the centroid, global shift and per-keypoint jitter.

    Zero strengths return an exact copy.
    """
    points = as_vr_points(kps)
    if params.keypoint_identity:
        return points.copy()
    center = points.mean(axis=0)
    scale = rng.normal(1.0, params.sigma_scale) if params.sigma_scale > 0 else 1.0
    shift = rng.normal(0.0, params.sigma_trans, size=2) if params.sigma_trans > 0 else np.zeros(2)
    jitter = rng.normal(0.0, params.sigma_kp, size=points.shape) if params.sigma_kp > 0 else 0.0
    return scale * (points - center) + center + shift + jitter


def emulate_training_guidance(
    driving_image: ImageLike,
    driving_kps_vr: PointsLike,
    params: NoiseParams,
    rng: np.random.Generator,
) -> Tensor:
    """I'_M = Psi(I_D + noise, K1, K2) with two independent keypoint perturbations.

    With all strengths zero this is the lower-face crop of the driving frame.
    """
    noisy = image_noise(driving_image, params, rng)
    k1 = keypoint_noise(driving_kps_vr, params, rng)
    k2 = keypoint_noise(driving_kps_vr, params, rng)
    return warp_psi(noisy, k1, k2)


def inference_guidance(mouth_image: ImageLike, mouth_kps: PointsLike, projection: ProjectionMap) -> Tensor:
    """Mouth image warped from K_M to the projected keypoints Pi(K_M)."""
    return warp_psi(mouth_image, mouth_kps, apply_projection(projection, mouth_kps))


class MouthEncoder(Module):
    """Two stride-2 convolutions and a 3x3 head: C x H x W -> C_f x H/4 x W/4."""

    def __init__(self, image_channels: int = 3, feature_channels: int = 32, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv1 = Conv2d(image_channels, feature_channels, 3, stride=2, rng=rng)
        self.conv2 = Conv2d(feature_channels, feature_channels, 3, stride=2, rng=rng)
        self.conv3 = Conv2d(feature_channels, feature_channels, 3, stride=1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.conv1(x))
        h = relu(self.conv2(h))
        return self.conv3(h)


def encode_mouth(warped_mouth: ImageLike, encoder: MouthEncoder) -> Tensor:
    """E_M = encoder(I'_M).

    Raises:
        ShapeError: If the image size is not divisible by 4
    """
    x = warped_mouth if isinstance(warped_mouth, Tensor) else Tensor(warped_mouth)
    if x.ndim != 3 or x.shape[1] % 4 or x.shape[2] % 4:
        raise ShapeError(f"mouth guidance must be CxHxW with H, W divisible by 4, got {x.shape}")
    return encoder(x)


class GatingNetwork(Module):
    """phi: 3x3 conv over [E_M, aggregated], residual 3x3 block, 1x1 head to one logit map."""

    def __init__(self, feature_channels: int = 32, hidden: int = 16, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv_in = Conv2d(2 * feature_channels, hidden, 3, rng=rng)
        self.conv_res = Conv2d(hidden, hidden, 3, rng=rng)
        self.conv_out = Conv2d(hidden, 1, 1, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(self.conv_in(x))
        h = h + relu(self.conv_res(h))
        return self.conv_out(h)


def gate(E_M: Tensor, aggregated: Tensor, network: GatingNetwork) -> Tuple[Tensor, Tensor]:
    """f = sigmoid(phi([E_M, aggregated])) * aggregated.

    Returns:
        Tuple of (gated features f, mask m_f in (0, 1))

    Raises:
        ShapeError: If the two feature maps differ in shape
    """
    if E_M.shape != aggregated.shape:
        raise ShapeError(f"mouth features {E_M.shape} do not match aggregated features {aggregated.shape}")
    logits = clip(network(concat([E_M, aggregated], axis=0)), -GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT)
    m_f = sigmoid(logits)
    return m_f * aggregated, m_f
