"""Masked image-quality metrics, temporal inconsistency and the temporal consistency filter."""

import logging
import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import cv2
import numpy as np

from app.errors import ShapeError
from app.tensorcore import Tensor, conv2d, relu
from app.vision.keypoints import KeypointSet
from app.vision.masks import LowerFaceMask, lower_face_mask
from app.vision.motion import DeformationGrid, MotionModel, deform_features, estimate_grid

logger = logging.getLogger(__name__)

MaskLike = Union[LowerFaceMask, np.ndarray]

SSIM_WINDOW = (11, 11)
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    perceptual: float
    region: str = "lower-face"
    pixels: int = 0

    def to_dict(self):
        return asdict(self)


def _mask_array(mask: MaskLike, shape) -> np.ndarray:
    m = mask.mask if isinstance(mask, LowerFaceMask) else np.asarray(mask)
    m = m.astype(bool)
    if m.shape != tuple(shape):
        raise ShapeError(f"mask {m.shape} does not match image {tuple(shape)}")
    if not m.any():
        raise ShapeError("metric mask is empty")
    return m


def _image(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else x
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeError(f"expected a CxHxW image, got {arr.shape}")
    return arr


def psnr_masked(pred, target, mask: MaskLike, cap: float = 99.0) -> float:
    """10 log10(1 / MSE) over masked pixels; ``cap`` when the regions are identical."""
    p, t = _image(pred), _image(target)
    if p.shape != t.shape:
        raise ShapeError(f"images differ in shape: {p.shape} vs {t.shape}")
    m = _mask_array(mask, p.shape[1:])
    mse = float(((p - t) ** 2)[:, m].mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


def ssim_masked(pred, target, mask: MaskLike) -> float:
    """Gaussian-window SSIM on pre-masked images, averaged over mask pixels and channels."""
    p, t = _image(pred), _image(target)
    if p.shape != t.shape:
        raise ShapeError(f"images differ in shape: {p.shape} vs {t.shape}")
    m = _mask_array(mask, p.shape[1:])
    p = p * m
    t = t * m

    def blur(x: np.ndarray) -> np.ndarray:
        return cv2.GaussianBlur(x, SSIM_WINDOW, SSIM_SIGMA)

    scores = []
    for pc, tc in zip(p, t):
        mu_p, mu_t = blur(pc), blur(tc)
        var_p = blur(pc * pc) - mu_p ** 2
        var_t = blur(tc * tc) - mu_t ** 2
        cov = blur(pc * tc) - mu_p * mu_t
        ssim_map = ((2 * mu_p * mu_t + SSIM_C1) * (2 * cov + SSIM_C2)) / (
            (mu_p ** 2 + mu_t ** 2 + SSIM_C1) * (var_p + var_t + SSIM_C2)
        )
        scores.append(float(ssim_map[m].mean()))
    return float(np.mean(scores))


class PerceptualProxy:
    """Frozen, seeded three-layer random-convolution feature extractor."""

    def __init__(self, seed: int = 1234, channels: int = 8, in_channels: int = 3, layers: int = 3):
        rng = np.random.default_rng(seed)
        self.weights: List[Tensor] = []
        c_in = in_channels
        for _ in range(layers):
            std = math.sqrt(2.0 / (c_in * 9))
            self.weights.append(Tensor(rng.normal(0.0, std, size=(channels, c_in, 3, 3)), dtype=np.float64))
            c_in = channels

    def features(self, image: np.ndarray) -> List[np.ndarray]:
        h = Tensor(image, dtype=np.float64)
        out = []
        for w in self.weights:
            h = relu(conv2d(h, w, padding=1))
            out.append(h.data)
        return out

    def distance(self, pred, target, mask: MaskLike) -> float:
        """Mean squared feature difference inside the mask, averaged over layers."""
        p, t = _image(pred), _image(target)
        if p.shape != t.shape:
            raise ShapeError(f"images differ in shape: {p.shape} vs {t.shape}")
        m = _mask_array(mask, p.shape[1:])
        fp = self.features(p * m)
        ft = self.features(t * m)
        return float(np.mean([((a - b) ** 2)[:, m].mean() for a, b in zip(fp, ft)]))


def masked_metrics(
    pred,
    target,
    mask: MaskLike,
    proxy: Optional[PerceptualProxy] = None,
    psnr_cap: float = 99.0,
    region: str = "lower-face",
) -> MetricReport:
    """PSNR, SSIM and perceptual distance restricted to ``mask``.

    Pixels outside the mask never influence any of the three values.

    Raises:
        ShapeError: On shape mismatch or an empty mask
    """
    p, t = _image(pred), _image(target)
    m = _mask_array(mask, p.shape[1:])
    proxy = proxy or PerceptualProxy(in_channels=p.shape[0])
    return MetricReport(
        psnr=psnr_masked(p, t, m, psnr_cap),
        ssim=ssim_masked(p, t, m),
        perceptual=proxy.distance(p, t, m),
        region=region,
        pixels=int(m.sum()),
    )


def temporal_inconsistency(
    frames: Sequence[np.ndarray],
    kps: Sequence[KeypointSet],
    motion: Optional[MotionModel] = None,
    proxy: Optional[PerceptualProxy] = None,
    dilation: int = 3,
) -> float:
    """Mean perceptual distance between each frame and its predecessor warped onto it.

    Returns:
        Average over consecutive pairs

    Raises:
        ShapeError: If frames and keypoint sets differ in count
        ValueError: With fewer than two frames
    """
    if len(frames) != len(kps):
        raise ShapeError(f"{len(frames)} frames but {len(kps)} keypoint sets")
    if len(frames) < 2:
        raise ValueError(f"temporal inconsistency needs at least 2 frames, got {len(frames)}")
    motion = motion or MotionModel()
    first = _image(frames[0])
    proxy = proxy or PerceptualProxy(in_channels=first.shape[0])
    H, W = first.shape[1:]
    values = []
    for t in range(1, len(frames)):
        grid = estimate_grid(motion, kps[t - 1], kps[t], (H, W))
        warped = deform_features(Tensor(_image(frames[t - 1]), dtype=np.float64), grid).data
        mask = lower_face_mask(kps[t].vr(), (H, W), dilation)
        values.append(proxy.distance(warped, _image(frames[t]), mask))
    return float(np.mean(values))


def tcf_filter(
    retrieved_t: np.ndarray,
    prev_state: Optional[np.ndarray],
    grid: Optional[DeformationGrid],
    alpha: float,
) -> np.ndarray:
    """alpha * retrieved_t + (1 - alpha) * M[prev_state]; the first frame passes through."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"tcf alpha must be in (0, 1], got {alpha}")
    current = np.asarray(retrieved_t, dtype=np.float32)
    if prev_state is None:
        return current.copy()
    prev = Tensor(prev_state, dtype=np.float32)
    warped = prev.data if grid is None else deform_features(prev, grid).data
    return (alpha * current + (1.0 - alpha) * warped).astype(np.float32)


class TemporalConsistencyFilter:
    """Recursive low-pass of the retrieved image along the driving-keypoint motion."""

    def __init__(self, alpha: float = 0.5, motion: Optional[MotionModel] = None):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"tcf alpha must be in (0, 1], got {alpha}")
        self.alpha = alpha
        self.motion = motion or MotionModel()
        self.state: Optional[np.ndarray] = None
        self._prev_kps: Optional[KeypointSet] = None

    def reset(self) -> None:
        self.state = None
        self._prev_kps = None

    def update(self, retrieved: np.ndarray, driving_kps: KeypointSet) -> np.ndarray:
        grid = None
        if self.state is not None and self._prev_kps is not None:
            grid = estimate_grid(self.motion, self._prev_kps, driving_kps, self.state.shape[1:])
        self.state = tcf_filter(retrieved, self.state, grid, self.alpha)
        self._prev_kps = driving_kps
        return self.state
