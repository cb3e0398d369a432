"""Lower-face mask B_LF."""

from dataclasses import dataclass
from typing import Optional, Tuple

import cv2
import numpy as np

from app.errors import GeometryError
from app.tensorcore import Tensor
from app.vision.keypoints import PointsLike, as_vr_points, to_pixels

_SUBPIXEL_BITS = 4


@dataclass(frozen=True)
class LowerFaceMask:
    """Binary H x W mask (uint8 0/1) of the dilated convex hull of K_VR."""
    mask: np.ndarray
    dilation: int

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.mask.shape

    @classmethod
    def filled(cls, resolution: Tuple[int, int], value: int) -> "LowerFaceMask":
        """Constant mask (all zeros or all ones)."""
        return cls(np.full(resolution, value, dtype=np.uint8), 0)

    def as_tensor(self, dtype: Optional[type] = None) -> Tensor:
        """Mask as a 1 x H x W float tensor for broadcasting over channels."""
        return Tensor(self.mask[None].astype(np.float64), dtype=dtype)

    def area(self) -> int:
        return int(self.mask.sum())


def scaled_dilation(dilation: int, reference_resolution: int, width: int) -> int:
    """Dilation in pixels at ``width``, given its value at the reference resolution."""
    return int(round(dilation * width / reference_resolution))


def lower_face_mask(kps: PointsLike, resolution: Tuple[int, int], dilation: int = 0) -> LowerFaceMask:
    """Rasterize the convex hull of the VR keypoints and dilate it.

    Args:
        kps: K_VR keypoints (normalized coordinates)
        resolution: (H, W) of the mask
        dilation: Dilation radius in pixels (elliptic structuring element)

    Returns:
        LowerFaceMask

    Raises:
        GeometryError: If fewer than 3 keypoints are given
    """
    points = as_vr_points(kps)
    if points.shape[0] < 3:
        raise GeometryError(f"lower-face mask needs at least 3 keypoints, got {points.shape[0]}")
    if dilation < 0:
        raise GeometryError(f"dilation must be >= 0, got {dilation}")
    H, W = resolution

    pixels = to_pixels(points, H, W).astype(np.float32)
    hull = cv2.convexHull(pixels)
    fixed = np.round(hull.reshape(-1, 2) * (1 << _SUBPIXEL_BITS)).astype(np.int32)
    mask = np.zeros((H, W), dtype=np.uint8)
    cv2.fillConvexPoly(mask, fixed, 1, lineType=cv2.LINE_8, shift=_SUBPIXEL_BITS)

    if dilation > 0:
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * dilation + 1, 2 * dilation + 1))
        mask = cv2.dilate(mask, kernel)
    return LowerFaceMask(mask, dilation)
