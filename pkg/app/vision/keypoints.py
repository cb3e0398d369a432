"""Keypoint data model: layouts, keypoint sets and distance tensors."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from app.errors import GeometryError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EyeIndices:
    """Indices of one eye inside a layout.

    ``upper[i]`` and ``lower[i]`` are lid keypoints facing each other.
    """
    outer_corner: int
    inner_corner: int
    upper: Tuple[int, ...]
    lower: Tuple[int, ...]
    pupil: int


@dataclass(frozen=True)
class KeypointLayout:
    """Partition of keypoint indices into facial (K_F) and lower-face (K_VR) sets."""
    name: str
    n_points: int
    vr: Tuple[int, ...]
    facial: Tuple[int, ...]
    eyes: Tuple[EyeIndices, ...]
    nose_tip: int

    def __post_init__(self):
        vr, facial = set(self.vr), set(self.facial)
        if vr & facial:
            raise GeometryError(f"layout {self.name}: K_VR and K_F overlap at {sorted(vr & facial)}")
        if vr | facial != set(range(self.n_points)):
            raise GeometryError(f"layout {self.name}: K_VR and K_F do not cover all {self.n_points} indices")

    @property
    def n_vr(self) -> int:
        return len(self.vr)


def _face68_vr31() -> KeypointLayout:
    mouth = tuple(range(48, 68))
    jaw = tuple(range(3, 14))
    vr = mouth + jaw
    facial = tuple(i for i in range(70) if i not in set(vr))
    eyes = (
        EyeIndices(outer_corner=36, inner_corner=39, upper=(37, 38), lower=(41, 40), pupil=68),
        EyeIndices(outer_corner=45, inner_corner=42, upper=(43, 44), lower=(47, 46), pupil=69),
    )
    return KeypointLayout(
        name="face68-vr31",
        n_points=70,
        vr=vr,
        facial=facial,
        eyes=eyes,
        nose_tip=33,
    )


FACE68_VR31 = _face68_vr31()
VR_LAYOUT_NAME = "vr31"
LAYOUTS: Dict[str, KeypointLayout] = {FACE68_VR31.name: FACE68_VR31}


def get_layout(name: str) -> KeypointLayout:
    try:
        return LAYOUTS[name]
    except KeyError:
        raise GeometryError(f"unknown keypoint layout '{name}'") from None


@dataclass
class KeypointSet:
    """Ordered 2-D landmarks in normalized [-1, 1] image coordinates (x right, y down)."""
    points: np.ndarray
    layout: KeypointLayout = field(default=FACE68_VR31)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (self.layout.n_points, 2):
            raise ShapeError(
                f"layout {self.layout.name} needs ({self.layout.n_points}, 2) points, got {self.points.shape}"
            )
        if not np.all(np.isfinite(self.points)):
            raise GeometryError("keypoints must be finite")

    def vr(self) -> np.ndarray:
        """K_VR subset, shape (n_vr, 2)."""
        return self.points[list(self.layout.vr)]

    def with_vr(self, vr_points: np.ndarray) -> "KeypointSet":
        vr_points = np.asarray(vr_points, dtype=np.float64)
        if vr_points.shape != (self.layout.n_vr, 2):
            raise ShapeError(f"expected ({self.layout.n_vr}, 2) VR points, got {vr_points.shape}")
        points = self.points.copy()
        points[list(self.layout.vr)] = vr_points
        return KeypointSet(points, self.layout)

    def copy(self) -> "KeypointSet":
        return KeypointSet(self.points.copy(), self.layout)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return self.layout.name == other.layout.name and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class DistanceTensor:
    """Normalized pairwise keypoint differences, shape (n, n, 2)."""
    values: np.ndarray

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def flatten(self) -> np.ndarray:
        return self.values.reshape(-1)

    def distance(self, other: "DistanceTensor") -> float:
        """Frobenius distance between two signatures."""
        if self.values.shape != other.values.shape:
            raise ShapeError(f"distance tensor shapes differ: {self.values.shape} vs {other.values.shape}")
        return float(np.linalg.norm(self.values - other.values))


PointsLike = Union[KeypointSet, np.ndarray, Sequence[Sequence[float]]]


def as_vr_points(kps: PointsLike) -> np.ndarray:
    """K_VR array from a KeypointSet, or the array itself."""
    if isinstance(kps, KeypointSet):
        return kps.vr()
    points = np.asarray(kps, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(f"expected (n, 2) keypoints, got {points.shape}")
    return points


def distance_tensor(kps: PointsLike) -> DistanceTensor:
    """Pairwise differences divided by the largest pairwise Euclidean norm.

    Args:
        kps: K_VR keypoints (a KeypointSet contributes its VR subset)

    Returns:
        DistanceTensor with values[k, l] = (kp_k - kp_l) / maxnorm (all zero if maxnorm is 0)

    Raises:
        GeometryError: If fewer than two keypoints are given
    """
    points = as_vr_points(kps)
    if points.shape[0] < 2:
        raise GeometryError(f"distance tensor needs at least 2 keypoints, got {points.shape[0]}")
    diffs = points[:, None, :] - points[None, :, :]
    maxnorm = float(np.sqrt((diffs ** 2).sum(axis=-1)).max())
    if maxnorm == 0.0:
        return DistanceTensor(np.zeros_like(diffs))
    return DistanceTensor(diffs / maxnorm)


def signature_distances(query: DistanceTensor, table: np.ndarray) -> np.ndarray:
    """Frobenius distances from ``query`` to each row of a stacked (m, n*n*2) signature table."""
    diff = table - query.flatten()[None, :]
    return np.sqrt((diff * diff).sum(axis=1))


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) coordinates of every pixel centre, shape (H, W, 2)."""
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


def to_pixels(points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Normalized coordinates to (column, row) pixel coordinates."""
    points = np.asarray(points, dtype=np.float64)
    return np.stack(
        [(points[:, 0] + 1.0) * 0.5 * (width - 1), (points[:, 1] + 1.0) * 0.5 * (height - 1)],
        axis=1,
    )
