"""Dense deformation grids from keypoint correspondences (stand-in for a learned motion network)."""

import logging
from dataclasses import dataclass
from typing import Literal, Tuple

import numpy as np
from scipy import linalg

from app.errors import GeometryError, ShapeError
from app.tensorcore import Tensor, bilinear_sample
from app.vision.keypoints import KeypointSet, pixel_centers
from app.vision.triangulation import delaunay_triangulate

logger = logging.getLogger(__name__)

Kernel = Literal["thin-plate-spline", "per-triangle-affine"]


@dataclass(frozen=True)
class MotionModel:
    """Grid estimator settings.

    Attributes:
        kernel: ``thin-plate-spline`` or ``per-triangle-affine``
        regularization: TPS smoothing lambda (0 interpolates exactly)
    """
    kernel: Kernel = "thin-plate-spline"
    regularization: float = 1e-3

    def __post_init__(self):
        if self.kernel not in ("thin-plate-spline", "per-triangle-affine"):
            raise ValueError(f"unknown motion kernel '{self.kernel}'")
        if self.regularization < 0:
            raise ValueError(f"regularization must be >= 0, got {self.regularization}")


@dataclass(frozen=True)
class DeformationGrid:
    """Per-pixel normalized sampling positions (H, W, 2) in the source image."""
    grid: np.ndarray
    identity: bool = False

    @property
    def resolution(self) -> Tuple[int, int]:
        return self.grid.shape[0], self.grid.shape[1]

    @classmethod
    def identity_grid(cls, resolution: Tuple[int, int]) -> "DeformationGrid":
        return cls(pixel_centers(*resolution), identity=True)


def _tps_kernel(d2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r written in terms of r^2, with U(0) = 0."""
    out = np.zeros_like(d2)
    positive = d2 > 0
    out[positive] = 0.5 * d2[positive] * np.log(d2[positive])
    return out


def _affine_basis(points: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((len(points), 1)), points])


class ThinPlateSpline:
    """2-D thin-plate spline mapping control points to target values."""

    def __init__(self, controls: np.ndarray, values: np.ndarray, regularization: float = 0.0):
        """
        Fit the spline.

        Args:
            controls: Control points (n, 2)
            values: Target positions (n, 2)
            regularization: Smoothing lambda added to the kernel diagonal

        Raises:
            GeometryError: Fewer than 3 distinct points, collinear points or a singular system
        """
        controls, values = _merge_duplicates(controls, values)
        n = len(controls)
        if n < 3:
            raise GeometryError(f"thin-plate spline needs at least 3 distinct keypoints, got {n}")
        P = _affine_basis(controls)
        if np.linalg.matrix_rank(P) < 3:
            raise GeometryError("thin-plate spline keypoints are collinear")

        d2 = ((controls[:, None, :] - controls[None, :, :]) ** 2).sum(axis=-1)
        system = np.zeros((n + 3, n + 3))
        system[:n, :n] = _tps_kernel(d2) + regularization * np.eye(n)
        system[:n, n:] = P
        system[n:, :n] = P.T
        rhs = np.zeros((n + 3, 2))
        rhs[:n] = values
        try:
            solution = linalg.solve(system, rhs, assume_a="sym")
        except (linalg.LinAlgError, ValueError) as e:
            raise GeometryError(f"thin-plate spline system is singular: {e}") from e

        self.controls = controls
        self.weights = solution[:n]
        self.affine = solution[n:]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        d2 = ((points[:, None, :] - self.controls[None, :, :]) ** 2).sum(axis=-1)
        return _tps_kernel(d2) @ self.weights + _affine_basis(points) @ self.affine


def _merge_duplicates(controls: np.ndarray, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Collapse coincident control points, averaging their targets (closed eyelids coincide)."""
    controls = np.asarray(controls, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    unique, first, inverse = np.unique(controls, axis=0, return_index=True, return_inverse=True)
    if len(unique) == len(controls):
        return controls, values
    inverse = inverse.reshape(-1)
    order = np.argsort(first)
    merged = np.zeros((len(unique), 2))
    np.add.at(merged, inverse, values)
    merged /= np.bincount(inverse)[:, None]
    return unique[order], merged[order]


def fit_affine(controls: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Least-squares affine map (3, 2) with ``values ~ [1, x, y] @ A``."""
    A, *_ = np.linalg.lstsq(_affine_basis(np.asarray(controls, dtype=np.float64)), values, rcond=None)
    return A


def estimate_grid(
    model: MotionModel,
    src_kps: KeypointSet,
    drv_kps: KeypointSet,
    resolution: Tuple[int, int],
) -> DeformationGrid:
    """Dense grid M_{S<-D}: for every driving-frame pixel, where to sample the source.

    The mapping interpolates driving keypoint -> source keypoint correspondences.

    Args:
        model: Kernel and smoothing
        src_kps: Source keypoints
        drv_kps: Driving keypoints (same layout)
        resolution: (H, W) of the grid

    Returns:
        DeformationGrid (identity when the keypoint sets are equal)

    Raises:
        ShapeError: On layout mismatch
        GeometryError: On degenerate keypoints
    """
    if src_kps.layout.name != drv_kps.layout.name or src_kps.points.shape != drv_kps.points.shape:
        raise ShapeError(f"keypoint layouts differ: {src_kps.layout.name} vs {drv_kps.layout.name}")
    if np.array_equal(src_kps.points, drv_kps.points):
        return DeformationGrid.identity_grid(resolution)

    H, W = resolution
    centers = pixel_centers(H, W).reshape(-1, 2)
    drv, src = drv_kps.points, src_kps.points

    if model.kernel == "thin-plate-spline":
        spline = ThinPlateSpline(drv, src, model.regularization)
        grid = spline(centers)
    else:
        tri = delaunay_triangulate(drv)
        inside, verts, bary = tri.locate(centers)
        grid = _affine_basis(centers) @ fit_affine(drv, src)
        grid[inside] = np.einsum("mk,mkd->md", bary, src[verts])

    if not np.all(np.isfinite(grid)):
        raise GeometryError("deformation grid is not finite")
    return DeformationGrid(grid.reshape(H, W, 2))


def deform_features(features: Tensor, grid: DeformationGrid) -> Tensor:
    """Sample ``features`` at the grid positions (E_hat = M[E]).

    Raises:
        ShapeError: If grid and feature resolutions differ
    """
    if features.ndim != 3 or features.shape[1:] != grid.resolution:
        raise ShapeError(
            f"grid resolution {grid.resolution} does not match features {features.shape}"
        )
    if grid.identity:
        return features
    return bilinear_sample(features, grid.grid)
