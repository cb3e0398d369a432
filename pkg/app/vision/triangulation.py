"""Delaunay triangulation and the barycentric mouth-area keypoint warp."""

import logging
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy.spatial import Delaunay, QhullError

from app.errors import GeometryError, ShapeError
from app.tensorcore import Tensor, bilinear_sample
from app.vision.keypoints import PointsLike, as_vr_points, pixel_centers

logger = logging.getLogger(__name__)

ImageLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class Triangulation:
    """Delaunay triangulation of a keypoint set.

    Attributes:
        points: The triangulated points (n, 2)
        triangles: Non-degenerate index triples (T, 3)
    """
    points: np.ndarray
    triangles: np.ndarray
    _qhull: Delaunay = field(repr=False, compare=False)

    @property
    def vertices(self) -> np.ndarray:
        return np.unique(self.triangles)

    def locate(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Find the containing triangle of each query point.

        Returns:
            Tuple of (inside mask (m,), vertex indices (k, 3), barycentric weights (k, 3))
            for the k points inside the hull
        """
        simplex = self._qhull.find_simplex(xy)
        inside = simplex >= 0
        found = simplex[inside]
        transform = self._qhull.transform[found]
        partial = np.einsum("mij,mj->mi", transform[:, :2, :], xy[inside] - transform[:, 2, :])
        bary = np.concatenate([partial, 1.0 - partial.sum(axis=1, keepdims=True)], axis=1)
        return inside, self._qhull.simplices[found], bary


def delaunay_triangulate(points: PointsLike) -> Triangulation:
    """Delaunay triangulation with degenerate (zero-area) triangles removed.

    Raises:
        GeometryError: Fewer than 3 points or all points collinear
    """
    pts = as_vr_points(points)
    if pts.shape[0] < 3:
        raise GeometryError(f"triangulation needs at least 3 points, got {pts.shape[0]}")
    centered = pts - pts.mean(axis=0)
    sing = np.linalg.svd(centered, compute_uv=False)
    if sing[0] == 0.0 or sing[-1] <= 1e-12 * sing[0]:
        raise GeometryError("cannot triangulate collinear keypoints")
    try:
        qhull = Delaunay(pts)
    except QhullError as e:
        raise GeometryError(f"triangulation failed: {e}") from e

    tri = qhull.simplices
    a, b, c = pts[tri[:, 0]], pts[tri[:, 1]], pts[tri[:, 2]]
    area = 0.5 * np.abs((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    scale = float((sing[0] ** 2) / len(pts))
    keep = area > 1e-12 * scale
    if not np.any(keep):
        raise GeometryError("triangulation has no non-degenerate triangles")
    return Triangulation(points=pts, triangles=tri[keep], _qhull=qhull)


def hull_mask(dst_kps: PointsLike, resolution: Tuple[int, int]) -> np.ndarray:
    """Pixels whose centre lies inside the triangulated hull of ``dst_kps`` (H, W bool)."""
    H, W = resolution
    tri = delaunay_triangulate(dst_kps)
    inside, _, _ = tri.locate(pixel_centers(H, W).reshape(-1, 2))
    return inside.reshape(H, W)


def warp_psi(image: ImageLike, src_kps: PointsLike, dst_kps: PointsLike) -> Tensor:
    """Piecewise-affine warp of ``image`` from ``src_kps`` to ``dst_kps``.

    Each output pixel inside the destination hull is located in a destination
    triangle; the same barycentric combination of the source keypoints gives
    the position sampled from the input. Pixels outside the hull are zero.

    Args:
        image: Image or feature map (C, H, W)
        src_kps: Keypoints in the input image
        dst_kps: Keypoints in the output image (same count)

    Returns:
        Warped image (C, H, W)

    Raises:
        GeometryError: If the destination keypoints cannot be triangulated
        ShapeError: If the keypoint sets differ in size
    """
    src = as_vr_points(src_kps)
    dst = as_vr_points(dst_kps)
    if src.shape != dst.shape:
        raise ShapeError(f"warp keypoint sets differ: {src.shape} vs {dst.shape}")
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim != 3:
        raise ShapeError(f"warp expects a CxHxW image, got {image.shape}")
    H, W = image.shape[1:]

    tri = delaunay_triangulate(dst)
    centers = pixel_centers(H, W).reshape(-1, 2)
    inside, verts, bary = tri.locate(centers)

    grid = centers.copy()
    grid[inside] = np.einsum("mk,mkd->md", bary, src[verts])
    sampled = bilinear_sample(image, grid.reshape(H, W, 2))
    mask = Tensor(inside.reshape(1, H, W).astype(image.data.dtype), dtype=image.data.dtype)
    return sampled * mask
