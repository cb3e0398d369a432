"""Keypoint geometry, warping and deformation grids."""

from app.vision.keypoints import (
    FACE68_VR31,
    DistanceTensor,
    KeypointLayout,
    KeypointSet,
    distance_tensor,
    get_layout,
    pixel_centers,
)
from app.vision.masks import LowerFaceMask, lower_face_mask
from app.vision.motion import DeformationGrid, MotionModel, deform_features, estimate_grid
from app.vision.projection import (
    ProjectionMap,
    Similarity,
    apply_projection,
    construct_driving,
    fit_projection,
)
from app.vision.triangulation import Triangulation, delaunay_triangulate, hull_mask, warp_psi

__all__ = [
    "FACE68_VR31",
    "DistanceTensor",
    "KeypointLayout",
    "KeypointSet",
    "distance_tensor",
    "get_layout",
    "pixel_centers",
    "LowerFaceMask",
    "lower_face_mask",
    "DeformationGrid",
    "MotionModel",
    "deform_features",
    "estimate_grid",
    "ProjectionMap",
    "Similarity",
    "apply_projection",
    "construct_driving",
    "fit_projection",
    "Triangulation",
    "delaunay_triangulate",
    "hull_mask",
    "warp_psi",
]
