"""Deformation-aware projection of mouth-camera keypoints and driving keypoint construction."""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from app.errors import GeometryError, ShapeError
from app.vision.keypoints import KeypointSet, PointsLike, as_vr_points, distance_tensor

logger = logging.getLogger(__name__)

Gaze = Tuple[float, float, float]


@dataclass(frozen=True)
class Similarity:
    """2-D rotation + uniform scale + translation: ``p -> scale * R(rotation) p + translation``."""
    scale: float = 1.0
    rotation: float = 0.0
    translation: Tuple[float, float] = (0.0, 0.0)

    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix().T + np.asarray(self.translation)

    def inverse(self) -> "Similarity":
        inv_scale = 1.0 / self.scale
        inv = Similarity(inv_scale, -self.rotation, (0.0, 0.0))
        t = -inv.apply(np.asarray(self.translation)[None, :])[0]
        return Similarity(inv_scale, -self.rotation, (float(t[0]), float(t[1])))


@dataclass(frozen=True)
class ProjectionMap:
    """Mouth-camera -> source-image keypoint map: similarity then per-keypoint residual."""
    similarity: Similarity
    residuals: np.ndarray

    @classmethod
    def identity(cls, n_points: int) -> "ProjectionMap":
        return cls(Similarity(), np.zeros((n_points, 2)))

    @property
    def n_points(self) -> int:
        return self.residuals.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "scale": self.similarity.scale,
            "rotation": self.similarity.rotation,
            "translation": list(self.similarity.translation),
            "residuals": self.residuals.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProjectionMap":
        similarity = Similarity(
            float(data["scale"]),
            float(data["rotation"]),
            (float(data["translation"][0]), float(data["translation"][1])),
        )
        return cls(similarity, np.asarray(data["residuals"], dtype=np.float64).reshape(-1, 2))


def procrustes(source: np.ndarray, target: np.ndarray) -> Similarity:
    """Least-squares similarity mapping ``source`` onto ``target`` (no reflection).

    Raises:
        GeometryError: If either point set collapses to a single point
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise ShapeError(f"procrustes shapes differ: {source.shape} vs {target.shape}")
    mu_s, mu_t = source.mean(axis=0), target.mean(axis=0)
    xs, xt = source - mu_s, target - mu_t
    var_s = (xs ** 2).sum() / len(source)
    var_t = (xt ** 2).sum() / len(target)
    if var_s == 0.0 or var_t == 0.0:
        raise GeometryError("degenerate keypoints: all points coincide")

    cov = xt.T @ xs / len(source)
    u, sing, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[-1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = float((sing * d).sum() / var_s)
    t = mu_t - scale * rot @ mu_s
    return Similarity(scale, float(math.atan2(rot[1, 0], rot[0, 0])), (float(t[0]), float(t[1])))


def fit_projection(mouth_seq: Sequence[PointsLike], source_seq: Sequence[PointsLike]) -> ProjectionMap:
    """Fit the mouth-camera -> source keypoint map from two enrolment sequences.

    The similarity comes from Procrustes between the sequence means. Each mouth
    frame is then matched to the source frame with the nearest distance tensor,
    and the residual of a keypoint is its mean leftover offset over those pairs.

    Args:
        mouth_seq: K_VR keypoints seen by the mouth camera
        source_seq: K_VR keypoints of the source video

    Returns:
        Fitted ProjectionMap

    Raises:
        GeometryError: On empty or degenerate sequences
        ShapeError: If the two sequences use different layouts
    """
    if not mouth_seq or not source_seq:
        raise GeometryError("fit_projection needs non-empty mouth and source sequences")
    mouth = np.stack([as_vr_points(k) for k in mouth_seq])
    source = np.stack([as_vr_points(k) for k in source_seq])
    if mouth.shape[1:] != source.shape[1:]:
        raise ShapeError(f"layout mismatch: mouth {mouth.shape[1:]} vs source {source.shape[1:]}")

    similarity = procrustes(mouth.mean(axis=0), source.mean(axis=0))

    source_sigs = np.stack([distance_tensor(k).flatten() for k in source])
    offsets = np.zeros_like(mouth[0])
    for frame in mouth:
        sig = distance_tensor(frame).flatten()
        diff = source_sigs - sig[None, :]
        match = int(np.argmin((diff * diff).sum(axis=1)))
        offsets += source[match] - similarity.apply(frame)
    residuals = offsets / len(mouth)

    logger.info(
        f"PROJECTION_FIT: frames={len(mouth)}/{len(source)}, scale={similarity.scale:.4f}, "
        f"rotation={math.degrees(similarity.rotation):.2f}deg, "
        f"mean_residual={float(np.linalg.norm(residuals, axis=1).mean()):.5f}"
    )
    return ProjectionMap(similarity, residuals)


def apply_projection(projection: ProjectionMap, kps: PointsLike) -> np.ndarray:
    """Similarity followed by the per-keypoint residual.

    Raises:
        ShapeError: If the keypoint count does not match the map
    """
    points = as_vr_points(kps)
    if points.shape != projection.residuals.shape:
        raise ShapeError(
            f"layout mismatch: map has {projection.n_points} keypoints, got {points.shape[0]}"
        )
    return projection.similarity.apply(points) + projection.residuals


def validate_gaze(gaze: Sequence[float]) -> Gaze:
    if len(gaze) != 3:
        raise GeometryError(f"gaze must be (gx, gy, openness), got {gaze!r}")
    gx, gy, openness = (float(v) for v in gaze)
    if not (-1.0 <= gx <= 1.0 and -1.0 <= gy <= 1.0):
        raise GeometryError(f"gaze direction must lie in [-1, 1], got ({gx}, {gy})")
    if not 0.0 <= openness <= 1.0:
        raise GeometryError(f"eye openness must lie in [0, 1], got {openness}")
    return gx, gy, openness


def construct_driving(
    source_kps: KeypointSet,
    mouth_kps: PointsLike,
    projection: ProjectionMap,
    gaze: Sequence[float] = (0.0, 0.0, 1.0),
    eye_radius: float = 0.04,
) -> KeypointSet:
    """Imaginary driving keypoints: source pose, projected mouth, gaze-placed eyes.

    Args:
        source_kps: Appearance-source keypoints (K_F is copied from here)
        mouth_kps: Mouth-camera K_VR
        projection: Fitted mouth -> source map
        gaze: (gx, gy, openness) with gx, gy in [-1, 1] and openness in [0, 1]
        eye_radius: Pupil displacement for |g| = 1

    Returns:
        Driving KeypointSet in the source layout
    """
    gx, gy, openness = validate_gaze(gaze)
    layout = source_kps.layout
    points = source_kps.points.copy()
    points[list(layout.vr)] = apply_projection(projection, mouth_kps)

    offset = np.array([gx, gy]) * eye_radius
    for eye in layout.eyes:
        center = (points[eye.outer_corner] + points[eye.inner_corner]) / 2.0
        points[eye.pupil] = center + offset
        if openness != 1.0:
            for up, lo in zip(eye.upper, eye.lower):
                mid = (points[up] + points[lo]) / 2.0
                points[up] = mid + (points[up] - mid) * openness
                points[lo] = mid + (points[lo] - mid) * openness

    return KeypointSet(points, layout)
