"""Operator enrolment: projection fit, fixed-source selection and the expression store."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Union

import numpy as np

from app.config import Config, to_config_text
from app.corpus import Frame, MouthFrame
from app.errors import CorpusError, GeometryError
from app.retrieval import ExpressionStore, build_store
from app.vision.keypoints import PointsLike, distance_tensor
from app.vision.projection import ProjectionMap, fit_projection

logger = logging.getLogger(__name__)


@dataclass
class EnrolmentRecord:
    """Everything inference needs about one operator.

    Attributes:
        projection: Fitted mouth-camera -> source keypoint map
        sources: Fixed source frames, appearance source first
        store: Expression store (retrieval mode only)
        config_text: Configuration snapshot in config-file syntax
        source_indices: Source-video frame index of each fixed source
    """
    projection: ProjectionMap
    sources: List[Frame]
    store: Optional[ExpressionStore] = None
    config_text: str = ""
    source_indices: List[int] = field(default_factory=list)

    @property
    def appearance(self) -> Frame:
        return self.sources[0]

    @property
    def n_fixed(self) -> int:
        return len(self.sources)


def select_sources(signatures: np.ndarray, n: int) -> List[int]:
    """Farthest-point selection in distance-tensor space, starting from frame 0.

    The second and third picks are a double sweep (farthest from frame 0, then
    farthest from that), the rest greedy max-min. When fewer than ``n``
    distinct signatures exist the result repeats indices.

    Args:
        signatures: Flattened signatures (m, d)
        n: Number of frames to select

    Returns:
        Selected frame indices, first is 0
    """
    m = len(signatures)
    if m == 0:
        raise CorpusError("cannot select sources from an empty video")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")

    def dist_from(i: int) -> np.ndarray:
        diff = signatures - signatures[i][None, :]
        return np.sqrt((diff * diff).sum(axis=1))

    selected = [0]
    min_dist = dist_from(0)
    sweep_from = 0
    while len(selected) < n:
        if len(selected) < 3:
            candidate = int(np.argmax(dist_from(sweep_from)))
            if candidate in selected:
                candidate = int(np.argmax(min_dist))
        else:
            candidate = int(np.argmax(min_dist))
        selected.append(candidate)
        sweep_from = candidate
        min_dist = np.minimum(min_dist, dist_from(candidate))
    return selected


def coverage(signatures: np.ndarray, indices: Sequence[int]) -> float:
    """Largest pairwise signature distance among the selected frames."""
    chosen = signatures[list(indices)]
    diff = chosen[:, None, :] - chosen[None, :, :]
    return float(np.sqrt((diff * diff).sum(axis=2)).max())


def _mouth_keypoints(mouth_video: Sequence[Union[MouthFrame, PointsLike]]) -> List[PointsLike]:
    return [m.keypoints if isinstance(m, MouthFrame) else m for m in mouth_video]


def enroll(
    mouth_video: Sequence[Union[MouthFrame, PointsLike]],
    source_video: Sequence[Frame],
    config: Config,
) -> EnrolmentRecord:
    """Build an enrolment from the two capture videos.

    Args:
        mouth_video: Mouth-camera frames (or their K_M keypoints)
        source_video: Frontal source frames with keypoints
        config: Configuration (n_sources, retrieval, skip)

    Returns:
        EnrolmentRecord

    Raises:
        CorpusError: On empty or degenerate enrolment videos
    """
    if not mouth_video or not source_video:
        raise CorpusError(
            f"enrolment needs both videos (mouth frames: {len(mouth_video)}, source frames: {len(source_video)})"
        )
    try:
        projection = fit_projection(_mouth_keypoints(mouth_video), [f.keypoints for f in source_video])
    except GeometryError as e:
        raise CorpusError(f"degenerate enrolment, projection fit failed: {e}") from e

    signatures = np.stack([distance_tensor(f.keypoints).flatten() for f in source_video])
    n = config.fixed_sources
    indices = select_sources(signatures, n)
    distinct = len({tuple(signatures[i]) for i in indices})
    if distinct < n:
        logger.warning(
            f"ENROL_DEGENERATE: only {distinct} distinct expression(s) among {n} selected sources "
            f"(source frames: {len(source_video)})"
        )

    store = None
    if config.retrieval.enabled:
        store = build_store([(f.image, f.keypoints) for f in source_video], config.retrieval.skip)

    sources = [Frame(source_video[i].image, source_video[i].keypoints) for i in indices]
    logger.info(
        f"ENROL_DONE: sources={indices}, coverage={coverage(signatures, indices):.4f}, "
        f"store={len(store) if store is not None else 0}"
    )
    return EnrolmentRecord(
        projection=projection,
        sources=sources,
        store=store,
        config_text=to_config_text(config),
        source_indices=indices,
    )
