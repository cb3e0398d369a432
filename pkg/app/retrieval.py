"""Expression store and nearest-signature retrieval of enrolment frames."""

import logging
import threading
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from app.errors import CorpusError, GeometryError
from app.vision.keypoints import DistanceTensor, KeypointSet, PointsLike, distance_tensor, signature_distances

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StoreEntry:
    frame_index: int
    keypoints: KeypointSet
    signature: DistanceTensor
    image: np.ndarray


class Retrieved(NamedTuple):
    image: np.ndarray
    keypoints: KeypointSet
    index: int
    distance: float


class ExpressionStore:
    """Enrolment frames indexed by their K_VR distance tensor.

    Read-only after construction; lookups may run concurrently.
    """

    def __init__(self, entries: Sequence[StoreEntry], skip: int = 1):
        if not entries:
            raise CorpusError("expression store needs at least one frame")
        self.entries: List[StoreEntry] = sorted(entries, key=lambda e: e.frame_index)
        self.skip = skip
        self._table = np.stack([e.signature.flatten() for e in self.entries])
        self._lock = threading.Lock()
        self._lookups = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frame_indices(self) -> List[int]:
        return [e.frame_index for e in self.entries]

    @property
    def lookups(self) -> int:
        return self._lookups

    def nearest(self, signature: DistanceTensor) -> Tuple[int, float]:
        """Position of the closest entry (ties go to the lowest frame index) and its distance."""
        if signature.flatten().shape[0] != self._table.shape[1]:
            raise GeometryError(
                f"query signature has {signature.flatten().shape[0]} entries, store has {self._table.shape[1]}"
            )
        dists = signature_distances(signature, self._table)
        pos = int(np.argmin(dists))
        with self._lock:
            self._lookups += 1
        return pos, float(dists[pos])


def build_store(frames: Sequence[Tuple[np.ndarray, KeypointSet]], skip: int = 1) -> ExpressionStore:
    """Keep every ``skip``-th frame (indices 0, k, 2k, ...) with its signature.

    Raises:
        CorpusError: On an empty frame list or skip < 1
    """
    if skip < 1:
        raise CorpusError(f"store skip must be >= 1, got {skip}")
    if not frames:
        raise CorpusError("cannot build an expression store from an empty enrolment")
    entries = [
        StoreEntry(i, kps, distance_tensor(kps), np.asarray(image, dtype=np.float32))
        for i, (image, kps) in enumerate(frames)
        if i % skip == 0
    ]
    logger.info(f"STORE_BUILT: frames={len(frames)}, kept={len(entries)}, skip={skip}")
    return ExpressionStore(entries, skip)


def retrieve(store: ExpressionStore, projected_kps: PointsLike) -> Retrieved:
    """Entry whose distance tensor is closest (direct tensor difference) to the query's."""
    pos, dist = store.nearest(distance_tensor(projected_kps))
    entry = store.entries[pos]
    logger.debug(f"RETRIEVED: frame={entry.frame_index}, distance={dist:.5f}")
    return Retrieved(entry.image, entry.keypoints, entry.frame_index, dist)
