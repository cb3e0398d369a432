"""Mouth-camera frame stream: replays a recorded mouth stream directory or in-memory frames."""

import logging
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

from app.corpus import MouthFrame
from app.errors import CorpusError
from storage.datasets import read_mouth_stream_index
from storage.image_io import read_ppm

logger = logging.getLogger(__name__)


class MouthFrameStream:
    """Sequential mouth-frame source.

    Images are decoded lazily on ``read`` so long recordings are not held in
    memory. Keypoints and gaze come from the stream's keypoint file.
    """

    def __init__(
        self,
        directory: Optional[Path] = None,
        frames: Optional[Sequence[MouthFrame]] = None,
        max_frames: int = 0,
    ):
        """
        Initialize the stream.

        Args:
            directory: Mouth stream directory (``mouth_XXXX.ppm`` + ``keypoints.jsonl``)
            frames: In-memory frames, used instead of a directory
            max_frames: Stop after this many frames (0 = whole stream)
        """
        if (directory is None) == (frames is None):
            raise ValueError("give exactly one of directory or frames")
        self.directory = Path(directory) if directory is not None else None
        self._frames: Optional[List[MouthFrame]] = list(frames) if frames is not None else None
        self._index = read_mouth_stream_index(self.directory) if self.directory is not None else None
        total = len(self._frames) if self._frames is not None else len(self._index)
        self.length = min(total, max_frames) if max_frames > 0 else total
        self.position = 0

        source = self.directory if self.directory is not None else "memory"
        logger.info(f"MOUTH_STREAM_OPEN: source={source}, frames={self.length}")

    @classmethod
    def from_frames(cls, frames: Sequence[MouthFrame]) -> "MouthFrameStream":
        return cls(frames=frames)

    def __len__(self) -> int:
        return self.length

    def _load(self, position: int) -> MouthFrame:
        if self._frames is not None:
            return self._frames[position]
        index, kps, gaze = self._index[position]
        try:
            image = read_ppm(self.directory / f"mouth_{index:04d}.ppm")
        except CorpusError:
            logger.error(f"Failed to read mouth frame {index} from {self.directory}")
            raise
        return MouthFrame(index, image, kps, gaze)

    def read(self) -> Tuple[bool, Optional[MouthFrame]]:
        """
        Read the next frame.

        Returns:
            Tuple of (success, frame); (False, None) at the end of the stream

        Raises:
            CorpusError: If a frame image is missing or malformed
        """
        if self.position >= self.length:
            return False, None
        frame = self._load(self.position)
        self.position += 1
        return True, frame

    def __iter__(self) -> Iterator[MouthFrame]:
        while True:
            ok, frame = self.read()
            if not ok:
                return
            yield frame

    def rewind(self) -> None:
        self.position = 0
