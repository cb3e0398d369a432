"""Exception hierarchy shared by every module of the animation pipeline."""

import logging
from contextlib import contextmanager
from typing import Iterator, Optional, Sequence

logger = logging.getLogger(__name__)


class FaceAnimError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(FaceAnimError, ValueError):
    """Tensor or keypoint shapes do not line up."""


class NumericalError(FaceAnimError, ArithmeticError):
    """A public operation produced NaN or Inf values."""


class CheckpointFormatError(FaceAnimError, ValueError):
    """Checkpoint bytes are malformed (bad magic, truncation, duplicates)."""


class GeometryError(FaceAnimError, ValueError):
    """Keypoints are degenerate for the requested geometric operation."""


class ConfigError(FaceAnimError, ValueError):
    """Configuration file or override is invalid."""


class CorpusError(FaceAnimError, ValueError):
    """A dataset, stream or store on disk is missing or malformed."""


class TrainingError(FaceAnimError, RuntimeError):
    """Training diverged or cannot proceed."""

    def __init__(self, message: str, step: int = -1, recent_losses: Optional[Sequence[float]] = None):
        super().__init__(message)
        self.step = step
        self.recent_losses = list(recent_losses or [])


class StageError(FaceAnimError, RuntimeError):
    """A named processing stage failed.

    Attributes:
        stage: Stage name (e.g. ``"deform"``, ``"gate"``)
        frame_index: Frame being processed when the failure happened, if known
    """

    def __init__(self, stage: str, message: str, frame_index: Optional[int] = None):
        where = f" at frame {frame_index}" if frame_index is not None else ""
        super().__init__(f"stage '{stage}' failed{where}: {message}")
        self.stage = stage
        self.frame_index = frame_index


@contextmanager
def stage(name: str, frame_index: Optional[int] = None) -> Iterator[None]:
    """Re-raise any failure inside the block as a StageError naming ``name``.

    Nested stages keep the innermost stage name.
    """
    try:
        yield
    except StageError as e:
        if e.frame_index is None and frame_index is not None:
            raise StageError(e.stage, str(e.__cause__ or e), frame_index) from e.__cause__
        raise
    except Exception as e:
        logger.error(f"Stage '{name}' failed: {e}", exc_info=True)
        raise StageError(name, str(e), frame_index) from e
