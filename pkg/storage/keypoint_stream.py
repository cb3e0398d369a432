"""Keypoint stream files: one JSON object per line."""

import json
import logging
import math
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.errors import CorpusError
from app.vision.keypoints import KeypointSet, get_layout
from storage.files import PathLike, atomic_write_text

logger = logging.getLogger(__name__)


class KeypointRecord(BaseModel):
    """``{"frame": int, "points": [[x, y], ...], "layout": str, "gaze": [gx, gy, openness]}``."""

    model_config = ConfigDict(extra="forbid")

    frame: int = Field(ge=0)
    points: List[Tuple[float, float]]
    layout: str
    gaze: Optional[Tuple[float, float, float]] = None

    @field_validator("points")
    @classmethod
    def check_finite(cls, v):
        if not v:
            raise ValueError("points must not be empty")
        if not all(math.isfinite(x) and math.isfinite(y) for x, y in v):
            raise ValueError("points must be finite")
        return v

    def to_array(self) -> np.ndarray:
        return np.asarray(self.points, dtype=np.float64)

    def to_keypoint_set(self) -> KeypointSet:
        """Full keypoint set (only for registered layouts such as ``face68-vr31``)."""
        try:
            return KeypointSet(self.to_array(), get_layout(self.layout))
        except ValueError as e:
            raise CorpusError(f"frame {self.frame}: {e}") from e

    def to_json(self) -> str:
        data = {"frame": self.frame, "points": [list(p) for p in self.points], "layout": self.layout}
        if self.gaze is not None:
            data["gaze"] = list(self.gaze)
        return json.dumps(data)


def make_record(
    frame: int,
    kps: Union[KeypointSet, np.ndarray],
    layout: Optional[str] = None,
    gaze: Optional[Sequence[float]] = None,
) -> KeypointRecord:
    if isinstance(kps, KeypointSet):
        points, layout = kps.points, layout or kps.layout.name
    else:
        points = np.asarray(kps, dtype=np.float64)
    if layout is None:
        raise CorpusError("layout name is required for raw keypoint arrays")
    return KeypointRecord(
        frame=frame,
        points=[(float(x), float(y)) for x, y in points],
        layout=layout,
        gaze=tuple(float(g) for g in gaze) if gaze is not None else None,
    )


def write_keypoint_stream(path: PathLike, records: Iterable[KeypointRecord]) -> Path:
    return atomic_write_text(path, "".join(r.to_json() + "\n" for r in records))


def read_keypoint_stream(path: PathLike) -> List[KeypointRecord]:
    """Parse a stream file.

    Raises:
        CorpusError: Naming the first malformed line
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise CorpusError(f"cannot read keypoint stream {path}: {e}") from e
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(KeypointRecord.model_validate(json.loads(line)))
        except (json.JSONDecodeError, ValidationError) as e:
            raise CorpusError(f"{path}:{lineno}: malformed keypoint record: {e}") from e
    return records
