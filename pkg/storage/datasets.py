"""Dataset directories: videos, VR pairs, mouth-frame streams, expression stores, enrolments."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from app.corpus import Frame, MouthFrame, SyntheticCorpus, VideoClip, VrPairRecord
from app.enrolment import EnrolmentRecord
from app.errors import CorpusError
from app.retrieval import ExpressionStore, StoreEntry
from app.vision.keypoints import FACE68_VR31, VR_LAYOUT_NAME, distance_tensor
from app.vision.projection import Gaze, ProjectionMap
from storage.files import PathLike, atomic_write_text
from storage.image_io import read_ppm, write_ppm
from storage.keypoint_stream import make_record, read_keypoint_stream, write_keypoint_stream

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
KEYPOINTS = "keypoints.jsonl"


class VideoManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: str = "video"
    identity: str
    frames: int = Field(ge=0)


class VrPairManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: str = "vr-pairs"
    operator_id: str
    count: int = Field(ge=0)


class MouthStreamManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: str = "mouth-stream"
    frames: int = Field(ge=0)


class StoreManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: str = "expression-store"
    skip: int = Field(ge=1)
    frame_indices: List[int]


class EnrolmentManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")
    kind: str = "enrolment"
    projection: Dict[str, Any]
    source_indices: List[int]
    has_store: bool
    config: str


def _write_manifest(directory: Path, manifest: BaseModel) -> None:
    atomic_write_text(directory / MANIFEST, manifest.model_dump_json(indent=2) + "\n")


def _read_manifest(directory: Path, model: type) -> Any:
    path = Path(directory) / MANIFEST
    try:
        return model.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except OSError as e:
        raise CorpusError(f"missing manifest {path}: {e}") from e
    except (json.JSONDecodeError, ValidationError) as e:
        raise CorpusError(f"malformed manifest {path}: {e}") from e


# -- videos -------------------------------------------------------------------

def write_video(directory: PathLike, clip: VideoClip) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        write_ppm(directory / f"frame_{i:04d}.ppm", frame.image)
    write_keypoint_stream(directory / KEYPOINTS, (make_record(i, f.keypoints) for i, f in enumerate(clip.frames)))
    _write_manifest(directory, VideoManifest(identity=clip.identity, frames=len(clip)))
    return directory


def read_video(directory: PathLike) -> VideoClip:
    directory = Path(directory)
    manifest: VideoManifest = _read_manifest(directory, VideoManifest)
    records = read_keypoint_stream(directory / KEYPOINTS)
    if len(records) != manifest.frames:
        raise CorpusError(f"{directory}: manifest lists {manifest.frames} frames, keypoint stream has {len(records)}")
    frames = [Frame(read_ppm(directory / f"frame_{r.frame:04d}.ppm"), r.to_keypoint_set()) for r in records]
    return VideoClip(manifest.identity, frames)


# -- VR pairs -----------------------------------------------------------------

def write_vr_pairs(directory: PathLike, records: Sequence[VrPairRecord]) -> Path:
    """One operator per directory: face/mouth PPMs and two keypoint streams."""
    directory = Path(directory)
    if not records:
        raise CorpusError("no VR-pair records to write")
    operators = {r.operator_id for r in records}
    if len(operators) != 1:
        raise CorpusError(f"a VR-pair directory holds one operator, got {sorted(operators)}")
    directory.mkdir(parents=True, exist_ok=True)
    for i, r in enumerate(records):
        write_ppm(directory / f"face_{i:04d}.ppm", r.face_image)
        write_ppm(directory / f"mouth_{i:04d}.ppm", r.mouth_image)
    write_keypoint_stream(directory / "face_keypoints.jsonl", (make_record(i, r.face_kps) for i, r in enumerate(records)))
    write_keypoint_stream(
        directory / "mouth_keypoints.jsonl",
        (make_record(i, r.mouth_kps, VR_LAYOUT_NAME) for i, r in enumerate(records)),
    )
    _write_manifest(directory, VrPairManifest(operator_id=records[0].operator_id, count=len(records)))
    return directory


def read_vr_pairs(directory: PathLike) -> List[VrPairRecord]:
    directory = Path(directory)
    manifest: VrPairManifest = _read_manifest(directory, VrPairManifest)
    faces = read_keypoint_stream(directory / "face_keypoints.jsonl")
    mouths = read_keypoint_stream(directory / "mouth_keypoints.jsonl")
    if not (len(faces) == len(mouths) == manifest.count):
        raise CorpusError(
            f"{directory}: count mismatch (manifest {manifest.count}, faces {len(faces)}, mouths {len(mouths)})"
        )
    records = []
    for face, mouth in zip(faces, mouths):
        mouth_kps = mouth.to_array()
        if mouth_kps.shape != (FACE68_VR31.n_vr, 2):
            raise CorpusError(f"{directory}: record {mouth.frame} has {len(mouth_kps)} mouth keypoints")
        records.append(VrPairRecord(
            mouth_image=read_ppm(directory / f"mouth_{mouth.frame:04d}.ppm"),
            mouth_kps=mouth_kps,
            face_image=read_ppm(directory / f"face_{face.frame:04d}.ppm"),
            face_kps=face.to_keypoint_set(),
            operator_id=manifest.operator_id,
        ))
    return records


# -- synthetic corpus ---------------------------------------------------------

def write_corpus(directory: PathLike, corpus: SyntheticCorpus) -> Path:
    """``videos/<identity>/`` and ``vr_pairs/<operator>/`` subdirectories."""
    directory = Path(directory)
    for clip in corpus.videos:
        write_video(directory / "videos" / clip.identity, clip)
    groups: Dict[str, List[VrPairRecord]] = {}
    for record in corpus.vr_pairs:
        groups.setdefault(record.operator_id, []).append(record)
    for operator, records in groups.items():
        write_vr_pairs(directory / "vr_pairs" / operator, records)
    logger.info(f"CORPUS_WRITTEN: dir={directory}, videos={len(corpus.videos)}, vr_pairs={len(corpus.vr_pairs)}")
    return directory


def read_corpus(directory: PathLike) -> Tuple[List[VideoClip], List[VrPairRecord]]:
    directory = Path(directory)
    video_root = directory / "videos"
    if not video_root.is_dir():
        raise CorpusError(f"{directory} has no videos/ directory")
    videos = [read_video(d) for d in sorted(video_root.iterdir()) if d.is_dir()]
    pairs: List[VrPairRecord] = []
    pair_root = directory / "vr_pairs"
    if pair_root.is_dir():
        for d in sorted(pair_root.iterdir()):
            if d.is_dir():
                pairs.extend(read_vr_pairs(d))
    return videos, pairs


# -- mouth-frame streams ------------------------------------------------------

def write_mouth_stream(directory: PathLike, frames: Sequence[MouthFrame]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_ppm(directory / f"mouth_{f.index:04d}.ppm", f.image)
    write_keypoint_stream(
        directory / KEYPOINTS,
        (make_record(f.index, f.keypoints, VR_LAYOUT_NAME, f.gaze) for f in frames),
    )
    _write_manifest(directory, MouthStreamManifest(frames=len(frames)))
    return directory


def read_mouth_stream_index(directory: PathLike) -> List[Tuple[int, np.ndarray, Optional[Gaze]]]:
    """Keypoints and gaze of every frame, without loading images."""
    directory = Path(directory)
    records = read_keypoint_stream(directory / KEYPOINTS)
    if not records:
        raise CorpusError(f"{directory}: empty mouth-frame stream")
    out = []
    for r in records:
        if r.layout != VR_LAYOUT_NAME:
            raise CorpusError(f"{directory}: frame {r.frame} uses layout '{r.layout}', expected '{VR_LAYOUT_NAME}'")
        out.append((r.frame, r.to_array(), r.gaze))
    return out


def read_mouth_stream(directory: PathLike) -> List[MouthFrame]:
    directory = Path(directory)
    return [
        MouthFrame(i, read_ppm(directory / f"mouth_{i:04d}.ppm"), kps, gaze)
        for i, kps, gaze in read_mouth_stream_index(directory)
    ]


# -- expression store ---------------------------------------------------------

def write_store(directory: PathLike, store: ExpressionStore) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for e in store.entries:
        write_ppm(directory / f"store_{e.frame_index:04d}.ppm", e.image)
    write_keypoint_stream(directory / KEYPOINTS, (make_record(e.frame_index, e.keypoints) for e in store.entries))
    _write_manifest(directory, StoreManifest(skip=store.skip, frame_indices=store.frame_indices))
    return directory


def read_store(directory: PathLike) -> ExpressionStore:
    directory = Path(directory)
    manifest: StoreManifest = _read_manifest(directory, StoreManifest)
    records = read_keypoint_stream(directory / KEYPOINTS)
    if [r.frame for r in records] != manifest.frame_indices:
        raise CorpusError(f"{directory}: keypoint stream does not match the manifest frame list")
    entries = []
    for r in records:
        kps = r.to_keypoint_set()
        entries.append(StoreEntry(r.frame, kps, distance_tensor(kps), read_ppm(directory / f"store_{r.frame:04d}.ppm")))
    return ExpressionStore(entries, manifest.skip)


# -- enrolment ----------------------------------------------------------------

def write_enrolment(directory: PathLike, record: EnrolmentRecord) -> Path:
    """Persist an EnrolmentRecord: manifest, ``sources/`` and optional ``store/``."""
    directory = Path(directory)
    write_video(directory / "sources", VideoClip("sources", list(record.sources)))
    if record.store is not None:
        write_store(directory / "store", record.store)
    _write_manifest(directory, EnrolmentManifest(
        projection=record.projection.to_dict(),
        source_indices=list(record.source_indices),
        has_store=record.store is not None,
        config=record.config_text,
    ))
    logger.info(f"ENROLMENT_WRITTEN: dir={directory}, sources={len(record.sources)}, store={record.store is not None}")
    return directory


def read_enrolment(directory: PathLike) -> EnrolmentRecord:
    directory = Path(directory)
    manifest: EnrolmentManifest = _read_manifest(directory, EnrolmentManifest)
    sources = read_video(directory / "sources").frames
    store = read_store(directory / "store") if manifest.has_store else None
    try:
        projection = ProjectionMap.from_dict(manifest.projection)
    except (KeyError, TypeError, ValueError) as e:
        raise CorpusError(f"{directory}: malformed projection: {e}") from e
    return EnrolmentRecord(
        projection=projection,
        sources=sources,
        store=store,
        config_text=manifest.config,
        source_indices=manifest.source_indices,
    )
