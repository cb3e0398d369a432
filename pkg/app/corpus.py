"""Synthetic face videos and VR mouth-camera pairs rendered from 2-D keypoints."""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.config import Config, CorpusConfig, NoiseConfig
from app.errors import CorpusError, GeometryError
from app.mouth_guidance import NoiseParams, image_noise
from app.vision.keypoints import FACE68_VR31, KeypointSet, to_pixels
from app.vision.projection import Similarity
from app.vision.triangulation import warp_psi

logger = logging.getLogger(__name__)

MOUTH = slice(48, 68)
OUTER_LIP = slice(48, 60)
INNER_LIP = slice(60, 68)
JAW_VR = np.arange(3, 14)
NOSE_OUTLINE = [27, 35, 34, 33, 32, 31]


@dataclass
class Frame:
    """Rendered image (C, H, W float32 in [0, 1]) and its keypoints."""
    image: np.ndarray
    keypoints: KeypointSet


@dataclass
class VideoClip:
    identity: str
    frames: List[Frame]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class MouthFrame:
    """One mouth-camera frame: image, K_M keypoints (n_vr, 2) and optional (gx, gy, openness)."""
    index: int
    image: np.ndarray
    keypoints: np.ndarray
    gaze: Optional[Tuple[float, float, float]] = None


@dataclass
class VrPairRecord:
    """A mouth-camera image with the face frame it corresponds to.

    Attributes:
        mouth_image: Mouth-camera image (C, H, W)
        mouth_kps: K_M annotation (n_vr, 2)
        face_image: Frontal face image (C, H, W)
        face_kps: Frontal face keypoints
        operator_id: Person wearing the headset
    """
    mouth_image: np.ndarray
    mouth_kps: np.ndarray
    face_image: np.ndarray
    face_kps: KeypointSet
    operator_id: str


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """Identity of one synthetic face: colours and shape factors."""
    seed: int
    resolution: int = 64
    skin: Tuple[float, float, float] = (0.85, 0.68, 0.56)
    lip: Tuple[float, float, float] = (0.72, 0.33, 0.35)
    iris: Tuple[float, float, float] = (0.30, 0.22, 0.12)
    background: Tuple[float, float, float] = (0.25, 0.30, 0.35)
    face_width: float = 1.0
    face_height: float = 1.0
    mouth_width: float = 1.0
    eye_spacing: float = 0.0
    softness: float = 1.0

    @classmethod
    def from_seed(cls, seed: int, resolution: int = 64, softness: float = 1.0) -> "SyntheticFaceSpec":
        rng = np.random.default_rng(seed)
        tone = rng.uniform(0.45, 0.95)
        skin = (tone, tone * rng.uniform(0.72, 0.82), tone * rng.uniform(0.55, 0.68))
        lip = (rng.uniform(0.55, 0.8), rng.uniform(0.2, 0.35), rng.uniform(0.25, 0.4))
        iris = tuple(float(v) for v in rng.uniform(0.1, 0.5, size=3))
        background = tuple(float(v) for v in rng.uniform(0.05, 0.5, size=3))
        return cls(
            seed=seed,
            resolution=resolution,
            skin=tuple(float(v) for v in skin),
            lip=tuple(float(v) for v in lip),
            iris=iris,
            background=background,
            face_width=float(rng.uniform(0.92, 1.06)),
            face_height=float(rng.uniform(0.95, 1.04)),
            mouth_width=float(rng.uniform(0.9, 1.1)),
            eye_spacing=float(rng.uniform(-0.03, 0.03)),
            softness=softness,
        )


def _template_points() -> np.ndarray:
    pts = np.zeros((FACE68_VR31.n_points, 2))
    t = np.arange(17) / 16.0
    pts[0:17, 0] = -0.62 * np.cos(np.pi * t)
    pts[0:17, 1] = -0.05 + 0.72 * np.sin(np.pi * t)

    k = np.arange(5)
    arch = -0.38 - 0.04 * np.sin(np.pi * k / 4)
    pts[17:22, 0] = np.linspace(-0.50, -0.12, 5)
    pts[17:22, 1] = arch
    pts[22:27, 0] = np.linspace(0.12, 0.50, 5)
    pts[22:27, 1] = arch[::-1]

    pts[27:31, 0] = 0.0
    pts[27:31, 1] = [-0.28, -0.19, -0.10, -0.01]
    pts[31:36, 0] = [-0.08, -0.04, 0.0, 0.04, 0.08]
    pts[31:36, 1] = [0.08, 0.10, 0.11, 0.10, 0.08]

    w, h = 0.11, 0.05
    for start, cx in ((36, -0.28), (42, 0.28)):
        cy = -0.22
        pts[start:start + 6] = [
            (cx - w, cy), (cx - w / 3, cy - h), (cx + w / 3, cy - h),
            (cx + w, cy), (cx + w / 3, cy + h), (cx - w / 3, cy + h),
        ]

    theta = np.pi + np.arange(12) * 2 * np.pi / 12
    pts[OUTER_LIP, 0] = 0.22 * np.cos(theta)
    pts[OUTER_LIP, 1] = 0.33 + 0.09 * np.sin(theta)
    theta = np.pi + np.arange(8) * 2 * np.pi / 8
    pts[INNER_LIP, 0] = 0.15 * np.cos(theta)
    pts[INNER_LIP, 1] = 0.33 + 0.02 * np.sin(theta)

    _place_pupils(pts)
    return pts


def _place_pupils(pts: np.ndarray) -> None:
    for eye in FACE68_VR31.eyes:
        pts[eye.pupil] = (pts[eye.outer_corner] + pts[eye.inner_corner]) / 2.0


def neutral_keypoints(spec: SyntheticFaceSpec) -> KeypointSet:
    """Identity-specific neutral face."""
    pts = _template_points()
    pts[:, 0] *= spec.face_width
    pts[:, 1] *= spec.face_height
    pts[36:42, 0] -= spec.eye_spacing
    pts[42:48, 0] += spec.eye_spacing
    center = pts[OUTER_LIP].mean(axis=0)
    pts[MOUTH, 0] = center[0] + (pts[MOUTH, 0] - center[0]) * spec.mouth_width
    _place_pupils(pts)
    return KeypointSet(pts)


def expression_keypoints(neutral: KeypointSet, opening: float, smile: float = 0.0, pucker: float = 0.0) -> KeypointSet:
    """Deform the neutral mouth and jaw.

    Args:
        neutral: Neutral keypoints
        opening: Mouth opening in [0, 1]
        smile: Corner raise and widening in [0, 1]
        pucker: Narrowing in [0, 1]
    """
    pts = neutral.points.copy()
    base = neutral.points
    center = base[OUTER_LIP].mean(axis=0)
    d = base[MOUTH] - center
    half_width = np.abs(d[:, 0]).max()

    width = 1.0 + 0.15 * smile - 0.25 * pucker
    x = center[0] + d[:, 0] * width
    y = center[1] + d[:, 1] * (1.0 + 0.3 * opening)
    upper = d[:, 1] < -1e-9
    lower = d[:, 1] > 1e-9
    inner = np.zeros(len(d), dtype=bool)
    inner[12:] = True
    y = np.where(upper, y - 0.01 * opening, y)
    y = np.where(lower & ~inner, y + 0.12 * opening, y)
    y = np.where(lower & inner, y + 0.11 * opening, y)
    y = np.where(~upper & ~lower, y + 0.04 * opening, y)
    y = y - 0.04 * smile * (np.abs(d[:, 0]) / half_width) ** 2
    pts[MOUTH, 0] = x
    pts[MOUTH, 1] = y

    weight = np.sin(np.pi * (JAW_VR - 2) / 12.0)
    pts[JAW_VR, 1] += 0.10 * opening * weight
    return KeypointSet(pts, neutral.layout)


def synth_trajectory(
    spec: SyntheticFaceSpec,
    frames: int,
    rng: np.random.Generator,
    velocity_cap: float = 0.02,
    event_rate: float = 0.02,
) -> List[KeypointSet]:
    """Keypoint trajectory: neutral first frame, smooth mouth motion plus smile/pucker events.

    No keypoint moves more than ``velocity_cap`` between consecutive frames.
    """
    if frames < 1:
        raise CorpusError(f"trajectory needs at least one frame, got {frames}")
    neutral = neutral_keypoints(spec)
    freqs = rng.uniform(0.01, 0.06, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    amps = np.array([0.35, 0.2, 0.1])

    smile = pucker = 0.0
    event_left = 0
    current = neutral.points.copy()
    out = [neutral.copy()]
    for t in range(1, frames):
        opening = float(np.clip(0.25 + (amps * np.sin(2 * np.pi * freqs * t + phases)).sum(), 0.0, 1.0))
        if event_left > 0:
            event_left -= 1
            if event_left == 0:
                smile = pucker = 0.0
        elif rng.random() < event_rate:
            event_left = int(rng.integers(10, 31))
            if rng.random() < 0.5:
                smile = float(rng.uniform(0.5, 1.0))
            else:
                pucker = float(rng.uniform(0.5, 1.0))

        target = expression_keypoints(neutral, opening, smile, pucker).points
        step = target - current
        norms = np.linalg.norm(step, axis=1, keepdims=True)
        factor = np.minimum(1.0, velocity_cap / np.maximum(norms, 1e-12))
        current = current + step * factor
        out.append(KeypointSet(current.copy(), neutral.layout))
    return out


def _polygon_sdf(px: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Signed distance (positive inside) from pixel positions to a closed polygon."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    ab = b - a
    length2 = (ab ** 2).sum(axis=1)
    ap = px[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None]).sum(axis=2) / np.where(length2 > 0, length2, 1.0)[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((px[:, None, :] - closest) ** 2).sum(axis=2)).min(axis=1)

    y = px[:, 1:2]
    crosses = (a[None, :, 1] > y) != (b[None, :, 1] > y)
    dy = np.where(ab[:, 1] != 0, ab[:, 1], 1.0)[None]
    x_cross = a[None, :, 0] + (y - a[None, :, 1]) * ab[None, :, 0] / dy
    inside = (crosses & (px[:, 0:1] < x_cross)).sum(axis=1) % 2 == 1
    return np.where(inside, dist, -dist)


def _coverage(px: np.ndarray, sdf_fn, bbox: Tuple[np.ndarray, np.ndarray], softness: float) -> np.ndarray:
    lo, hi = bbox
    margin = softness
    near = np.all((px >= lo - margin) & (px <= hi + margin), axis=1)
    alpha = np.zeros(len(px))
    if np.any(near):
        alpha[near] = np.clip(0.5 + sdf_fn(px[near]) / softness, 0.0, 1.0)
    return alpha


def _polygon_coverage(px: np.ndarray, poly: np.ndarray, softness: float) -> np.ndarray:
    return _coverage(px, lambda q: _polygon_sdf(q, poly), (poly.min(axis=0), poly.max(axis=0)), softness)


def _disk_coverage(px: np.ndarray, center: np.ndarray, radius: float, softness: float) -> np.ndarray:
    return _coverage(
        px,
        lambda q: radius - np.linalg.norm(q - center, axis=1),
        (center - radius, center + radius),
        softness,
    )


def _stroke(points: np.ndarray, thickness: float) -> np.ndarray:
    offset = np.array([0.0, thickness / 2.0])
    return np.concatenate([points - offset, (points + offset)[::-1]])


def render_face(spec: SyntheticFaceSpec, kps: KeypointSet) -> np.ndarray:
    """Paint the face layer by layer with soft polygon edges.

    Returns:
        Image (3, H, W) float32 in [0, 1]; pixel values are continuous in the keypoints
    """
    H = W = spec.resolution
    unit = 0.5 * (W - 1)
    rows, cols = np.indices((H, W))
    px = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1).astype(np.float64)
    pts = to_pixels(kps.points, H, W)
    soft = spec.softness

    img = np.empty((H * W, 3))
    img[:] = spec.background

    def paint(alpha: np.ndarray, color) -> None:
        img[:] = img * (1.0 - alpha[:, None]) + np.asarray(color) * alpha[:, None]

    skin = np.asarray(spec.skin)
    forehead = pts[26:16:-1] - np.array([0.0, 0.16 * unit])
    face = np.concatenate([pts[0:17], forehead])
    r = np.linalg.norm(px - pts[27], axis=1) / (0.8 * unit)
    shading = 1.0 - 0.2 * np.clip(r, 0.0, 1.5) ** 2
    paint(_polygon_coverage(px, face, soft), skin[None, :] * shading[:, None])

    for brow in (pts[17:22], pts[22:27]):
        paint(_polygon_coverage(px, _stroke(brow, 0.035 * unit), soft), skin * 0.45)
    paint(_polygon_coverage(px, pts[NOSE_OUTLINE], soft), skin * 0.88)

    for eye in FACE68_VR31.eyes:
        ring = pts[[eye.outer_corner, *eye.upper, eye.inner_corner, *eye.lower]]
        rel = ring - ring.mean(axis=0)
        outline = ring[np.argsort(np.arctan2(rel[:, 1], rel[:, 0]))]
        eye_alpha = _polygon_coverage(px, outline, soft)
        paint(eye_alpha, (0.95, 0.95, 0.93))
        pupil = pts[eye.pupil]
        paint(eye_alpha * _disk_coverage(px, pupil, 0.04 * unit, soft), spec.iris)
        paint(eye_alpha * _disk_coverage(px, pupil, 0.018 * unit, soft), (0.05, 0.05, 0.05))

    paint(_polygon_coverage(px, pts[OUTER_LIP], soft), spec.lip)
    paint(_polygon_coverage(px, pts[INNER_LIP], soft), (0.2, 0.05, 0.07))

    return np.clip(img, 0.0, 1.0).reshape(H, W, 3).transpose(2, 0, 1).astype(np.float32)


@dataclass(frozen=True)
class MouthCamModel:
    """Synthetic headset camera: K_M = S^-1(K_VR - sag), then an optional radial squash.

    The similarity and the sag are exactly representable by a projection map;
    the squash is not.
    """
    similarity: Similarity
    sag: np.ndarray
    squash: float = 0.0
    noise: NoiseParams = field(default_factory=NoiseParams.zero)

    @classmethod
    def identity(cls, n_vr: int = FACE68_VR31.n_vr) -> "MouthCamModel":
        return cls(Similarity(), np.zeros((n_vr, 2)))

    @classmethod
    def from_config(
        cls,
        config: CorpusConfig,
        noise: NoiseConfig,
        reference_vr: np.ndarray,
        rng: np.random.Generator,
    ) -> "MouthCamModel":
        similarity = Similarity(
            config.hmd_scale,
            math.radians(config.hmd_rotation_deg),
            (config.hmd_shift_x, config.hmd_shift_y),
        )
        sag = _orthogonal_sag(reference_vr, config.hmd_sag, rng)
        params = (
            NoiseParams(0.0, 0.0, 0.0, noise.read_noise_sigma, noise.shot_noise_gain)
            if config.mouth_noise else NoiseParams.zero()
        )
        return cls(similarity, sag, config.hmd_squash, params)

    def mouth_keypoints(self, face_vr: np.ndarray) -> np.ndarray:
        face_vr = np.asarray(face_vr, dtype=np.float64)
        if face_vr.shape != self.sag.shape:
            raise GeometryError(f"headset model has {len(self.sag)} keypoints, got {face_vr.shape}")
        k = self.similarity.inverse().apply(face_vr - self.sag)
        if self.squash:
            c = k.mean(axis=0)
            rel = k - c
            k = c + rel * (1.0 + self.squash * (rel ** 2).sum(axis=1, keepdims=True))
        return k


def _orthogonal_sag(reference_vr: np.ndarray, magnitude: float, rng: np.random.Generator) -> np.ndarray:
    """Random per-keypoint offsets with no translation, scale or rotation component."""
    n = len(reference_vr)
    if magnitude == 0:
        return np.zeros((n, 2))
    rel = reference_vr - reference_vr.mean(axis=0)
    basis = np.stack([
        np.tile([1.0, 0.0], n),
        np.tile([0.0, 1.0], n),
        rel.reshape(-1),
        np.stack([-rel[:, 1], rel[:, 0]], axis=1).reshape(-1),
    ], axis=1)
    q, _ = np.linalg.qr(basis)
    s = rng.normal(size=2 * n)
    s = s - q @ (q.T @ s)
    s = s.reshape(n, 2)
    rms = float(np.sqrt((s ** 2).sum(axis=1).mean()))
    return s * (magnitude / rms)


def synth_vr_pair(
    spec: SyntheticFaceSpec,
    kps: KeypointSet,
    model: MouthCamModel,
    rng: Optional[np.random.Generator] = None,
    operator_id: Optional[str] = None,
    face_image: Optional[np.ndarray] = None,
) -> VrPairRecord:
    """Render the face and what the headset camera would see of it."""
    face = face_image if face_image is not None else render_face(spec, kps)
    face_vr = kps.vr()
    mouth_kps = model.mouth_keypoints(face_vr)
    mouth = warp_psi(face, face_vr, mouth_kps).data
    if rng is not None and not model.noise.image_identity:
        mouth = image_noise(mouth, model.noise, rng)
    return VrPairRecord(
        mouth_image=mouth.astype(np.float32),
        mouth_kps=mouth_kps,
        face_image=face,
        face_kps=kps,
        operator_id=operator_id or f"id{spec.seed}",
    )


@dataclass
class SyntheticCorpus:
    videos: List[VideoClip]
    vr_pairs: List[VrPairRecord]
    specs: Dict[str, SyntheticFaceSpec]


def render_clip(spec: SyntheticFaceSpec, trajectory: Sequence[KeypointSet], identity: str) -> VideoClip:
    return VideoClip(identity, [Frame(render_face(spec, k), k) for k in trajectory])


def make_corpus(config: Config) -> SyntheticCorpus:
    """Synthetic training corpus: one video and a set of VR pairs per identity."""
    cc = config.corpus
    videos: List[VideoClip] = []
    pairs: List[VrPairRecord] = []
    specs: Dict[str, SyntheticFaceSpec] = {}
    for i in range(cc.identities):
        identity = f"id{i:03d}"
        spec = SyntheticFaceSpec.from_seed(config.seed * 1000 + i, config.resolution, cc.softness)
        specs[identity] = spec
        rng = np.random.default_rng([config.seed, i])
        trajectory = synth_trajectory(spec, cc.frames, rng, cc.velocity_cap, cc.event_rate)
        clip = render_clip(spec, trajectory, identity)
        videos.append(clip)

        if cc.vr_pairs:
            model = MouthCamModel.from_config(cc, config.noise, neutral_keypoints(spec).vr(), rng)
            picks = rng.choice(len(clip), size=min(cc.vr_pairs, len(clip)), replace=False)
            for j in sorted(picks):
                frame = clip.frames[int(j)]
                pairs.append(synth_vr_pair(spec, frame.keypoints, model, rng, identity, frame.image))
        logger.info(f"CORPUS_IDENTITY: id={identity}, frames={len(clip)}, vr_pairs={cc.vr_pairs}")
    return SyntheticCorpus(videos, pairs, specs)


def synth_mouth_stream(
    spec: SyntheticFaceSpec,
    trajectory: Sequence[KeypointSet],
    model: MouthCamModel,
    rng: Optional[np.random.Generator] = None,
    gaze: Optional[Tuple[float, float, float]] = None,
    faces: Optional[Sequence[np.ndarray]] = None,
) -> List[MouthFrame]:
    """Mouth-camera frames for a keypoint trajectory (frame index = trajectory position)."""
    out = []
    for t, kps in enumerate(trajectory):
        face = faces[t] if faces is not None else None
        pair = synth_vr_pair(spec, kps, model, rng, face_image=face)
        out.append(MouthFrame(t, pair.mouth_image, pair.mouth_kps, gaze))
    return out


@dataclass
class OperatorSession:
    """One synthetic operator: the frontal capture and the headset view of the same motion."""
    spec: SyntheticFaceSpec
    model: MouthCamModel
    clip: VideoClip
    mouth: List[MouthFrame]

    @property
    def trajectory(self) -> List[KeypointSet]:
        return [f.keypoints for f in self.clip.frames]


def synth_session(config: Config, identity_seed: int, frames: int, stream_seed: int = 0) -> OperatorSession:
    """Render an operator session.

    The face spec and headset model depend only on ``identity_seed``; the
    motion depends on ``stream_seed`` too, so one operator can be given an
    enrolment capture and separate held-out streams.
    """
    cc = config.corpus
    spec = SyntheticFaceSpec.from_seed(identity_seed, config.resolution, cc.softness)
    model_rng = np.random.default_rng([identity_seed, 0xC0FFEE])
    model = MouthCamModel.from_config(cc, config.noise, neutral_keypoints(spec).vr(), model_rng)
    rng = np.random.default_rng([identity_seed, stream_seed])
    trajectory = synth_trajectory(spec, frames, rng, cc.velocity_cap, cc.event_rate)
    clip = render_clip(spec, trajectory, f"op{identity_seed}")
    mouth = synth_mouth_stream(spec, trajectory, model, rng, faces=[f.image for f in clip.frames])
    logger.info(f"SESSION_RENDERED: identity_seed={identity_seed}, stream_seed={stream_seed}, frames={frames}")
    return OperatorSession(spec, model, clip, mouth)
