"""Binary PPM (P6, 8-bit) images <-> C x H x W float arrays in [0, 1]."""

import logging
from pathlib import Path

import cv2
import numpy as np

from app.errors import CorpusError
from storage.files import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)


def quantize(image: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid the PPM format stores (float32, values k/255)."""
    image = np.asarray(image, dtype=np.float64)
    return (np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise CorpusError(f"PPM images must be 3 x H x W, got {image.shape}")
    rgb = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)
    bgr = cv2.cvtColor(np.ascontiguousarray(rgb), cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".ppm", bgr, [cv2.IMWRITE_PXM_BINARY, 1])
    if not ok:
        raise CorpusError("PPM encoding failed")
    return buf.tobytes()


def decode_ppm(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if not data.startswith(b"P6"):
        raise CorpusError(f"{source}: not a binary PPM (P6) image")
    bgr = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_COLOR)
    if bgr is None:
        raise CorpusError(f"{source}: cannot decode PPM image")
    rgb = cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)
    return (rgb.transpose(2, 0, 1).astype(np.float32) / 255.0).astype(np.float32)


def write_ppm(path: PathLike, image: np.ndarray) -> Path:
    return atomic_write_bytes(path, encode_ppm(image))


def read_ppm(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorpusError(f"cannot read image {path}: {e}") from e
    return decode_ppm(data, str(path))
