"""Named-tensor checkpoint container ("FACC" binary format).

Layout (little-endian)::

    b"FACC" | version u32 = 1 | count u32
    per entry: name_len u16 | UTF-8 name | rank u8 | dims u32 * rank | f32 * prod(dims)
"""

import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from app.errors import CheckpointFormatError
from app.tensorcore.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"FACC"
VERSION = 1
HEADER = struct.Struct("<4sII")

Entry = Tuple[str, Tensor]


def save_checkpoint(entries: Sequence[Tuple[str, Union[Tensor, np.ndarray]]]) -> bytes:
    """Serialize named tensors; values are stored as float32.

    Raises:
        CheckpointFormatError: On duplicate or over-long names, or rank > 255
    """
    seen = set()
    chunks = [HEADER.pack(MAGIC, VERSION, len(entries))]
    for name, tensor in entries:
        if name in seen:
            raise CheckpointFormatError(f"duplicate checkpoint entry '{name}'")
        seen.add(name)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointFormatError(f"entry name too long ({len(raw_name)} bytes)")
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        if data.ndim > 0xFF:
            raise CheckpointFormatError(f"rank {data.ndim} of '{name}' exceeds 255")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack(f"<B{data.ndim}I", data.ndim, *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_checkpoint(blob: bytes) -> List[Entry]:
    """Parse checkpoint bytes into ``(name, Tensor)`` entries in file order.

    Raises:
        CheckpointFormatError: On bad magic, unsupported version, truncation,
            duplicate names or trailing bytes
    """
    view = memoryview(blob)

    def take(offset: int, size: int, what: str) -> memoryview:
        if offset + size > len(view):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what} at byte {offset}")
        return view[offset:offset + size]

    magic, version, count = HEADER.unpack(take(0, HEADER.size, "header"))
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")

    offset = HEADER.size
    entries: List[Entry] = []
    names = set()
    for index in range(count):
        (name_len,) = struct.unpack("<H", take(offset, 2, f"entry {index} name length"))
        offset += 2
        try:
            name = bytes(take(offset, name_len, f"entry {index} name")).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"entry {index} name is not valid UTF-8") from e
        offset += name_len
        if name in names:
            raise CheckpointFormatError(f"duplicate checkpoint entry '{name}'")
        names.add(name)
        (rank,) = struct.unpack("<B", take(offset, 1, f"'{name}' rank"))
        offset += 1
        dims = struct.unpack(f"<{rank}I", take(offset, 4 * rank, f"'{name}' dims"))
        offset += 4 * rank
        n_values = int(np.prod(dims, dtype=np.int64))
        payload = take(offset, 4 * n_values, f"'{name}' values")
        offset += 4 * n_values
        values = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
        entries.append((name, Tensor(values, dtype=np.float32)))

    if offset != len(view):
        raise CheckpointFormatError(f"{len(view) - offset} trailing bytes after {count} entries")
    return entries


def write_checkpoint_file(path: Union[str, Path], entries: Sequence[Tuple[str, Tensor]]) -> Path:
    """Atomically write a checkpoint file (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = save_checkpoint(entries)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except Exception:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    logger.info(f"CHECKPOINT_SAVED: path={path}, entries={len(entries)}, bytes={len(blob)}")
    return path


def read_checkpoint_file(path: Union[str, Path]) -> List[Entry]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    return load_checkpoint(blob)
