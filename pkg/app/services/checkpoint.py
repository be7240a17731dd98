"""
Checkpoint Container Service

Binary layout, all integers little-endian:

    magic    b"M3FS"
    version  u16
    meta     u32 length, UTF-8 JSON (sorted keys), u32 CRC32 of the JSON
    count    u32 number of tensor records
    records  per tensor:
               u16 name length, name (UTF-8)
               u8 dtype code (1 = float64), u8 rank, u32 per dimension
               payload, row-major float64
               u32 CRC32 of everything above in this record

Records keep the order they were given in, so loading and saving again
writes the same bytes.
"""

import json
import logging
import struct
import zlib
from pathlib import Path
from typing import BinaryIO, Dict, Tuple, Union

import numpy as np
from pydantic import ValidationError

from app.models.training import CheckpointMeta
from app.services.errors import InvalidInputError
from app.services.numerics import Module, ShapeMismatchError

logger = logging.getLogger(__name__)

MAGIC = b"M3FS"
FORMAT_VERSION = 1
DTYPE_F64 = 1

_HEADER = struct.Struct("<4sH")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")
_DTYPE_RANK = struct.Struct("<BB")


# ============================================================================
# Custom Exceptions
# ============================================================================

class CheckpointError(InvalidInputError):
    """Raised when a checkpoint cannot be read or applied"""
    pass


class VersionMismatchError(CheckpointError):
    """Raised for an unknown magic or format version"""
    def __init__(self, found, expected=FORMAT_VERSION):
        self.found = found
        super().__init__(f"Checkpoint format version {found} is not supported (expected {expected})")


class CorruptRecordError(CheckpointError):
    """Raised when a checksum does not match or the file ends early"""
    def __init__(self, record: str, reason: str):
        self.record = record
        super().__init__(f"Corrupt checkpoint record '{record}': {reason}")


class CheckpointShapeError(CheckpointError):
    """Raised when stored tensors do not fit the model"""
    def __init__(self, record: str, detail: str):
        self.record = record
        super().__init__(f"Checkpoint record '{record}' does not match the model: {detail}")


# ============================================================================
# Writing
# ============================================================================

def _encode_record(name: str, value: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    array = np.ascontiguousarray(value, dtype="<f8")
    body = b"".join(
        [
            _U16.pack(len(raw_name)),
            raw_name,
            _DTYPE_RANK.pack(DTYPE_F64, array.ndim),
            b"".join(_U32.pack(d) for d in array.shape),
            array.tobytes(order="C"),
        ]
    )
    return body + _U32.pack(zlib.crc32(body))


def encode_checkpoint(state: Dict[str, np.ndarray], meta: CheckpointMeta) -> bytes:
    meta_json = json.dumps(meta.model_dump(mode="json"), sort_keys=True).encode("utf-8")
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION),
        _U32.pack(len(meta_json)),
        meta_json,
        _U32.pack(zlib.crc32(meta_json)),
        _U32.pack(len(state)),
    ]
    parts += [_encode_record(name, value) for name, value in state.items()]
    return b"".join(parts)


def save_checkpoint(path: Union[str, Path], state: Dict[str, np.ndarray], meta: CheckpointMeta) -> Path:
    """Write state and meta; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(state, meta)
    path.write_bytes(data)
    logger.info("Saved checkpoint %s (%d records, %d bytes)", path, len(state), len(data))
    return path


# ============================================================================
# Reading
# ============================================================================

class _Reader:
    """Cursor over the checkpoint bytes that reports truncation per record."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, record: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptRecordError(record, "unexpected end of file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: struct.Struct, record: str) -> Tuple:
        return fmt.unpack(self.take(fmt.size, record))


def _decode_record(reader: _Reader, index: int) -> Tuple[str, np.ndarray]:
    label = f"#{index}"
    start = reader.pos
    (name_len,) = reader.unpack(_U16, label)
    try:
        name = reader.take(name_len, label).decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptRecordError(label, "name is not UTF-8") from None
    dtype, rank = reader.unpack(_DTYPE_RANK, name)
    shape = tuple(reader.unpack(_U32, name)[0] for _ in range(rank))
    if dtype != DTYPE_F64:
        raise CorruptRecordError(name, f"unknown dtype code {dtype}")
    n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
    payload = reader.take(n_bytes, name)
    body = reader.data[start:reader.pos]
    (stored_crc,) = reader.unpack(_U32, name)
    if zlib.crc32(body) != stored_crc:
        raise CorruptRecordError(name, "CRC32 mismatch")
    value = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return name, value


def decode_checkpoint(data: bytes) -> Tuple[CheckpointMeta, Dict[str, np.ndarray]]:
    """
    Parse checkpoint bytes.

    Raises:
        VersionMismatchError: If the magic or version is not recognised
        CorruptRecordError: If a checksum fails or the data is truncated
    """
    reader = _Reader(data)
    magic, version = reader.unpack(_HEADER, "header")
    if magic != MAGIC:
        raise VersionMismatchError(repr(magic))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version)

    (meta_len,) = reader.unpack(_U32, "meta")
    meta_json = reader.take(meta_len, "meta")
    (meta_crc,) = reader.unpack(_U32, "meta")
    if zlib.crc32(meta_json) != meta_crc:
        raise CorruptRecordError("meta", "CRC32 mismatch")
    try:
        meta = CheckpointMeta.model_validate(json.loads(meta_json.decode("utf-8")))
    except (ValueError, ValidationError) as e:
        raise CorruptRecordError("meta", str(e)) from e

    (count,) = reader.unpack(_U32, "count")
    state: Dict[str, np.ndarray] = {}
    for index in range(count):
        name, value = _decode_record(reader, index)
        if name in state:
            raise CorruptRecordError(name, "duplicate record name")
        state[name] = value
    if reader.pos != len(data):
        raise CorruptRecordError("trailer", f"{len(data) - reader.pos} unexpected trailing bytes")
    return meta, state


def load_checkpoint(path: Union[str, Path]) -> Tuple[CheckpointMeta, Dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint '{path}': {e}") from e
    meta, state = decode_checkpoint(data)
    logger.info("Loaded checkpoint %s (%d records, epoch %d)", path, len(state), meta.epoch)
    return meta, state


def apply_state(model: Module, state: Dict[str, np.ndarray]) -> None:
    """
    Copy stored tensors into model.

    Raises:
        CheckpointShapeError: Naming the first record that is missing, unexpected or mis-shaped
    """
    own = model.state_dict()
    for name in own:
        if name not in state:
            raise CheckpointShapeError(name, "missing from checkpoint")
    for name, value in state.items():
        if name not in own:
            raise CheckpointShapeError(name, "not a parameter or buffer of the model")
        if value.shape != own[name].shape:
            raise CheckpointShapeError(name, f"stored shape {value.shape}, model expects {own[name].shape}")
    try:
        model.load_state_dict(state)
    except ShapeMismatchError as e:
        raise CheckpointShapeError("state", str(e)) from e
