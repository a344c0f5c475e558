"""
Tensor Container
Binary file shared by checkpoints, probes and perturbations

Layout (all integers little-endian)::

    magic      4 bytes  b"UTLB"
    version    u16      1
    count      u32
    per tensor: name length u16, UTF-8 name, rank u8, rank × u32 extents,
                prod(extents) × float32
    record     u32 length + bytes   (fixed-order artifact fields; omitted when empty)

A plain container ends right after its last tensor, so readers that stop
there see only the tensors.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..core.exceptions import FormatError

logger = logging.getLogger(__name__)

MAGIC = b"UTLB"
VERSION = 1


@dataclass
class Container:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    record: bytes = b""


def encode_container(tensors: Dict[str, np.ndarray], record: bytes = b"") -> bytes:
    parts: List[bytes] = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, value in tensors.items():
        raw_name = name.encode("utf-8")
        array = np.ascontiguousarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(array.tobytes())
    if record:
        parts.append(struct.pack("<I", len(record)))
        parts.append(record)
    return b"".join(parts)


class _Cursor:
    """Bounds-checked reads that report offsets on truncation."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(
                f"{self.source}: truncated while reading {what} at byte {self.pos}: "
                f"expected {n} bytes, got {len(self.data) - self.pos} (file length {len(self.data)})"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(data: bytes, source: str = "<bytes>") -> Container:
    cursor = _Cursor(data, source)
    magic = cursor.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = cursor.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported container version {version}, expected {VERSION}")
    (count,) = cursor.unpack("<I", "tensor count")

    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = cursor.unpack("<H", f"name length of tensor {i}")
        try:
            name = cursor.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: tensor {i} name is not UTF-8: {e}") from None
        (rank,) = cursor.unpack("<B", f"rank of '{name}'")
        extents = cursor.unpack(f"<{rank}I", f"extents of '{name}'")
        size = int(np.prod(extents, dtype=np.int64)) if rank else 1
        payload = cursor.take(4 * size, f"data of '{name}'")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(extents).astype(np.float32)

    record = b""
    if cursor.pos < len(data):
        (record_len,) = cursor.unpack("<I", "record length")
        record = cursor.take(record_len, "record")
    if cursor.pos != len(data):
        raise FormatError(f"{source}: {len(data) - cursor.pos} trailing bytes after byte {cursor.pos}")
    return Container(tensors=tensors, record=record)


def write_container(path: Path, tensors: Dict[str, np.ndarray], record: bytes = b"") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_container(tensors, record))
    logger.debug(f"Wrote container {path} ({len(tensors)} tensors)")
    return path


def read_container(path: Path) -> Container:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"{path}: no such container file")
    return decode_container(path.read_bytes(), str(path))


class RecordWriter:
    """Fixed-order binary fields for the container record block."""

    def __init__(self):
        self._parts: List[bytes] = []

    def u8(self, value: int) -> "RecordWriter":
        self._parts.append(struct.pack("<B", value))
        return self

    def u32(self, value: int) -> "RecordWriter":
        self._parts.append(struct.pack("<I", value))
        return self

    def i64(self, value: int) -> "RecordWriter":
        self._parts.append(struct.pack("<q", value))
        return self

    def f64(self, value: float) -> "RecordWriter":
        self._parts.append(struct.pack("<d", value))
        return self

    def text(self, value: str) -> "RecordWriter":
        raw = value.encode("utf-8")
        self._parts.append(struct.pack("<H", len(raw)) + raw)
        return self

    def texts(self, values: Sequence[str]) -> "RecordWriter":
        self.u32(len(values))
        for value in values:
            self.text(value)
        return self

    def bytes(self) -> bytes:
        return b"".join(self._parts)


class RecordReader:
    def __init__(self, record: bytes, source: str = "<record>"):
        self._cursor = _Cursor(record, f"{source} record")

    def u8(self, what: str) -> int:
        return self._cursor.unpack("<B", what)[0]

    def u32(self, what: str) -> int:
        return self._cursor.unpack("<I", what)[0]

    def i64(self, what: str) -> int:
        return self._cursor.unpack("<q", what)[0]

    def f64(self, what: str) -> float:
        return self._cursor.unpack("<d", what)[0]

    def text(self, what: str) -> str:
        (length,) = self._cursor.unpack("<H", f"length of {what}")
        return self._cursor.take(length, what).decode("utf-8")

    def texts(self, what: str) -> List[str]:
        return [self.text(f"{what}[{i}]") for i in range(self.u32(f"count of {what}"))]

    def finish(self) -> None:
        cursor = self._cursor
        if cursor.pos != len(cursor.data):
            raise FormatError(f"{cursor.source}: {len(cursor.data) - cursor.pos} unread bytes")
