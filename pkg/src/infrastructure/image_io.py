"""
Netpbm image files
Binary PPM (P6, RGB) and PGM (P5, gray), maxval 255
"""

import logging
from pathlib import Path
from typing import List, Tuple

import numpy as np

from ..core.exceptions import FormatError, ShapeError

logger = logging.getLogger(__name__)

_WHITESPACE = b" \t\r\n"


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Round half up to the nearest integer and clamp into [0,255]."""
    return np.clip(np.floor(np.asarray(values, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


def _encode(magic: str, pixels: np.ndarray) -> bytes:
    height, width = pixels.shape[:2]
    return f"{magic}\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def _parse_header(data: bytes, source: str) -> Tuple[str, int, int, int]:
    """Return magic, width, height and the payload offset."""
    tokens: List[Tuple[bytes, int]] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and (data[pos:pos + 1] in _WHITESPACE or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        if pos >= len(data):
            raise FormatError(f"{source}: header ends at byte {pos} after {len(tokens)} of 4 fields")
        start = pos
        while pos < len(data) and data[pos:pos + 1] not in _WHITESPACE:
            pos += 1
        tokens.append((data[start:pos], start))
    if pos >= len(data):
        raise FormatError(f"{source}: missing whitespace after maxval at byte {pos}")
    payload_offset = pos + 1

    magic = tokens[0][0].decode("ascii", errors="replace")
    values = []
    for name, (raw, offset) in zip(("width", "height", "maxval"), tokens[1:]):
        if not raw.isdigit():
            raise FormatError(f"{source}: {name} {raw!r} at byte {offset} is not a positive integer")
        values.append(int(raw))
    width, height, maxval = values
    if maxval != 255:
        raise FormatError(f"{source}: maxval {maxval} at byte {tokens[3][1]} unsupported (only 255)")
    if width < 1 or height < 1:
        raise FormatError(f"{source}: empty image {width}x{height}")
    return magic, width, height, payload_offset


def _decode(data: bytes, expected_magic: str, channels: int, source: str) -> np.ndarray:
    magic, width, height, offset = _parse_header(data, source)
    if magic != expected_magic:
        raise FormatError(f"{source}: magic {magic!r} at byte 0, expected {expected_magic!r}")
    expected = width * height * channels
    actual = len(data) - offset
    if actual < expected:
        raise FormatError(
            f"{source}: truncated payload at byte {offset}: expected {expected} bytes, got {actual}"
        )
    if actual > expected:
        raise FormatError(f"{source}: {actual - expected} trailing bytes after payload at byte {offset + expected}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return pixels.reshape(shape).astype(np.float32)


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"PPM needs an (H,W,3) image, got {image.shape}")
    return _encode("P6", to_bytes(image))


def write_ppm(image: np.ndarray, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_ppm(image))
    return path


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    return _decode(path.read_bytes(), "P6", 3, str(path))


def write_pgm(values: np.ndarray, path: Path) -> Path:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ShapeError(f"PGM needs a 2-D array, got {values.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_encode("P5", to_bytes(values)))
    return path


def read_pgm(path: Path) -> np.ndarray:
    path = Path(path)
    return _decode(path.read_bytes(), "P5", 1, str(path))
