#!/usr/bin/env python3
"""
Tests for the UTLB tensor container
"""

import struct

import numpy as np
import pytest

from src.core.exceptions import FormatError
from src.infrastructure.tensor_container import (
    RecordReader, RecordWriter, decode_container, encode_container, read_container, write_container,
)


def _tensors():
    return {
        "weights": np.arange(12, dtype=np.float32).reshape(3, 4),
        "bias": np.array([0.5, -1.5], dtype=np.float32),
        "scalar": np.array(3.0, dtype=np.float32),
    }


def test_round_trip_preserves_order_and_values(tmp_path):
    record = RecordWriter().u8(2).text("UTAP").f64(20.0).texts(["a-s1", "b-s2"]).bytes()
    path = write_container(tmp_path / "x.utlb", _tensors(), record)
    loaded = read_container(path)
    assert list(loaded.tensors) == ["weights", "bias", "scalar"]
    for name, value in _tensors().items():
        np.testing.assert_array_equal(loaded.tensors[name], value)

    reader = RecordReader(loaded.record)
    assert reader.u8("kind") == 2
    assert reader.text("name") == "UTAP"
    assert reader.f64("epsilon") == 20.0
    assert reader.texts("sources") == ["a-s1", "b-s2"]
    reader.finish()


def test_encoding_is_byte_stable():
    assert encode_container(_tensors()) == encode_container(_tensors())


def test_header_layout():
    data = encode_container({}, b"")
    assert data == b"UTLB" + struct.pack("<HI", 1, 0)


def test_record_follows_the_tensors():
    plain = encode_container({"w": np.ones(2, dtype=np.float32)})
    with_record = encode_container({"w": np.ones(2, dtype=np.float32)}, b"meta")
    assert struct.unpack_from("<I", with_record, 6) == (1,)
    assert with_record == plain + struct.pack("<I", 4) + b"meta"
    assert decode_container(with_record).record == b"meta"
    assert decode_container(plain).record == b""


def test_bad_magic():
    data = b"XXXX" + encode_container(_tensors())[4:]
    with pytest.raises(FormatError, match="bad magic"):
        decode_container(data)


def test_unsupported_version():
    data = bytearray(encode_container(_tensors()))
    data[4:6] = struct.pack("<H", 2)
    with pytest.raises(FormatError, match="version 2"):
        decode_container(bytes(data))


def test_truncation_reports_sizes():
    data = encode_container({"w": np.zeros(4, dtype=np.float32)})
    with pytest.raises(FormatError, match="expected 16 bytes, got 12"):
        decode_container(data[:-4])


def test_trailing_bytes():
    with pytest.raises(FormatError, match="trailing"):
        decode_container(encode_container(_tensors(), b"meta") + b"\x00")


def test_partial_record_length_is_truncation():
    with pytest.raises(FormatError, match="record length"):
        decode_container(encode_container(_tensors()) + b"\x00")


def test_missing_file(tmp_path):
    with pytest.raises(FormatError):
        read_container(tmp_path / "absent.utlb")


def test_record_reader_flags_unread_bytes():
    reader = RecordReader(RecordWriter().u32(1).u32(2).bytes())
    reader.u32("first")
    with pytest.raises(FormatError, match="unread"):
        reader.finish()
