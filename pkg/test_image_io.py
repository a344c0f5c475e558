#!/usr/bin/env python3
"""
Tests for PPM/PGM encoding and decoding
"""

import numpy as np
import pytest

from src.core.exceptions import FormatError, ShapeError
from src.infrastructure import image_io


def test_zero_image_encoding():
    data = image_io.encode_ppm(np.zeros((64, 64, 3)))
    header = b"P6\n64 64\n255\n"
    assert data.startswith(header)
    assert len(data) == len(header) + 12288
    assert set(data[len(header):]) == {0}


def test_rounding_is_half_up_and_clamped():
    np.testing.assert_array_equal(image_io.to_bytes(np.array([127.6, 127.5, 127.4, -3.0, 300.0])),
                                  [128, 128, 127, 0, 255])


def test_ppm_round_trip(tmp_path):
    image = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.float32)
    path = image_io.write_ppm(image, tmp_path / "nested" / "a.ppm")
    loaded = image_io.read_ppm(path)
    assert loaded.shape == (5, 7, 3)
    np.testing.assert_array_equal(loaded, image)


def test_header_comments_are_skipped(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n2 1\n# maxval next\n255\n" + bytes([1, 2, 3, 4, 5, 6]))
    np.testing.assert_array_equal(image_io.read_ppm(path), [[[1, 2, 3], [4, 5, 6]]])


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.ppm"
    path.write_bytes(image_io.encode_ppm(np.zeros((4, 4, 3)))[:-5])
    with pytest.raises(FormatError, match="expected 48 bytes, got 43"):
        image_io.read_ppm(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "m.ppm"
    path.write_bytes(b"P3\n1 1\n255\n" + bytes(3))
    with pytest.raises(FormatError, match="magic"):
        image_io.read_ppm(path)


def test_unsupported_maxval(tmp_path):
    path = tmp_path / "v.ppm"
    path.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(FormatError, match="maxval"):
        image_io.read_ppm(path)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "x.ppm"
    path.write_bytes(image_io.encode_ppm(np.zeros((1, 1, 3))) + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        image_io.read_ppm(path)


def test_pgm_round_trip(tmp_path):
    values = np.array([[0, 64], [128, 255]], dtype=np.float32)
    path = image_io.write_pgm(values, tmp_path / "g.pgm")
    assert path.read_bytes().startswith(b"P5\n2 2\n255\n")
    np.testing.assert_array_equal(image_io.read_pgm(path), values)


def test_shape_checks():
    with pytest.raises(ShapeError):
        image_io.encode_ppm(np.zeros((4, 4)))
