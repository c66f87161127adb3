import io
import struct

import numpy as np
import pytest

from ctxedit.errors import FormatError
from ctxedit.tensorio import (CHECKPOINT_MAGIC, SAMPLE_MAGIC, dumps_container, loads_container, read_tensor,
                              write_tensor)


def roundtrip(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    data = buf.getvalue()
    back = read_tensor(io.BytesIO(data))
    return data, back


@pytest.mark.parametrize("dtype", ["<f4", "<f8", "u1", "<i8", "<i4"])
def test_tensor_roundtrip(dtype):
    arr = (np.arange(24).reshape(2, 3, 4) * 1.5).astype(dtype)
    data, back = roundtrip(arr)
    assert back.dtype == np.dtype(dtype)
    np.testing.assert_array_equal(back, arr)
    again = io.BytesIO()
    write_tensor(again, back)
    assert again.getvalue() == data


def test_header_layout():
    data, _ = roundtrip(np.zeros((2, 5), np.float32))
    assert data[:4] == b"CXTN"
    assert data[4:7] == bytes([1, 0, 2])
    assert struct.unpack("<2I", data[7:15]) == (2, 5)
    assert len(data) == 15 + 40


def test_big_endian_input_is_written_little_endian():
    arr = np.arange(6, dtype=">f8")
    data, back = roundtrip(arr)
    assert back.dtype == np.dtype("<f8")
    np.testing.assert_array_equal(back, arr)


def test_bool_stored_as_bytes():
    _, back = roundtrip(np.array([True, False, True]))
    assert back.dtype == np.uint8
    assert back.tolist() == [1, 0, 1]


def test_scalar_rank_zero():
    _, back = roundtrip(np.float64(3.25))
    assert back.shape == () and float(back) == 3.25


def test_unsupported_dtype():
    with pytest.raises(FormatError):
        roundtrip(np.zeros(3, np.complex64))


def test_truncated():
    data, _ = roundtrip(np.ones(4, np.float32))
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(data[:-1]))


def test_container_roundtrip_bytes():
    tensors = {"a": np.arange(3, dtype=np.int64), "b/c": np.eye(2, dtype=np.float32)}
    header = {"z": 1, "a": [1, 2], "nested": {"k": "v"}}
    blob = dumps_container(SAMPLE_MAGIC, header, tensors)
    h, t = loads_container(blob, SAMPLE_MAGIC)
    assert h == header
    assert list(t) == ["a", "b/c"]
    assert dumps_container(SAMPLE_MAGIC, h, t) == blob


def test_container_wrong_magic_and_trailing_bytes():
    blob = dumps_container(SAMPLE_MAGIC, {}, {})
    with pytest.raises(FormatError):
        loads_container(blob, CHECKPOINT_MAGIC)
    with pytest.raises(FormatError):
        loads_container(blob + b"\0", SAMPLE_MAGIC)
