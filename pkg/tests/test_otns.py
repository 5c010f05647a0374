import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ouro import otns


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.text(max_size=20))
def test_round_trip_is_bitwise(arr, name):
    out, got = otns.decode(otns.encode(arr, name))
    assert got == name
    assert out.dtype == np.float32
    assert out.tobytes() == arr.tobytes()


def test_header_layout():
    buf = otns.encode(np.zeros((2, 3), np.float32), "ab")
    assert buf[:4] == b"OTNS"
    version, ndim, h, w, dtype = struct.unpack_from("<5I", buf, 4)
    assert (version, ndim, h, w, dtype) == (1, 2, 2, 3, 0)
    assert len(buf) == 4 + 5 * 4 + 6 * 4 + 4 + 2


def test_zero_dim_and_empty_name():
    arr, name = otns.decode(otns.encode(np.float32(3.5)))
    assert arr.shape == () and float(arr) == 3.5 and name == ""


@pytest.mark.parametrize("mutate, err", [
    (lambda b: b"XTNS" + b[4:], otns.BadMagicError),
    (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], otns.VersionMismatchError),
    (lambda b: b[:30], otns.TruncatedPayloadError),
    (lambda b: b[:6], otns.TruncatedPayloadError),
])
def test_corrupt_buffers_are_rejected(mutate, err):
    buf = otns.encode(np.ones((4, 4, 3), np.float32), "albedo")
    with pytest.raises(err):
        otns.decode(mutate(buf))


def test_unknown_dtype_code():
    buf = bytearray(otns.encode(np.ones((2,), np.float32)))
    struct.pack_into("<I", buf, 4 + 4 + 4 + 4, 7)
    with pytest.raises(otns.UnsupportedDtypeError):
        otns.decode(bytes(buf))


def test_non_finite_refused_on_write():
    with pytest.raises(otns.OTNSError):
        otns.encode(np.array([1.0, np.nan], np.float32))


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    otns.write_tensor(tmp_path / "x.otns", arr, "rgb")
    back, name = otns.read_tensor(tmp_path / "x.otns")
    np.testing.assert_array_equal(back, arr)
    assert name == "rgb"
