import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nabla_attn.errors import FormatError, IoError, ValidationError
from nabla_attn.tensor_io import (
    as_tensor,
    decode_tensor,
    encode_tensor,
    header_size,
    load_tensor,
    save_tensor,
)

DATA = Path(__file__).parent / "data"


def _raw(dims, payload, magic=b"NTSR", version=1, dtype=1, rank=None):
    rank = len(dims) if rank is None else rank
    return (magic + struct.pack("<IBB2s", version, dtype, rank, b"\0\0")
            + struct.pack(f"<{len(dims)}Q", *dims) + payload)


def test_zero_payload(tmp_path):
    p = tmp_path / "z.ntsr"
    p.write_bytes(_raw([2, 3], bytes(24)))
    t = load_tensor(p)
    assert t.shape == (2, 3)
    assert (t == 0.0).all()


def test_single_one(tmp_path):
    p = tmp_path / "one.ntsr"
    p.write_bytes(_raw([1], struct.pack("<f", 1.0)))
    assert load_tensor(p).tolist() == [1.0]


def test_scalar_file_length(tmp_path):
    # 4 magic + 4 version + 1 dtype + 1 rank + 2 reserved + 8 dim, then 4 payload
    p = tmp_path / "s.ntsr"
    save_tensor(np.array([0.0]), p)
    assert header_size(1) == 20
    assert p.stat().st_size == 4 + 4 + 1 + 1 + 2 + 8 + 4
    assert p.read_bytes() == _raw([1], bytes(4))


def test_seeded_roundtrip_byte_identical(tmp_path):
    x = np.random.default_rng(3).standard_normal((4, 8, 16)).astype(np.float32)
    a, b = tmp_path / "a.ntsr", tmp_path / "b.ntsr"
    save_tensor(x, a)
    y = load_tensor(a)
    save_tensor(y, b)
    assert a.read_bytes() == b.read_bytes()
    assert y.dtype == np.float32 and y.shape == x.shape
    assert np.array_equal(x, y)
    # payload is the raw little-endian float bytes
    assert a.read_bytes()[header_size(3):] == x.astype("<f4").tobytes()


def test_deterministic(tmp_path):
    x = np.linspace(-1, 1, 12).reshape(3, 4)
    save_tensor(x, tmp_path / "1")
    save_tensor(x, tmp_path / "2")
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_golden_file():
    expected = np.array([[1.0, -2.0, 0.5], [0.0, 3.25, -0.125]], dtype=np.float32)
    golden = (DATA / "tensor_2x3.ntsr").read_bytes()
    assert np.array_equal(load_tensor(DATA / "tensor_2x3.ntsr"), expected)
    assert encode_tensor(expected) == golden


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_non_finite_rejected_on_save(tmp_path, bad):
    with pytest.raises(ValidationError):
        save_tensor(np.array([1.0, bad]), tmp_path / "x.ntsr")
    assert not (tmp_path / "x.ntsr").exists()


def test_non_finite_rejected_on_load():
    with pytest.raises(ValidationError):
        decode_tensor(_raw([2], struct.pack("<2f", 1.0, float("nan"))))


@pytest.mark.parametrize(
    "buf",
    [
        _raw([2], bytes(8), magic=b"NTSX"),
        _raw([2], bytes(8), dtype=2),
        _raw([2], bytes(8), version=2),
        _raw([], b"", rank=0),
        _raw([1, 1, 1, 1, 1], bytes(4)),
        _raw([2, 3], bytes(23)),
        _raw([2, 3], bytes(25)),
        _raw([0], b""),
        b"NTS",
        b"NTSR" + struct.pack("<IBB2s", 1, 1, 2, b"\0\0") + struct.pack("<Q", 2),
    ],
    ids=["magic", "dtype", "version", "rank0", "rank5", "short", "long", "zero-dim",
         "tiny", "truncated-dims"],
)
def test_bad_headers(buf):
    with pytest.raises(FormatError):
        decode_tensor(buf)


def test_rank_and_extent_validation():
    with pytest.raises(ValidationError):
        as_tensor(np.zeros((1, 1, 1, 1, 1)))
    with pytest.raises(ValidationError):
        as_tensor(np.float32(1.0))
    with pytest.raises(ValidationError):
        as_tensor(np.zeros((2, 0)))


def test_io_errors(tmp_path):
    with pytest.raises(IoError):
        save_tensor(np.zeros(2), tmp_path / "missing" / "x.ntsr")
    with pytest.raises(IoError):
        load_tensor(tmp_path / "nope.ntsr")
    with pytest.raises(OSError):
        load_tensor(tmp_path / "nope.ntsr")


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 5), min_size=1, max_size=4).map(tuple),
              elements=st.floats(width=32, allow_nan=False, allow_infinity=False)))
def test_roundtrip_property(x):
    y = decode_tensor(encode_tensor(x))
    assert y.shape == x.shape
    assert np.array_equal(y, x)
    assert encode_tensor(y) == encode_tensor(x)
