"""Frame encoding and chunk-boundary-independent decoding."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beamkit.mtable import MTable
from beamkit.protocol import (FrameDecoder, ProtocolError, encode_done,
                              encode_err, encode_exec, encode_num, encode_str,
                              encode_tbl, encode_value, encode_vec)


def sample_table():
    t = MTable("tw")
    t.add_col("name", ["qf", "qd"])
    t.add_col("s", np.array([0.0, 5.0]))
    t.add_col("betx", np.array([13.5, 3.2]))
    return t


def sample_stream():
    parts = [
        encode_num(1.5),
        encode_str("hello world"),
        encode_vec(np.linspace(0, 1, 7)),
        encode_tbl(sample_table()),
        encode_err("boom"),
        encode_exec("a = 1;"),
        encode_done(),
    ]
    return b"".join(parts)


def decode_all(stream, chunks=None):
    dec = FrameDecoder()
    out = []
    if chunks is None:
        out.extend(dec.feed(stream))
    else:
        pos = 0
        for c in chunks:
            out.extend(dec.feed(stream[pos:pos + c]))
            pos += c
        out.extend(dec.feed(stream[pos:]))
    return out


def assert_frames_equal(a, b):
    assert len(a) == len(b)
    for fa, fb in zip(a, b):
        assert fa[0] == fb[0]
        if fa[0] == "vec":
            assert fa[1].tobytes() == fb[1].tobytes()
        elif fa[0] == "tbl":
            assert fa[1].colnames == fb[1].colnames
            for k in fa[1].colnames:
                ca, cb = fa[1].col(k), fb[1].col(k)
                if isinstance(ca, list):
                    assert ca == cb
                else:
                    assert ca.tobytes() == cb.tobytes()
        elif len(fa) > 1:
            assert fa[1] == fb[1]


def test_scalar_roundtrip():
    frames = decode_all(encode_num(1.5))
    assert frames == [("num", 1.5)]


def test_value_dispatch():
    assert encode_value(2).startswith(b"NUM")
    assert encode_value("x").startswith(b"STR")
    assert encode_value([1.0, 2.0]).startswith(b"VEC")
    assert encode_value(sample_table()).startswith(b"TBL")
    with pytest.raises(ProtocolError):
        encode_value(object())


def test_vec_bit_exact():
    rng = np.random.default_rng(0)
    v = rng.normal(size=210)
    frames = decode_all(encode_vec(v))
    assert frames[0][0] == "vec"
    assert frames[0][1].tobytes() == v.astype("<f8").tobytes()


def test_table_roundtrip_preserves_order():
    frames = decode_all(encode_tbl(sample_table()))
    t = frames[0][1]
    assert t.colnames == ["name", "s", "betx"]
    assert list(t.col("name")) == ["qf", "qd"]
    assert t.col("betx").tobytes() == np.array([13.5, 3.2]).tobytes()


def test_whole_stream_single_feed():
    got = decode_all(sample_stream())
    tags = [f[0] for f in got]
    assert tags == ["num", "str", "vec", "tbl", "err", "exec", "done"]


def test_stream_split_every_byte():
    stream = sample_stream()
    ref = decode_all(stream)
    got = decode_all(stream, chunks=[1] * len(stream))
    assert_frames_equal(got, ref)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=60))
def test_stream_random_chunking(chunks):
    stream = sample_stream()
    ref = decode_all(stream)
    got = decode_all(stream, chunks=chunks)
    assert_frames_equal(got, ref)


def test_malformed_header_raises():
    dec = FrameDecoder()
    with pytest.raises(ProtocolError):
        dec.feed(b"BOGUS 12\n")


def test_incomplete_frame_waits():
    dec = FrameDecoder()
    assert dec.feed(b"VEC 4\n" + b"\x00" * 8) == []
    out = dec.feed(b"\x00" * 24)
    assert out[0][0] == "vec" and len(out[0][1]) == 4


def test_complex_columns_split_on_wire():
    t = MTable("c")
    t.add_col("f", np.array([1 + 2j, 3 - 4j]))
    frames = decode_all(encode_tbl(t))
    t2 = frames[0][1]
    assert t2.colnames == ["f_re", "f_im"]
