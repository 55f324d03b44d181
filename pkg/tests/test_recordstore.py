import os
import struct

import google_crc32c
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from causalchips.errors import CrcMismatch, DuplicateKey, EmptyInput, KeyNotFound, TruncatedFile
from causalchips.recordstore import (
    RecordReader,
    RecordWriter,
    crc32c,
    expected_file_size,
    open_records,
    read_by_keys,
    read_sequential,
    validate,
    write_records,
)


def golden_bytes():
    """Two-record file assembled by hand from the published layout."""
    recs = [("a", np.array([1.0, 2.0], "<f4")), ("bc", np.array([[[0.5], [-3.0]]], "<f4"))]
    body = b""
    offsets = []
    for key, arr in recs:
        kb = key.encode()
        payload = struct.pack("<H", len(kb)) + kb + struct.pack("<BB", 0, arr.ndim)
        payload += struct.pack("<" + "I" * arr.ndim, *arr.shape) + arr.tobytes()
        offsets.append(16 + len(body))
        body += struct.pack("<QI", len(payload), google_crc32c.value(payload)) + payload
    index = struct.pack("<I", len(recs))
    for (key, _), off in zip(recs, offsets):
        index += struct.pack("<H", len(key)) + key.encode() + struct.pack("<Q", off)
    index_offset = 16 + len(body)
    head = b"CIRC" + struct.pack("<HHQ", 1, 0, len(recs))
    tail = struct.pack("<Q", index_offset) + b"CIDX" + struct.pack("<I", google_crc32c.value(index))
    return recs, head + body + index + tail


def test_crc32c_check_value():
    assert crc32c(b"123456789") == 0xE3069283


def test_golden_two_record_layout(tmp_path):
    recs, expect = golden_bytes()
    path = tmp_path / "g.circ"
    handle = write_records(recs, path)
    got = path.read_bytes()
    assert got == expect
    # offsets spelled out: header 16, record a = 12 + 17, record bc = 12 + 26
    assert handle.index == {"a": 16, "bc": 45}
    assert handle.index_offset == 83
    assert len(got) == 126 == expected_file_size([(k, a.shape) for k, a in recs])


def test_three_small_tensors(tmp_path):
    path = tmp_path / "t.circ"
    h = write_records([(str(i), np.full((2, 2, 1), i)) for i in range(3)], path)
    assert h.count == 3
    assert validate(path).ok


def test_duplicate_key_rejected(tmp_path):
    path = tmp_path / "d.circ"
    with pytest.raises(DuplicateKey):
        write_records([("a", np.zeros(2)), ("a", np.ones(2))], path)
    assert not path.exists()


def test_empty_stream(tmp_path):
    with pytest.raises(EmptyInput):
        write_records([], tmp_path / "e.circ")


def test_writer_aborts_on_error(tmp_path):
    path = tmp_path / "w.circ"
    with pytest.raises(RuntimeError):
        with RecordWriter(path) as w:
            w.write("a", np.zeros(3))
            raise RuntimeError("boom")
    assert not path.exists()


def test_bad_tensor_dims(tmp_path):
    with pytest.raises(ValueError):
        write_records([("a", np.zeros((1,) * 6))], tmp_path / "x.circ")


tensors = hnp.arrays(
    dtype=np.float32,
    shape=hnp.array_shapes(min_dims=1, max_dims=5, min_side=1, max_side=16).filter(lambda s: np.prod(s) <= 4096),
    elements=st.floats(width=32, allow_nan=True, allow_infinity=True),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(tensors, min_size=1, max_size=6), st.data())
def test_round_trip_bit_exact(tmp_path_factory, arrays, data):
    keys = data.draw(st.lists(st.text(min_size=1, max_size=12), min_size=len(arrays), max_size=len(arrays),
                              unique=True))
    path = tmp_path_factory.mktemp("rt") / "r.circ"
    write_records(zip(keys, arrays), path)
    out = list(read_sequential(path))
    assert [k for k, _ in out] == keys
    for (_, got), want in zip(out, arrays):
        assert got.shape == want.shape and got.dtype == np.float32
        assert got.tobytes() == want.tobytes()
    with RecordReader(path) as r:
        for k, want in zip(keys, arrays):
            assert r.get(k).tobytes() == want.tobytes()
    assert os.path.getsize(path) == expected_file_size([(k, a.shape) for k, a in zip(keys, arrays)])


def test_read_by_keys_order_and_repeats(tmp_path):
    path = tmp_path / "k.circ"
    write_records([("k1", np.ones(3)), ("k2", np.arange(3.0))], path)
    out = read_by_keys(path, ["k2", "k1", "k2"])
    np.testing.assert_array_equal(out[0], np.arange(3.0))
    np.testing.assert_array_equal(out[1], np.ones(3))
    assert out[0] is out[2]
    seq = [a for _, a in read_sequential(path)]
    for a, b in zip(read_by_keys(path, ["k1", "k2"]), seq):
        assert a.tobytes() == b.tobytes()


def test_missing_key_named(tmp_path):
    path = tmp_path / "k.circ"
    write_records([("k1", np.ones(3))], path)
    with pytest.raises(KeyNotFound) as info:
        read_by_keys(path, ["k1", "nope"])
    assert "nope" in str(info.value)
    assert isinstance(info.value, KeyError)


def test_reader_protocol(tmp_path):
    path = tmp_path / "p.circ"
    write_records([("a", np.zeros((2, 2, 1))), ("b", np.ones((2, 2, 1)))], path)
    r = RecordReader(path)
    assert "a" in r and "z" not in r and len(r) == 2 and r.keys == ["a", "b"]
    batch = r(["b", "a"])
    assert batch[0][0, 0, 0] == 1 and batch[1][0, 0, 0] == 0
    r.close()


def _sample_file(tmp_path, n=5):
    path = tmp_path / "s.circ"
    rng = np.random.default_rng(1)
    write_records([(f"r{i}", rng.normal(size=(3, 4, 2))) for i in range(n)], path)
    return path


def test_every_payload_byte_flip_detected(tmp_path):
    path = _sample_file(tmp_path, n=3)
    raw = bytearray(path.read_bytes())
    handle = open_records(path)
    offsets = sorted(handle.index.values())
    for ordinal, off in enumerate(offsets):
        (length,) = struct.unpack_from("<Q", raw, off)
        for pos in range(off + 12, off + 12 + length):
            bad = bytearray(raw)
            bad[pos] ^= 0xFF
            path.write_bytes(bytes(bad))
            rep = validate(path)
            crc = rep.of_kind("CrcMismatch")
            assert len(crc) == 1 and crc[0].ordinal == ordinal, (pos, rep.findings)
            assert len(rep.findings) == 1


def test_flipped_byte_raises_on_read(tmp_path):
    path = _sample_file(tmp_path)
    raw = bytearray(path.read_bytes())
    off = open_records(path).index["r2"]
    raw[off + 20] ^= 1
    path.write_bytes(bytes(raw))
    with pytest.raises(CrcMismatch) as info:
        list(read_sequential(path))
    assert info.value.ordinal == 2
    with pytest.raises(CrcMismatch):
        RecordReader(path).get("r2")
    np.testing.assert_array_equal(RecordReader(path).get("r1").shape, (3, 4, 2))


def test_truncated_footer(tmp_path):
    path = _sample_file(tmp_path)
    full = list(read_sequential(path))
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    rep = validate(path)
    assert [f.kind for f in rep.findings] == ["IndexMissing"]
    again = list(read_sequential(path))
    assert [k for k, _ in again] == [k for k, _ in full]
    for (_, a), (_, b) in zip(again, full):
        assert a.tobytes() == b.tobytes()


def test_truncated_payload(tmp_path):
    path = _sample_file(tmp_path)
    off = open_records(path).index["r3"]
    path.write_bytes(path.read_bytes()[:off + 30])
    rep = validate(path)
    assert rep.of_kind("IndexMissing") and rep.of_kind("TruncatedFile")
    with pytest.raises(TruncatedFile):
        list(read_sequential(path))


def test_index_corruption_detected(tmp_path):
    path = _sample_file(tmp_path)
    h = open_records(path)
    raw = bytearray(path.read_bytes())
    raw[h.index_offset + 6] ^= 0x10
    path.write_bytes(bytes(raw))
    rep = validate(path)
    assert rep.of_kind("IndexCrcMismatch")
    assert rep.records_scanned == 5


def test_bad_header(tmp_path):
    path = tmp_path / "h.circ"
    path.write_bytes(b"NOPE" + bytes(20))
    rep = validate(path)
    assert [f.kind for f in rep.findings] == ["BadHeader"]
    assert rep.to_dict()["ok"] is False
