"""Sequential container of keyed float32 tensors with CRC framing.

Layout (little-endian)::

    header   16 B   b"CIRC" | u16 version=1 | u16 flags=0 | u64 record_count
    record*         u64 payload_len | u32 crc32c(payload) | payload
    payload         u16 key_len | key utf-8 | u8 dtype (0=float32) | u8 ndim
                    | ndim x u32 dims | float32 data, row-major
    index           u32 entry_count | (u16 key_len | key | u64 offset)*
    trailer  16 B   u64 index_offset | b"CIDX" | u32 crc32c(index)

Index offsets are absolute and point at a record's ``payload_len`` field.
"""

import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Tuple

import google_crc32c
import numpy as np

from .errors import (
    CorruptFile,
    CrcMismatch,
    DuplicateKey,
    EmptyInput,
    KeyNotFound,
    TruncatedFile,
)

MAGIC = b"CIRC"
INDEX_MAGIC = b"CIDX"
VERSION = 1
HEADER_SIZE = 16
TRAILER_SIZE = 16
FRAME_SIZE = 12  # payload_len + crc
DTYPE_FLOAT32 = 0
MAX_NDIM = 5

_HEADER = struct.Struct("<4sHHQ")
_FRAME = struct.Struct("<QI")
_TRAILER = struct.Struct("<Q4sI")


def crc32c(data) -> int:
    return google_crc32c.value(bytes(data))


def as_tensor(array) -> np.ndarray:
    """Coerce to a C-contiguous float32 array with 1-5 positive dims."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not 1 <= arr.ndim <= MAX_NDIM:
        raise ValueError(f"tensor must have 1..{MAX_NDIM} dims, got {arr.ndim}")
    if 0 in arr.shape:
        raise ValueError("tensor dims must be positive")
    return arr


def encode_payload(key: str, tensor) -> bytes:
    arr = as_tensor(tensor)
    kb = key.encode("utf-8")
    if not kb:
        raise ValueError("record key must be non-empty")
    if len(kb) > 0xFFFF:
        raise ValueError("record key longer than 65535 bytes")
    head = struct.pack(f"<H{len(kb)}sBB{arr.ndim}I", len(kb), kb, DTYPE_FLOAT32, arr.ndim, *arr.shape)
    return head + arr.tobytes()


def decode_payload(payload) -> Tuple[str, np.ndarray]:
    payload = memoryview(payload)
    try:
        (klen,) = struct.unpack_from("<H", payload, 0)
        key = bytes(payload[2:2 + klen]).decode("utf-8")
        pos = 2 + klen
        dtype, ndim = struct.unpack_from("<BB", payload, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", payload, pos)
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed record payload: {exc}") from exc
    pos += 4 * ndim
    if dtype != DTYPE_FLOAT32:
        raise CorruptFile(f"unknown payload dtype {dtype}")
    count = int(np.prod(dims)) if dims else 0
    if len(payload) - pos != 4 * count:
        raise CorruptFile(f"record {key!r}: data length does not match dims {dims}")
    data = np.frombuffer(payload, dtype="<f4", count=count, offset=pos).reshape(dims)
    return key, data.copy()


def record_size(key: str, dims) -> int:
    """Bytes one record occupies on disk, framing included."""
    return FRAME_SIZE + 2 + len(key.encode("utf-8")) + 2 + 4 * len(dims) + 4 * int(np.prod(dims))


def expected_file_size(entries) -> int:
    """Exact size of the file that ``write_records(entries)`` produces."""
    total = HEADER_SIZE + 4 + TRAILER_SIZE
    for key, dims in entries:
        total += record_size(key, dims) + 2 + len(key.encode("utf-8")) + 8
    return total


class RecordWriter:
    """Single-writer sink; the index footer and count are written on close."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION, 0, 0))
        self._index: Dict[str, int] = {}
        self._order: List[str] = []
        self._closed = False

    def write(self, key: str, tensor):
        if key in self._index:
            raise DuplicateKey(key)
        payload = encode_payload(key, tensor)
        offset = self._fh.tell()
        self._fh.write(_FRAME.pack(len(payload), crc32c(payload)))
        self._fh.write(payload)
        self._index[key] = offset
        self._order.append(key)

    @property
    def count(self):
        return len(self._order)

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            if not self._order:
                raise EmptyInput("record stream is empty")
            index_offset = self._fh.tell()
            parts = [struct.pack("<I", len(self._order))]
            for key in self._order:
                kb = key.encode("utf-8")
                parts.append(struct.pack(f"<H{len(kb)}sQ", len(kb), kb, self._index[key]))
            index = b"".join(parts)
            self._fh.write(index)
            self._fh.write(_TRAILER.pack(index_offset, INDEX_MAGIC, crc32c(index)))
            self._fh.seek(0)
            self._fh.write(_HEADER.pack(MAGIC, VERSION, 0, len(self._order)))
        finally:
            self._fh.close()

    def abort(self):
        if not self._closed:
            self._closed = True
            self._fh.close()
        if os.path.exists(self.path):
            os.remove(self.path)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            try:
                self.close()
            except Exception:
                self.abort()
                raise
        else:
            self.abort()


@dataclass
class RecordFile:
    path: str
    version: int
    count: int
    index: Dict[str, int] = field(repr=False)
    index_offset: int = field(repr=False, default=0)


def write_records(entries: Iterable[Tuple[str, object]], path) -> RecordFile:
    """Write ``(key, tensor)`` pairs in order; return the opened handle."""
    with RecordWriter(path) as writer:
        for key, tensor in entries:
            writer.write(key, tensor)
    return open_records(path)


def _read_header(fh, path):
    raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"{path}: header truncated")
    magic, version, _flags, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise CorruptFile(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorruptFile(f"{path}: unsupported version {version}")
    return version, count


def _read_index(fh, size):
    """Parse trailer and index; returns (index_offset, ordered entries) or raises."""
    if size < HEADER_SIZE + TRAILER_SIZE + 4:
        raise TruncatedFile("file too short for an index trailer")
    fh.seek(size - TRAILER_SIZE)
    index_offset, magic, crc = _TRAILER.unpack(fh.read(TRAILER_SIZE))
    if magic != INDEX_MAGIC:
        raise TruncatedFile("index trailer missing")
    if not HEADER_SIZE <= index_offset <= size - TRAILER_SIZE - 4:
        raise CorruptFile("index offset out of range")
    fh.seek(index_offset)
    raw = fh.read(size - TRAILER_SIZE - index_offset)
    if crc32c(raw) != crc:
        raise CrcMismatch("index section CRC mismatch")
    (n,) = struct.unpack_from("<I", raw, 0)
    pos = 4
    entries = []
    try:
        for _ in range(n):
            (klen,) = struct.unpack_from("<H", raw, pos)
            key = raw[pos + 2:pos + 2 + klen].decode("utf-8")
            (off,) = struct.unpack_from("<Q", raw, pos + 2 + klen)
            pos += 2 + klen + 8
            entries.append((key, off))
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFile(f"malformed index: {exc}") from exc
    if pos != len(raw):
        raise CorruptFile("trailing bytes in index section")
    return index_offset, entries


def open_records(path) -> RecordFile:
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        version, count = _read_header(fh, path)
        index_offset, entries = _read_index(fh, size)
    index = dict(entries)
    if len(index) != len(entries):
        raise CorruptFile(f"{path}: duplicate keys in index")
    return RecordFile(path, version, count, index, index_offset)


def _read_record_at(fh, offset, limit, ordinal=None):
    fh.seek(offset)
    frame = fh.read(FRAME_SIZE)
    if len(frame) < FRAME_SIZE:
        raise TruncatedFile(f"record {ordinal}: framing truncated at byte {offset}")
    length, crc = _FRAME.unpack(frame)
    if offset + FRAME_SIZE + length > limit:
        raise TruncatedFile(f"record {ordinal}: payload runs past byte {limit}")
    payload = fh.read(length)
    if crc32c(payload) != crc:
        raise CrcMismatch(f"record {ordinal}: CRC mismatch at byte {offset}", ordinal=ordinal)
    return payload, offset + FRAME_SIZE + length


def _scan_limit(fh, path, size):
    try:
        index_offset, _ = _read_index(fh, size)
        return index_offset
    except (TruncatedFile, CrcMismatch, CorruptFile):
        return size


def read_sequential(path):
    """Yield ``(key, tensor)`` in write order, verifying every CRC.

    Works from the header count alone, so a file whose index footer is
    damaged can still be streamed.
    """
    path = os.fspath(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        _, count = _read_header(fh, path)
        limit = _scan_limit(fh, path, size)
        offset = HEADER_SIZE
        for ordinal in range(count):
            payload, offset = _read_record_at(fh, offset, limit, ordinal)
            yield decode_payload(payload)


class RecordReader:
    """Keyed random access; safe to share between threads (positional reads)."""

    def __init__(self, path):
        self.handle = open_records(path)
        self._fd = os.open(self.handle.path, os.O_RDONLY)
        self._size = os.path.getsize(self.handle.path)
        self._ordinal = {k: i for i, k in enumerate(self.handle.index)}

    @property
    def keys(self):
        return list(self.handle.index)

    def __contains__(self, key):
        return key in self.handle.index

    def __len__(self):
        return self.handle.count

    def get(self, key) -> np.ndarray:
        if key not in self.handle.index:
            raise KeyNotFound(key)
        offset = self.handle.index[key]
        frame = os.pread(self._fd, FRAME_SIZE, offset)
        if len(frame) < FRAME_SIZE:
            raise TruncatedFile(f"record {key!r}: framing truncated")
        length, crc = _FRAME.unpack(frame)
        if offset + FRAME_SIZE + length > self.handle.index_offset:
            raise TruncatedFile(f"record {key!r}: payload past index")
        payload = os.pread(self._fd, length, offset + FRAME_SIZE)
        if crc32c(payload) != crc:
            raise CrcMismatch(f"record {key!r}: CRC mismatch", ordinal=self._ordinal[key])
        stored_key, tensor = decode_payload(payload)
        if stored_key != key:
            raise CorruptFile(f"index points {key!r} at record {stored_key!r}")
        return tensor

    def read(self, keys) -> List[np.ndarray]:
        cache = {}
        out = []
        for key in keys:
            if key not in cache:
                cache[key] = self.get(key)
            out.append(cache[key])
        return out

    def __call__(self, keys):
        """ImageSource protocol: one tensor per requested key."""
        return self.read(keys)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def read_by_keys(path, keys) -> List[np.ndarray]:
    """Tensors in request order; a repeated key yields the same array object."""
    with RecordReader(path) as reader:
        return reader.read(keys)


@dataclass
class Finding:
    kind: str
    detail: str
    ordinal: int = None

    def to_dict(self):
        d = {"kind": self.kind, "detail": self.detail}
        if self.ordinal is not None:
            d["ordinal"] = self.ordinal
        return d


@dataclass
class ValidationReport:
    path: str
    total_bytes: int
    records_scanned: int = 0
    header_count: int = 0
    findings: List[Finding] = field(default_factory=list)

    @property
    def ok(self):
        return not self.findings

    def of_kind(self, kind):
        return [f for f in self.findings if f.kind == kind]

    def to_dict(self):
        return {
            "path": self.path,
            "ok": self.ok,
            "total_bytes": self.total_bytes,
            "records_scanned": self.records_scanned,
            "header_count": self.header_count,
            "findings": [f.to_dict() for f in self.findings],
        }


def validate(path) -> ValidationReport:
    """Scan a record file and collect every problem instead of raising."""
    path = os.fspath(path)
    size = os.path.getsize(path)
    report = ValidationReport(path, size)
    with open(path, "rb") as fh:
        try:
            _, count = _read_header(fh, path)
        except (TruncatedFile, CorruptFile) as exc:
            report.findings.append(Finding("BadHeader", str(exc)))
            return report
        report.header_count = count

        index_entries = None
        limit = size
        try:
            limit, index_entries = _read_index(fh, size)
        except TruncatedFile as exc:
            report.findings.append(Finding("IndexMissing", str(exc)))
        except CrcMismatch as exc:
            report.findings.append(Finding("IndexCrcMismatch", str(exc)))
        except CorruptFile as exc:
            report.findings.append(Finding("IndexCorrupt", str(exc)))

        scanned = {}  # offset -> key, None for records failing their CRC
        offset = HEADER_SIZE
        for ordinal in range(count):
            fh.seek(offset)
            frame = fh.read(FRAME_SIZE)
            if len(frame) < FRAME_SIZE:
                report.findings.append(Finding("TruncatedFile", f"framing of record {ordinal}", ordinal))
                break
            length, crc = _FRAME.unpack(frame)
            if offset + FRAME_SIZE + length > limit:
                report.findings.append(Finding("TruncatedFile", f"payload of record {ordinal}", ordinal))
                break
            payload = fh.read(length)
            report.records_scanned += 1
            if crc32c(payload) != crc:
                report.findings.append(Finding("CrcMismatch", f"record {ordinal} at byte {offset}", ordinal))
                scanned[offset] = None
            else:
                try:
                    scanned[offset] = decode_payload(payload)[0]
                except CorruptFile as exc:
                    report.findings.append(Finding("PayloadCorrupt", str(exc), ordinal))
                    scanned[offset] = None
            offset += FRAME_SIZE + length

        if index_entries is not None:
            if offset != limit and report.records_scanned == count:
                report.findings.append(Finding("IndexMismatch", f"records end at {offset}, index at {limit}"))
            if len(index_entries) != count:
                report.findings.append(
                    Finding("IndexMismatch", f"index has {len(index_entries)} entries, header {count}")
                )
            seen = set()
            for key, off in index_entries:
                if key in seen:
                    report.findings.append(Finding("IndexMismatch", f"duplicate key {key!r}"))
                seen.add(key)
                if off not in scanned:
                    report.findings.append(Finding("IndexMismatch", f"{key!r} points at {off}, not a record"))
                elif scanned[off] is not None and scanned[off] != key:
                    report.findings.append(Finding("IndexMismatch", f"{key!r} points at record {scanned[off]!r}"))
    return report
