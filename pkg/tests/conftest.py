import struct

import numpy as np
import pytest

from causalchips.geochip import GeoTransform, write_flat_raster

# TIFF field types
SHORT, LONG, DOUBLE = 3, 4, 12
_TYPE_FMT = {SHORT: "H", LONG: "I", DOUBLE: "d"}


def build_tiff(path, data, compression=1, pixel_scale=(1.0, 1.0), tiepoint=(0.0, 0.0), geo=True,
               bits=8, sample_format=1, byteorder="II", payload=None):
    """Single-strip, single-band classic TIFF written byte by byte.

    Used for files tifffile will not produce (foreign compression codes,
    missing geo tags, big-endian).
    """
    data = np.asarray(data)
    height, width = data.shape
    e = "<" if byteorder == "II" else ">"
    strip = payload if payload is not None else data.astype(data.dtype.newbyteorder(e)).tobytes()
    tags = [
        (256, LONG, [width]),
        (257, LONG, [height]),
        (258, SHORT, [bits]),
        (259, SHORT, [compression]),
        (262, SHORT, [1]),
        (273, LONG, [0]),  # patched below
        (277, SHORT, [1]),
        (278, LONG, [height]),
        (279, LONG, [len(strip)]),
        (339, SHORT, [sample_format]),
    ]
    if geo:
        tags.append((33550, DOUBLE, [pixel_scale[0], pixel_scale[1], 0.0]))
        tags.append((33922, DOUBLE, [0.0, 0.0, 0.0, tiepoint[0], tiepoint[1], 0.0]))
    ifd_size = 2 + 12 * len(tags) + 4
    extra_at = 8 + ifd_size
    extra = b""
    entries = []
    for tag, typ, values in tags:
        raw = struct.pack(e + _TYPE_FMT[typ] * len(values), *values)
        if len(raw) <= 4:
            entries.append((tag, typ, len(values), raw.ljust(4, b"\0")))
        else:
            entries.append((tag, typ, len(values), struct.pack(e + "I", extra_at + len(extra))))
            extra += raw
    strip_at = extra_at + len(extra)
    out = byteorder.encode() + struct.pack(e + "HI", 42, 8) + struct.pack(e + "H", len(tags))
    for tag, typ, count, value in entries:
        if tag == 273:
            value = struct.pack(e + "I", strip_at)
        out += struct.pack(e + "HHI", tag, typ, count) + value
    out += struct.pack(e + "I", 0) + extra + strip
    with open(path, "wb") as fh:
        fh.write(out)
    return path


def geo_extratags(origin, pixel):
    return [
        (33550, "d", 3, (pixel[0], pixel[1], 0.0), False),
        (33922, "d", 6, (0.0, 0.0, 0.0, origin[0], origin[1], 0.0), False),
    ]


@pytest.fixture
def golden_flat(tmp_path):
    """4x4 single-band FlatRaster with v(r, c) = 10 r + c, origin (0, 4), 1x1 pixels."""
    data = np.add.outer(10 * np.arange(4), np.arange(4)).astype(np.float32)
    path = tmp_path / "golden.flat"
    write_flat_raster(path, data, GeoTransform(0.0, 4.0, 1.0, 1.0))
    return path


def random_chips(n, size=12, bands=1, seed=0):
    rng = np.random.default_rng(seed)
    return [f"k{i}" for i in range(n)], rng.normal(size=(n, size, size, bands)).astype(np.float32)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:>2}. {name}: {detail}")
