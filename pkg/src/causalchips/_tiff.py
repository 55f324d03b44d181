"""Minimal reader for the classic little-endian GeoTIFF subset we accept.

Supported: strip or tile organisation, chunky or planar samples, no
compression or DEFLATE, uint8/uint16/float32 samples. Anything else raises
UnsupportedFormat rather than guessing.
"""

import mmap
import struct
import zlib

import numpy as np

from .errors import CorruptFile, MissingGeoTags, UnsupportedFormat

# tag ids
IMAGE_WIDTH = 256
IMAGE_LENGTH = 257
BITS_PER_SAMPLE = 258
COMPRESSION = 259
STRIP_OFFSETS = 273
SAMPLES_PER_PIXEL = 277
ROWS_PER_STRIP = 278
STRIP_BYTE_COUNTS = 279
PLANAR_CONFIG = 284
PREDICTOR = 317
TILE_WIDTH = 322
TILE_LENGTH = 323
TILE_OFFSETS = 324
TILE_BYTE_COUNTS = 325
SAMPLE_FORMAT = 339
MODEL_PIXEL_SCALE = 33550
MODEL_TIEPOINT = 33922

# TIFF field type -> (struct code, byte size)
_FIELD_TYPES = {
    1: ("B", 1),
    2: ("c", 1),
    3: ("H", 2),
    4: ("I", 4),
    5: ("II", 8),
    6: ("b", 1),
    7: ("B", 1),
    8: ("h", 2),
    9: ("i", 4),
    10: ("ii", 8),
    11: ("f", 4),
    12: ("d", 8),
}

_COMPRESSION_NONE = 1
_COMPRESSION_DEFLATE = (8, 32946)

_DTYPES = {
    (1, 8): np.dtype("<u1"),
    (1, 16): np.dtype("<u2"),
    (3, 32): np.dtype("<f4"),
}


def _read_tags(buf):
    if len(buf) < 8:
        raise CorruptFile("file too short for a TIFF header")
    order = buf[:2]
    if order == b"MM":
        raise UnsupportedFormat("big-endian TIFF is not supported")
    if order != b"II":
        raise CorruptFile("bad TIFF byte-order mark")
    magic, ifd_offset = struct.unpack_from("<HI", buf, 2)
    if magic == 43:
        raise UnsupportedFormat("BigTIFF is not supported")
    if magic != 42:
        raise CorruptFile(f"bad TIFF magic {magic}")
    if ifd_offset + 2 > len(buf):
        raise CorruptFile("IFD offset past end of file")
    (n_entries,) = struct.unpack_from("<H", buf, ifd_offset)
    if ifd_offset + 2 + 12 * n_entries > len(buf):
        raise CorruptFile("IFD runs past end of file")

    tags = {}
    for i in range(n_entries):
        pos = ifd_offset + 2 + 12 * i
        tag, ftype, count = struct.unpack_from("<HHI", buf, pos)
        if ftype not in _FIELD_TYPES:
            continue
        code, size = _FIELD_TYPES[ftype]
        nbytes = size * count
        if nbytes <= 4:
            start = pos + 8
        else:
            (start,) = struct.unpack_from("<I", buf, pos + 8)
        if start + nbytes > len(buf):
            raise CorruptFile(f"tag {tag} data past end of file")
        if ftype == 2:
            tags[tag] = bytes(buf[start:start + nbytes]).rstrip(b"\0").decode("latin-1")
            continue
        values = struct.unpack_from("<" + code * count, buf, start)
        if ftype in (5, 10):
            values = tuple(values[j] / values[j + 1] for j in range(0, len(values), 2))
        tags[tag] = values
    return tags


def _one(tags, tag, default=None):
    if tag not in tags:
        if default is None:
            raise CorruptFile(f"required TIFF tag {tag} missing")
        return default
    return tags[tag][0]


class TiffLayout:
    """Parsed geometry of one TIFF image plus a window reader."""

    def __init__(self, path):
        self.path = path
        with open(path, "rb") as fh:
            try:
                self._map = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
            except ValueError as exc:  # zero-length file
                raise CorruptFile(f"{path}: empty file") from exc
        self._buf = memoryview(self._map)
        tags = _read_tags(self._buf)

        self.width = _one(tags, IMAGE_WIDTH)
        self.height = _one(tags, IMAGE_LENGTH)
        self.bands = _one(tags, SAMPLES_PER_PIXEL, 1)
        bits = set(tags.get(BITS_PER_SAMPLE, (1,)))
        fmt = set(tags.get(SAMPLE_FORMAT, (1,)))
        if len(bits) != 1 or len(fmt) != 1:
            raise UnsupportedFormat("bands with mixed sample types")
        key = (fmt.pop(), bits.pop())
        if key not in _DTYPES:
            raise UnsupportedFormat(f"sample format/bits {key} not supported")
        self.dtype = _DTYPES[key]
        self.sample_type = {"u1": "uint8", "u2": "uint16", "f4": "float32"}[self.dtype.str[1:]]

        compression = _one(tags, COMPRESSION, 1)
        if compression != _COMPRESSION_NONE and compression not in _COMPRESSION_DEFLATE:
            raise UnsupportedFormat(f"TIFF compression {compression} not supported")
        self.deflate = compression != _COMPRESSION_NONE
        if _one(tags, PREDICTOR, 1) != 1:
            raise UnsupportedFormat("TIFF predictors are not supported")
        self.planar = _one(tags, PLANAR_CONFIG, 1) == 2

        if MODEL_PIXEL_SCALE not in tags or MODEL_TIEPOINT not in tags:
            raise MissingGeoTags(f"{path}: ModelPixelScale/ModelTiepoint tags required")
        self.pixel_scale = tags[MODEL_PIXEL_SCALE]
        self.tiepoint = tags[MODEL_TIEPOINT]
        if len(self.pixel_scale) < 2 or len(self.tiepoint) < 6:
            raise CorruptFile("malformed geo tags")

        if TILE_WIDTH in tags:
            self.tiled = True
            self.block_w = _one(tags, TILE_WIDTH)
            self.block_h = _one(tags, TILE_LENGTH)
            self.offsets = tags.get(TILE_OFFSETS)
            self.counts = tags.get(TILE_BYTE_COUNTS)
        else:
            self.tiled = False
            self.block_w = self.width
            self.block_h = min(_one(tags, ROWS_PER_STRIP, self.height), self.height)
            self.offsets = tags.get(STRIP_OFFSETS)
            self.counts = tags.get(STRIP_BYTE_COUNTS)
        if self.offsets is None or self.counts is None:
            raise CorruptFile("missing strip/tile offsets")
        self.blocks_across = -(-self.width // self.block_w)
        self.blocks_down = -(-self.height // self.block_h)
        per_plane = self.blocks_across * self.blocks_down
        expected = per_plane * (self.bands if self.planar else 1)
        if len(self.offsets) != expected or len(self.counts) != expected:
            raise CorruptFile(f"expected {expected} strips/tiles, found {len(self.offsets)}")
        for off, n in zip(self.offsets, self.counts):
            if off + n > len(self._buf):
                raise CorruptFile("strip/tile data past end of file")

    def _block(self, index, rows_in_block):
        raw = bytes(self._buf[self.offsets[index]:self.offsets[index] + self.counts[index]])
        if self.deflate:
            try:
                raw = zlib.decompress(raw)
            except zlib.error as exc:
                raise CorruptFile(f"DEFLATE stream {index}: {exc}") from exc
        spp = 1 if self.planar else self.bands
        # strips at the bottom edge may be short; tiles are always full size
        rows = self.block_h if self.tiled else rows_in_block
        need = rows * self.block_w * spp * self.dtype.itemsize
        if len(raw) < need:
            raise CorruptFile(f"strip/tile {index} holds {len(raw)} bytes, need {need}")
        arr = np.frombuffer(raw[:need], dtype=self.dtype)
        return arr.reshape(rows, self.block_w, spp)

    def read_window(self, row0, col0, nrows, ncols, bands):
        """Read an in-bounds window; ``bands`` are 0-based band indices."""
        out = np.empty((nrows, ncols, len(bands)), dtype=np.float32)
        br0, br1 = row0 // self.block_h, (row0 + nrows - 1) // self.block_h
        bc0, bc1 = col0 // self.block_w, (col0 + ncols - 1) // self.block_w
        per_plane = self.blocks_across * self.blocks_down
        planes = [(b, i) for i, b in enumerate(bands)] if self.planar else [(None, None)]
        for br in range(br0, br1 + 1):
            block_top = br * self.block_h
            rows_in_block = min(self.block_h, self.height - block_top)
            r_lo = max(row0, block_top)
            r_hi = min(row0 + nrows, block_top + rows_in_block)
            for bc in range(bc0, bc1 + 1):
                block_left = bc * self.block_w
                c_lo = max(col0, block_left)
                c_hi = min(col0 + ncols, block_left + self.block_w, self.width)
                for band, slot in planes:
                    index = br * self.blocks_across + bc
                    if band is not None:
                        index += band * per_plane
                    block = self._block(index, rows_in_block)
                    piece = block[r_lo - block_top:r_hi - block_top, c_lo - block_left:c_hi - block_left]
                    dst = out[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0]
                    if band is None:
                        dst[...] = piece[:, :, list(bands)]
                    else:
                        dst[:, :, slot] = piece[:, :, 0]
        return out
