"""Georeferenced rasters and fixed-width pixel windows ("chips").

Coordinates are taken in the raster's own CRS; there is no reprojection.
Band indices are 1-based everywhere they face the user (file names, CLI).
"""

import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ._tiff import TiffLayout
from .errors import (
    CorruptFile,
    DuplicateKey,
    EmptyInput,
    PointOutsideRaster,
    UnsupportedFormat,
    WindowClipped,
)

log = logging.getLogger(__name__)

FLAT_MAGIC = "FLATRASTER"


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine map between world coordinates and pixel indices.

    ``origin_x``/``origin_y`` locate the outer corner of pixel (0, 0).
    Latitude decreases as the row index grows.
    """

    origin_x: float
    origin_y: float
    pixel_size_x: float
    pixel_size_y: float

    def __post_init__(self):
        if not (self.pixel_size_x > 0 and self.pixel_size_y > 0):
            raise ValueError("pixel sizes must be positive")

    def world_to_pixel(self, lon, lat):
        return world_to_pixel(self, lon, lat)

    def pixel_to_world(self, row, col):
        """World coordinates of the centre of pixel (row, col)."""
        lon = self.origin_x + (col + 0.5) * self.pixel_size_x
        lat = self.origin_y - (row + 0.5) * self.pixel_size_y
        return lon, lat


def world_to_pixel(geo: GeoTransform, lon: float, lat: float):
    """Return ``(row, col)``; may fall outside the raster."""
    col = math.floor((lon - geo.origin_x) / geo.pixel_size_x)
    row = math.floor((geo.origin_y - lat) / geo.pixel_size_y)
    return row, col


class _FlatReader:
    def __init__(self, path, width, height, bands, data_offset):
        self.path = path
        self.width, self.height, self.bands = width, height, bands
        self._data_offset = data_offset
        self._data = None
        self._lock = threading.Lock()

    def _load(self):
        with self._lock:
            return self._load_locked()

    def _load_locked(self):
        if self._data is None:
            with open(self.path, "r") as fh:
                fh.seek(self._data_offset)
                lines = [ln for ln in fh.read().splitlines() if ln.strip()]
            if len(lines) != self.bands * self.height:
                raise CorruptFile(
                    f"{self.path}: expected {self.bands * self.height} data lines, got {len(lines)}"
                )
            try:
                flat = np.array([[float(v) for v in ln.split(",")] for ln in lines], dtype=np.float32)
            except ValueError as exc:
                raise CorruptFile(f"{self.path}: {exc}") from exc
            if flat.shape[1] != self.width:
                raise CorruptFile(f"{self.path}: rows must have {self.width} values")
            self._data = flat.reshape(self.bands, self.height, self.width).transpose(1, 2, 0)
        return self._data

    def read_window(self, row0, col0, nrows, ncols, bands):
        data = self._load()
        return np.ascontiguousarray(data[row0:row0 + nrows, col0:col0 + ncols][:, :, list(bands)])


@dataclass
class RasterHandle:
    path: str
    width: int
    height: int
    band_count: int
    sample_type: str
    geo: GeoTransform
    _reader: object = field(repr=False, compare=False, default=None)

    def contains(self, row, col):
        return 0 <= row < self.height and 0 <= col < self.width

    def read_window(self, row0, col0, nrows, ncols, bands=None):
        """Read ``nrows x ncols`` starting at (row0, col0); 0-based band list.

        The window must lie inside the raster.
        """
        if bands is None:
            bands = range(self.band_count)
        if row0 < 0 or col0 < 0 or row0 + nrows > self.height or col0 + ncols > self.width:
            raise WindowClipped("window extends past raster edge")
        return self._reader.read_window(row0, col0, nrows, ncols, list(bands))


def _parse_flat(path):
    with open(path, "r") as fh:
        header = fh.readline()
        offset = fh.tell()
    parts = header.split()
    if len(parts) != 9 or parts[0] != FLAT_MAGIC or parts[1] != "v1":
        raise CorruptFile(f"{path}: bad FLATRASTER header")
    try:
        width, height, bands = (int(p) for p in parts[2:5])
        ox, oy, px, py = (float(p) for p in parts[5:9])
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if min(width, height, bands) < 1:
        raise CorruptFile(f"{path}: non-positive raster dimensions")
    try:
        geo = GeoTransform(ox, oy, px, py)
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    reader = _FlatReader(path, width, height, bands, offset)
    return RasterHandle(path, width, height, bands, "float32", geo, reader)


def _parse_tiff(path):
    layout = TiffLayout(path)
    sx, sy = layout.pixel_scale[0], layout.pixel_scale[1]
    i, j, _, x, y, _ = layout.tiepoint[:6]
    try:
        geo = GeoTransform(x - i * sx, y + j * sy, sx, sy)
    except ValueError as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    return RasterHandle(path, layout.width, layout.height, layout.bands, layout.sample_type, geo, layout)


def parse_raster(path) -> RasterHandle:
    """Open a GeoTIFF (supported subset) or FlatRaster file.

    Only metadata is parsed here; pixels are decoded per window.
    """
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(len(FLAT_MAGIC))
    if head[:4] in (b"II*\0", b"II+\0", b"MM\0*", b"MM\0+"):
        return _parse_tiff(path)
    if head == FLAT_MAGIC.encode():
        return _parse_flat(path)
    raise UnsupportedFormat(f"{path}: neither TIFF nor FLATRASTER")


def write_flat_raster(path, data, geo: GeoTransform):
    """Write an (H, W, C) array as a FlatRaster text file."""
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w, c = data.shape
    with open(path, "w") as fh:
        fh.write(
            f"{FLAT_MAGIC} v1 {w} {h} {c} {geo.origin_x!r} {geo.origin_y!r} "
            f"{geo.pixel_size_x!r} {geo.pixel_size_y!r}\n"
        )
        for band in range(c):
            for row in range(h):
                fh.write(",".join(repr(float(v)) for v in data[row, :, band]) + "\n")


@dataclass
class ChipRequest:
    key: str
    lon: float
    lat: float
    width_px: int = 500
    bands: Union[str, Sequence[int]] = "all"

    def __post_init__(self):
        if not self.key:
            raise ValueError("chip key must be non-empty")
        if self.width_px < 1:
            raise ValueError("width_px must be >= 1")

    def band_indices(self, band_count):
        """1-based band numbers this request selects."""
        if isinstance(self.bands, str):
            if self.bands != "all":
                raise ValueError(f"bands must be 'all' or a list, got {self.bands!r}")
            return list(range(1, band_count + 1))
        bands = [int(b) for b in self.bands]
        for b in bands:
            if not 1 <= b <= band_count:
                raise ValueError(f"band {b} outside 1..{band_count}")
        return bands


def chip_window(raster: RasterHandle, req: ChipRequest):
    """Top-left pixel of the chip window and its centre pixel."""
    row, col = world_to_pixel(raster.geo, req.lon, req.lat)
    half = req.width_px // 2
    return (row - half, col - half), (row, col)


def extract_chip(raster: RasterHandle, req: ChipRequest, pad: Optional[float] = None) -> np.ndarray:
    """Cut a ``width_px x width_px x n_bands`` float32 chip around a point.

    Raises PointOutsideRaster when the centre pixel misses the raster and
    WindowClipped when the window crosses an edge, unless ``pad`` is given,
    in which case the missing cells are filled with that constant.
    """
    (top, left), (row, col) = chip_window(raster, req)
    if not raster.contains(row, col):
        raise PointOutsideRaster(f"{req.key}: pixel ({row}, {col}) outside {raster.path}")
    bands = [b - 1 for b in req.band_indices(raster.band_count)]
    n = req.width_px
    r0, c0 = max(top, 0), max(left, 0)
    r1, c1 = min(top + n, raster.height), min(left + n, raster.width)
    if (r0, c0, r1, c1) == (top, left, top + n, left + n):
        return raster.read_window(top, left, n, n, bands)
    if pad is None:
        raise WindowClipped(f"{req.key}: {n}px window crosses the edge of {raster.path}")
    chip = np.full((n, n, len(bands)), pad, dtype=np.float32)
    chip[r0 - top:r1 - top, c0 - left:c1 - left] = raster.read_window(r0, c0, r1 - r0, c1 - c0, bands)
    return chip


# -- chip CSV files ----------------------------------------------------------

def chip_csv_name(key, band):
    return f"Key{key}_BAND{band}.csv"


def write_chip_csv(path, band_array):
    band_array = np.asarray(band_array, dtype=np.float32)
    ncol = band_array.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(f"c{i}" for i in range(1, ncol + 1)) + "\n")
        for row in band_array:
            # 9 significant digits round-trip any float32
            fh.write(",".join(f"{v:.9g}" for v in row) + "\n")


def read_chip_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    return data.astype(np.float32)


def write_chip_csvs(out_dir, key, chip, band_numbers):
    paths = []
    for slot, band in enumerate(band_numbers):
        path = os.path.join(out_dir, chip_csv_name(key, band))
        write_chip_csv(path, chip[:, :, slot])
        paths.append(path)
    return paths


def read_chip_csvs(chip_dir, key, band_numbers):
    layers = [read_chip_csv(os.path.join(chip_dir, chip_csv_name(key, b))) for b in band_numbers]
    return np.stack(layers, axis=-1)


def scan_chip_dir(chip_dir):
    """Map key -> sorted band numbers for every ``Key*_BAND*.csv`` in a folder."""
    found = {}
    for name in os.listdir(chip_dir):
        if not (name.startswith("Key") and name.endswith(".csv")) or "_BAND" not in name:
            continue
        stem = name[3:-4]
        key, _, band = stem.rpartition("_BAND")
        if not key or not band.isdigit():
            continue
        found.setdefault(key, []).append(int(band))
    return {k: sorted(v) for k, v in sorted(found.items())}


# -- pool search -------------------------------------------------------------

@dataclass
class ExtractReport:
    """Per-key outcome: matched pool index, or None when unmatched."""

    matched: dict
    files: dict = field(default_factory=dict)

    @property
    def unmatched(self):
        return [k for k, v in self.matched.items() if v is None]

    def to_dict(self):
        return {
            "matched": {k: v for k, v in self.matched.items()},
            "unmatched": self.unmatched,
        }


def find_in_pool(rasters, req, pad=None):
    """First raster (pool order) yielding a chip; returns (index, chip) or (None, None)."""
    for idx, raster in enumerate(rasters):
        try:
            return idx, extract_chip(raster, req, pad=pad)
        except (PointOutsideRaster, WindowClipped):
            continue
    return None, None


def extract_from_pool(requests, pool, out_dir, format="csv", pad=None, threads=None, record_path=None):
    """Extract every request from the first matching raster in ``pool``.

    ``format="csv"`` writes ``Key{key}_BAND{band}.csv`` files into
    ``out_dir``; ``format="record"`` appends chips (in request order) to a
    record file, ``record_path`` or ``out_dir/chips.circ`` by default.
    """
    from .recordstore import RecordWriter

    if not pool:
        raise EmptyInput("raster pool is empty")
    if format not in ("csv", "record"):
        raise ValueError(f"unknown chip format {format!r}")
    seen = set()
    for req in requests:
        if req.key in seen:
            raise DuplicateKey(req.key)
        seen.add(req.key)
    os.makedirs(out_dir, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory not writable: {out_dir}")

    rasters = [parse_raster(p) for p in pool]

    def work(req):
        idx, chip = find_in_pool(rasters, req, pad=pad)
        files = []
        if idx is not None and format == "csv":
            bands = req.band_indices(rasters[idx].band_count)
            files = write_chip_csvs(out_dir, req.key, chip, bands)
            chip = None
        return idx, chip, files

    with ThreadPoolExecutor(max_workers=threads or os.cpu_count() or 1) as ex:
        results = list(ex.map(work, requests))

    report = ExtractReport(matched={})
    if format == "record":
        record_path = record_path or os.path.join(out_dir, "chips.circ")
        entries = [(req.key, chip) for req, (idx, chip, _) in zip(requests, results) if idx is not None]
        if entries:
            with RecordWriter(record_path) as writer:
                for key, chip in entries:
                    writer.write(key, chip)
    for req, (idx, _, files) in zip(requests, results):
        report.matched[req.key] = idx
        if files:
            report.files[req.key] = files
        if idx is None:
            log.info("no raster in pool covers %s", req.key)
    return report
