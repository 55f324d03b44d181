import os
import zlib

import numpy as np
import pytest
import tifffile
from hypothesis import given, settings
from hypothesis import strategies as st

from causalchips.errors import (
    CorruptFile,
    DuplicateKey,
    MissingGeoTags,
    PointOutsideRaster,
    UnsupportedFormat,
    WindowClipped,
)
from causalchips.geochip import (
    ChipRequest,
    GeoTransform,
    chip_csv_name,
    extract_chip,
    extract_from_pool,
    parse_raster,
    read_chip_csv,
    read_chip_csvs,
    scan_chip_dir,
    world_to_pixel,
    write_chip_csv,
    write_flat_raster,
)
from causalchips.recordstore import read_sequential

from conftest import build_tiff, geo_extratags


def center_of(geo, row, col):
    return geo.pixel_to_world(row, col)


# -- world_to_pixel ----------------------------------------------------------

def test_world_to_pixel_formula():
    geo = GeoTransform(0.0, 100.0, 1.0, 1.0)
    assert world_to_pixel(geo, 10.2, 97.5) == (2, 10)


def test_world_to_pixel_origin_is_zero():
    geo = GeoTransform(3.5, -2.0, 0.25, 0.5)
    assert world_to_pixel(geo, 3.5, -2.0) == (0, 0)


def test_world_to_pixel_floors_negative():
    geo = GeoTransform(0.0, 0.0, 0.5, 0.5)
    assert world_to_pixel(geo, -0.3, -0.1)[1] == -1


def test_geotransform_rejects_nonpositive_pixels():
    with pytest.raises(ValueError):
        GeoTransform(0, 0, 0.0, 1.0)


@settings(max_examples=300, deadline=None)
@given(
    ox=st.floats(-180, 180), oy=st.floats(-90, 90),
    px=st.floats(1e-4, 10), py=st.floats(1e-4, 10),
    row=st.integers(0, 5000), col=st.integers(0, 5000),
)
def test_pixel_center_round_trip(ox, oy, px, py, row, col):
    geo = GeoTransform(ox, oy, px, py)
    assert world_to_pixel(geo, *geo.pixel_to_world(row, col)) == (row, col)


# -- FlatRaster --------------------------------------------------------------

def test_flat_header_echo(tmp_path):
    path = tmp_path / "r.flat"
    write_flat_raster(path, np.zeros((100, 100), np.float32), GeoTransform(0.0, 100.0, 1.0, 1.0))
    r = parse_raster(path)
    assert (r.width, r.height, r.band_count) == (100, 100, 1)
    assert r.geo.origin_y == 100


def test_golden_chip_centering(golden_flat):
    r = parse_raster(golden_flat)
    lon, lat = center_of(r.geo, 1, 1)
    chip = extract_chip(r, ChipRequest("g", lon, lat, width_px=2))
    assert chip.shape == (2, 2, 1)
    assert chip.dtype == np.float32
    np.testing.assert_array_equal(chip[:, :, 0], [[0, 1], [10, 11]])


def test_single_pixel_chip(golden_flat):
    r = parse_raster(golden_flat)
    chip = extract_chip(r, ChipRequest("g", *center_of(r.geo, 2, 3), width_px=1))
    assert chip.shape == (1, 1, 1) and chip[0, 0, 0] == 23


def test_odd_width_centred(golden_flat):
    r = parse_raster(golden_flat)
    chip = extract_chip(r, ChipRequest("g", *center_of(r.geo, 2, 2), width_px=3))
    np.testing.assert_array_equal(chip[:, :, 0], [[11, 12, 13], [21, 22, 23], [31, 32, 33]])


def test_point_outside(golden_flat):
    r = parse_raster(golden_flat)
    with pytest.raises(PointOutsideRaster):
        extract_chip(r, ChipRequest("g", 10.0, 10.0, width_px=1))


def test_window_clipped_and_pad(golden_flat):
    r = parse_raster(golden_flat)
    req = ChipRequest("g", *center_of(r.geo, 0, 0), width_px=3)
    with pytest.raises(WindowClipped):
        extract_chip(r, req)
    chip = extract_chip(r, req, pad=-1.0)
    np.testing.assert_array_equal(chip[:, :, 0], [[-1, -1, -1], [-1, 0, 1], [-1, 10, 11]])


def test_flat_multiband_band_selection(tmp_path):
    data = np.stack([np.full((5, 5), b, np.float32) for b in (1, 2, 3)], axis=-1)
    path = tmp_path / "mb.flat"
    write_flat_raster(path, data, GeoTransform(0, 5, 1, 1))
    r = parse_raster(path)
    chip = extract_chip(r, ChipRequest("m", 2.5, 2.5, 3, bands=[3, 1]))
    assert chip.shape == (3, 3, 2)
    assert chip[0, 0, 0] == 3 and chip[0, 0, 1] == 1
    with pytest.raises(ValueError):
        extract_chip(r, ChipRequest("m", 2.5, 2.5, 3, bands=[4]))


def test_flat_corrupt_header(tmp_path):
    path = tmp_path / "bad.flat"
    path.write_text("FLATRASTER v1 4 4\n")
    with pytest.raises(CorruptFile):
        parse_raster(path)


def test_unknown_format(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello world")
    with pytest.raises(UnsupportedFormat):
        parse_raster(path)


# -- GeoTIFF -----------------------------------------------------------------

def _tiff_data(h=20, w=24, c=3, dtype=np.uint16):
    r, col, b = np.meshgrid(np.arange(h), np.arange(w), np.arange(c), indexing="ij")
    return (100 * b + 10 * r + col).astype(dtype)


@pytest.mark.parametrize(
    "kw",
    [
        dict(),
        dict(rowsperstrip=3),
        dict(compression="zlib", rowsperstrip=7),
        dict(tile=(16, 16)),
        dict(tile=(16, 16), compression="zlib"),
        dict(planarconfig="separate", rowsperstrip=5),
        dict(planarconfig="separate", tile=(16, 16), compression="zlib"),
    ],
    ids=["strip", "strips", "deflate", "tiled", "tiled-deflate", "planar", "planar-tiled"],
)
@pytest.mark.parametrize("dtype", [np.uint8, np.uint16, np.float32])
def test_tiff_layouts_match_source(tmp_path, kw, dtype):
    data = _tiff_data(dtype=dtype) if dtype != np.uint8 else (_tiff_data() % 256).astype(np.uint8)
    path = tmp_path / "t.tif"
    if kw.get("planarconfig") == "separate":
        tifffile.imwrite(path, np.moveaxis(data, -1, 0), photometric="minisblack",
                         extratags=geo_extratags((10.0, 50.0), (0.5, 0.5)), **kw)
    else:
        tifffile.imwrite(path, data, photometric="minisblack", planarconfig="contig",
                         extratags=geo_extratags((10.0, 50.0), (0.5, 0.5)), **kw)
    r = parse_raster(path)
    assert (r.height, r.width, r.band_count) == data.shape
    assert r.geo == GeoTransform(10.0, 50.0, 0.5, 0.5)
    assert r.sample_type == np.dtype(dtype).name
    full = r.read_window(0, 0, r.height, r.width)
    np.testing.assert_array_equal(full, data.astype(np.float32))
    win = r.read_window(3, 5, 14, 17, [2, 0])
    np.testing.assert_array_equal(win, data[3:17, 5:22][:, :, [2, 0]].astype(np.float32))


def test_tiff_chip_matches_flat(tmp_path):
    data = _tiff_data(c=1)
    tif = tmp_path / "a.tif"
    tifffile.imwrite(tif, data[:, :, 0], photometric="minisblack", tile=(16, 16),
                     extratags=geo_extratags((0.0, 20.0), (1.0, 1.0)))
    flat = tmp_path / "a.flat"
    write_flat_raster(flat, data.astype(np.float32), GeoTransform(0.0, 20.0, 1.0, 1.0))
    req = ChipRequest("k", 12.3, 9.8, width_px=6)
    np.testing.assert_array_equal(extract_chip(parse_raster(tif), req), extract_chip(parse_raster(flat), req))


def test_hand_built_tiff_reads(tmp_path):
    data = np.arange(12, dtype=np.uint8).reshape(3, 4)
    r = parse_raster(build_tiff(tmp_path / "h.tif", data, tiepoint=(5.0, 9.0), pixel_scale=(2.0, 3.0)))
    assert r.geo == GeoTransform(5.0, 9.0, 2.0, 3.0)
    np.testing.assert_array_equal(r.read_window(0, 0, 3, 4)[:, :, 0], data)


def test_hand_built_deflate_code_32946(tmp_path):
    data = np.arange(12, dtype=np.uint8).reshape(3, 4)
    path = build_tiff(tmp_path / "d.tif", data, compression=32946, payload=zlib.compress(data.tobytes()))
    np.testing.assert_array_equal(parse_raster(path).read_window(0, 0, 3, 4)[:, :, 0], data)


def test_tiff_jpeg_rejected(tmp_path):
    path = build_tiff(tmp_path / "j.tif", np.zeros((4, 4), np.uint8), compression=7)
    with pytest.raises(UnsupportedFormat):
        parse_raster(path)


def test_tiff_missing_geo_tags(tmp_path):
    path = build_tiff(tmp_path / "n.tif", np.zeros((4, 4), np.uint8), geo=False)
    with pytest.raises(MissingGeoTags):
        parse_raster(path)


def test_tiff_int16_rejected(tmp_path):
    path = build_tiff(tmp_path / "s.tif", np.zeros((4, 4), np.int16), bits=16, sample_format=2)
    with pytest.raises(UnsupportedFormat):
        parse_raster(path)


def test_tiff_big_endian_rejected(tmp_path):
    path = build_tiff(tmp_path / "mm.tif", np.zeros((4, 4), np.uint8), byteorder="MM")
    with pytest.raises(UnsupportedFormat):
        parse_raster(path)


def test_tiff_bigtiff_rejected(tmp_path):
    path = tmp_path / "big.tif"
    tifffile.imwrite(path, np.zeros((4, 4), np.uint8), bigtiff=True)
    with pytest.raises(UnsupportedFormat):
        parse_raster(path)


def test_tiff_truncated_is_corrupt(tmp_path):
    path = build_tiff(tmp_path / "t.tif", np.zeros((8, 8), np.uint8))
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-10])
    with pytest.raises(CorruptFile):
        parse_raster(path)


# -- chip CSV ----------------------------------------------------------------

def test_chip_csv_layout(tmp_path):
    path = tmp_path / chip_csv_name("a1", 2)
    assert path.name == "Keya1_BAND2.csv"
    write_chip_csv(path, np.array([[0.5, 1.0, 2.0], [3.0, 4.0, 5.0], [6, 7, 8]]))
    lines = path.read_text().splitlines()
    assert lines[0] == "c1,c2,c3"
    assert len(lines) == 4
    assert lines[1] == "0.5,1,2"


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_chip_csv_round_trip_float32(tmp_path_factory, n, seed):
    vals = np.random.default_rng(seed).normal(scale=1e3, size=(n, n)).astype(np.float32)
    path = tmp_path_factory.mktemp("csv") / "c.csv"
    write_chip_csv(path, vals)
    np.testing.assert_array_equal(read_chip_csv(path), vals)


# -- pool extraction ---------------------------------------------------------

def _pool(tmp_path):
    a = np.full((10, 10, 2), 1.0, np.float32)
    b = np.full((10, 10, 2), 2.0, np.float32)
    pa, pb, pc = tmp_path / "a.flat", tmp_path / "b.flat", tmp_path / "c.flat"
    write_flat_raster(pa, a, GeoTransform(0, 10, 1, 1))    # lon 0..10
    write_flat_raster(pb, b, GeoTransform(20, 10, 1, 1))   # lon 20..30
    write_flat_raster(pc, b + 1, GeoTransform(0, 10, 1, 1))  # overlaps a
    return [str(pa), str(pb), str(pc)]


def test_pool_disjoint_csv(tmp_path):
    pool = _pool(tmp_path)[:2]
    reqs = [ChipRequest("p1", 5, 5, 4), ChipRequest("p2", 25, 5, 4), ChipRequest("none", 15, 5, 4)]
    out = tmp_path / "out"
    rep = extract_from_pool(reqs, pool, out)
    assert rep.matched == {"p1": 0, "p2": 1, "none": None}
    assert rep.unmatched == ["none"]
    assert sorted(os.listdir(out)) == sorted(
        ["Keyp1_BAND1.csv", "Keyp1_BAND2.csv", "Keyp2_BAND1.csv", "Keyp2_BAND2.csv"]
    )
    assert read_chip_csv(out / "Keyp2_BAND1.csv")[0, 0] == 2.0
    assert scan_chip_dir(out) == {"p1": [1, 2], "p2": [1, 2]}
    assert read_chip_csvs(out, "p1", [1, 2]).shape == (4, 4, 2)


def test_pool_first_raster_wins(tmp_path):
    pool = _pool(tmp_path)
    rep = extract_from_pool([ChipRequest("x", 5, 5, 4)], [pool[2], pool[0]], tmp_path / "o1")
    assert rep.matched == {"x": 0}
    assert read_chip_csv(tmp_path / "o1" / "Keyx_BAND1.csv")[0, 0] == 3.0


def test_pool_skips_clipping_raster(tmp_path):
    # a point near a's edge clips there; without pad it falls through to nothing
    pool = _pool(tmp_path)
    rep = extract_from_pool([ChipRequest("e", 0.5, 5, 4)], pool[:1], tmp_path / "o")
    assert rep.unmatched == ["e"]
    rep = extract_from_pool([ChipRequest("e", 0.5, 5, 4)], pool[:1], tmp_path / "o", pad=0.0)
    assert rep.matched == {"e": 0}


def test_pool_order_deterministic_under_request_permutation(tmp_path):
    pool = _pool(tmp_path)
    reqs = [ChipRequest(f"k{i}", lon, 5, 3) for i, lon in enumerate([1.5, 5, 25, 15, 8.5, 22])]
    first = extract_from_pool(reqs, pool, tmp_path / "o1", threads=1).matched
    rng = np.random.default_rng(0)
    for t in range(3):
        perm = [reqs[i] for i in rng.permutation(len(reqs))]
        again = extract_from_pool(perm, pool, tmp_path / f"p{t}", threads=4).matched
        assert again == first


def test_pool_record_format(tmp_path):
    pool = _pool(tmp_path)
    reqs = [ChipRequest("r1", 25, 5, 4), ChipRequest("r0", 5, 5, 4, bands=[2])]
    extract_from_pool(reqs, pool, tmp_path / "rec", format="record")
    recs = list(read_sequential(tmp_path / "rec" / "chips.circ"))
    assert [k for k, _ in recs] == ["r1", "r0"]
    assert recs[0][1].shape == (4, 4, 2) and recs[1][1].shape == (4, 4, 1)


def test_pool_duplicate_key(tmp_path):
    pool = _pool(tmp_path)
    with pytest.raises(DuplicateKey):
        extract_from_pool([ChipRequest("d", 5, 5, 2), ChipRequest("d", 6, 5, 2)], pool, tmp_path / "o")


def test_chip_request_validation():
    with pytest.raises(ValueError):
        ChipRequest("", 0, 0)
    with pytest.raises(ValueError):
        ChipRequest("a", 0, 0, width_px=0)
