"""Array file format, fold loading, and artifact writer tests."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from hoverpost import (
    BadMagic,
    CorruptLabels,
    NucleusRecord,
    ShapeMismatch,
    TruncatedPayload,
    UnsupportedDtype,
    boundary_mask,
    load_pannuke_fold,
    read_npy,
    write_instances_json,
    write_npy,
    write_overlay_png,
)

SUPPORTED_DTYPES = ("<f4", "<f8", "|u1", "<u2", "<u4", "<i4")


def raw_npy(descr="<f4", shape=(2, 2), payload=None, fortran=False, version=(1, 0)):
    """Assemble file bytes by hand, independent of the writer under test."""
    header = "{'descr': '%s', 'fortran_order': %s, 'shape': %s, }" % (
        descr,
        fortran,
        shape,
    )
    prefix = 10 if version == (1, 0) else 12
    pad = (64 - (prefix + len(header) + 1) % 64) % 64
    header = header + " " * pad + "\n"
    length = struct.pack("<H" if version == (1, 0) else "<I", len(header))
    if payload is None:
        payload = np.arange(
            int(np.prod(shape)), dtype=np.dtype(descr)
        ).tobytes()
    return b"\x93NUMPY" + bytes(version) + length + header.encode("latin1") + payload


class TestReadNpy:
    def test_minimal_v1_file(self, tmp_path):
        blob = raw_npy()
        assert len(blob) - blob.index(b"\n") - 1 == 16  # 2x2 f32 payload
        path = tmp_path / "a.npy"
        path.write_bytes(blob)
        arr = read_npy(path)
        assert arr.shape == (2, 2)
        assert arr.dtype == np.float32
        np.testing.assert_array_equal(arr, [[0.0, 1.0], [2.0, 3.0]])

    def test_v2_header(self, tmp_path):
        path = tmp_path / "a.npy"
        path.write_bytes(raw_npy(version=(2, 0)))
        assert read_npy(path).shape == (2, 2)

    def test_truncated_payload(self, tmp_path):
        blob = raw_npy()
        path = tmp_path / "a.npy"
        path.write_bytes(blob[:-4])  # 12 of 16 payload bytes
        with pytest.raises(TruncatedPayload):
            read_npy(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "a.npy"
        path.write_bytes(raw_npy() + b"\x00" * 4)
        with pytest.raises(TruncatedPayload):
            read_npy(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "a.npy"
        path.write_bytes(b"\x93NUMPZ" + raw_npy()[6:])
        with pytest.raises(BadMagic):
            read_npy(path)

    def test_unsupported_dtype(self, tmp_path):
        path = tmp_path / "a.npy"
        path.write_bytes(raw_npy(descr=">f4"))
        with pytest.raises(UnsupportedDtype):
            read_npy(path)

    def test_unknown_version(self, tmp_path):
        path = tmp_path / "a.npy"
        path.write_bytes(raw_npy(version=(3, 0)))
        with pytest.raises(BadMagic):
            read_npy(path)

    def test_fortran_order_loads_as_c(self, tmp_path):
        a = np.asfortranarray(np.arange(12, dtype=np.float64).reshape(3, 4))
        path = tmp_path / "f.npy"
        np.save(path, a)
        b = read_npy(path)
        assert b.flags.c_contiguous
        np.testing.assert_array_equal(a, b)

    def test_reads_numpy_save_output(self, tmp_path):
        for descr in SUPPORTED_DTYPES:
            a = np.arange(10, dtype=np.dtype(descr)).reshape(2, 5)
            path = tmp_path / f"{descr.strip('<|')}.npy"
            np.save(path, a)
            np.testing.assert_array_equal(read_npy(path), a)


class TestWriteNpy:
    def test_numpy_load_reads_output(self, tmp_path):
        for descr in SUPPORTED_DTYPES:
            a = np.arange(6, dtype=np.dtype(descr)).reshape(3, 2)
            path = tmp_path / "w.npy"
            write_npy(a, path)
            np.testing.assert_array_equal(np.load(path), a)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "w.npy"
        write_npy(np.zeros((2, 2), dtype=np.float32), path)
        blob = path.read_bytes()
        assert blob[:6] == b"\x93NUMPY"
        assert blob[6:8] == b"\x01\x00"
        (hlen,) = struct.unpack_from("<H", blob, 8)
        assert (10 + hlen) % 64 == 0
        assert blob[10 + hlen - 1 : 10 + hlen] == b"\n"

    def test_repeated_writes_byte_identical(self, tmp_path):
        hv = np.random.default_rng(0).normal(size=(256, 256, 2)).astype(np.float32)
        p1, p2 = tmp_path / "a.npy", tmp_path / "b.npy"
        write_npy(hv, p1)
        write_npy(hv, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(UnsupportedDtype):
            write_npy(np.zeros(3, dtype=np.complex64), tmp_path / "c.npy")

    def test_trivial_round_trips(self, tmp_path):
        for arr in (
            np.array([[0.0]], dtype=np.float32),
            np.arange(1, 7, dtype=np.uint32).reshape(3, 2),
        ):
            path = tmp_path / "t.npy"
            write_npy(arr, path)
            back = read_npy(path)
            assert back.dtype == arr.dtype
            np.testing.assert_array_equal(back, arr)

    def test_degenerate_shapes(self, tmp_path):
        for shape in ((), (0,), (3, 0, 2)):
            a = np.zeros(shape, dtype=np.float64)
            path = tmp_path / "d.npy"
            write_npy(a, path)
            back = read_npy(path)
            assert back.shape == shape

    @settings(max_examples=60, deadline=None)
    @given(
        descr=st.sampled_from(SUPPORTED_DTYPES),
        shape=st.lists(st.integers(1, 16), min_size=1, max_size=3),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, descr, shape, seed):
        rng = np.random.default_rng(seed)
        dtype = np.dtype(descr)
        if dtype.kind == "f":
            arr = rng.normal(scale=1e6, size=shape).astype(dtype)
            flat = arr.reshape(-1)
            if flat.size >= 3:  # non-finite values must survive too
                flat[0], flat[1], flat[2] = np.nan, np.inf, -np.inf
        else:
            info = np.iinfo(dtype)
            arr = rng.integers(
                info.min, int(info.max) + 1, size=shape, dtype=dtype
            )
        path = tmp_path_factory.mktemp("rt") / "p.npy"
        write_npy(arr, path)
        back = read_npy(path)
        assert back.dtype == arr.dtype and back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


class TestLoadPannukeFold:
    @staticmethod
    def write_fold(tmp_path, masks, images=None, types=None):
        n = masks.shape[0]
        if images is None:
            images = np.zeros((n, masks.shape[1], masks.shape[2], 3))
        if types is None:
            types = np.array(["Breast"] * n)
        ip, mp, tp = (tmp_path / s for s in ("images.npy", "masks.npy", "types.npy"))
        np.save(ip, images)
        np.save(mp, masks)
        np.save(tp, types)
        return ip, mp, tp

    def test_single_instance_renumbered(self, tmp_path):
        masks = np.zeros((1, 8, 8, 6))
        masks[0, 1:4, 1:4, 0] = 7.0  # arbitrary source label
        tiles = load_pannuke_fold(*self.write_fold(tmp_path, masks))
        assert np.array_equal(np.unique(tiles[0].instances), [0, 1])
        assert tiles[0].classes == {1: 1}  # channel 0 -> class 1
        assert tiles[0].tissue == "Breast"

    def test_empty_tile(self, tmp_path):
        masks = np.zeros((1, 8, 8, 6))
        masks[..., 5] = 1.0  # background channel is ignored
        tiles = load_pannuke_fold(*self.write_fold(tmp_path, masks))
        assert tiles[0].instances.max() == 0
        assert tiles[0].classes == {}

    def test_two_channels_pixel_counts(self, tmp_path):
        masks = np.zeros((1, 8, 8, 6))
        masks[0, 1:4, 1:4, 0] = 7.0  # 9 px, class 1
        masks[0, 5:7, 5:8, 2] = 3.0  # 6 px, class 3
        tiles = load_pannuke_fold(*self.write_fold(tmp_path, masks))
        inst, classes = tiles[0].instances, tiles[0].classes
        sizes = {classes[k]: int((inst == k).sum()) for k in classes}
        assert sizes == {1: 9, 3: 6}

    def test_collision_lower_channel_wins(self, tmp_path, caplog):
        masks = np.zeros((1, 8, 8, 6))
        masks[0, 2:5, 2:5, 0] = 1.0
        masks[0, 4, 4, 2] = 9.0  # claims a channel-0 pixel
        with caplog.at_level("WARNING", logger="hoverpost.maps_io"):
            tiles = load_pannuke_fold(*self.write_fold(tmp_path, masks))
        inst, classes = tiles[0].instances, tiles[0].classes
        assert classes[int(inst[4, 4])] == 1
        assert "1 pixels were claimed" in caplog.text

    def test_foreground_count_preserved(self, tmp_path):
        rng = np.random.default_rng(7)
        masks = np.zeros((3, 16, 16, 6))
        for i in range(3):  # disjoint rectangles across channels
            for ch in range(5):
                r, c = rng.integers(0, 12, size=2)
                masks[i, r : r + 3, c : c + 3, ch][
                    masks[i, r : r + 3, c : c + 3, :5].sum(axis=-1) == 0
                ] = ch + 1.0
        tiles = load_pannuke_fold(*self.write_fold(tmp_path, masks))
        for i, tile in enumerate(tiles):
            channel_fg = int((masks[i, :, :, :5] > 0).any(axis=-1).sum())
            assert int((tile.instances > 0).sum()) == channel_fg

    def test_fractional_labels_rejected(self, tmp_path):
        masks = np.zeros((1, 8, 8, 6))
        masks[0, 1, 1, 0] = 0.5
        with pytest.raises(CorruptLabels):
            load_pannuke_fold(*self.write_fold(tmp_path, masks))

    def test_tile_count_mismatch(self, tmp_path):
        masks = np.zeros((2, 8, 8, 6))
        images = np.zeros((3, 8, 8, 3))
        with pytest.raises(ShapeMismatch):
            load_pannuke_fold(*self.write_fold(tmp_path, masks, images=images))


class TestWriteInstancesJson:
    def test_empty_list(self, tmp_path):
        path = tmp_path / "n.json"
        write_instances_json([], path)
        assert json.loads(path.read_text()) == {"version": 1, "nuclei": []}

    def test_single_record(self, tmp_path):
        rec = NucleusRecord(
            id=1,
            class_id=3,
            class_prob=0.75,
            centroid=(2.0, 4.5),
            bbox=(1, 4, 3, 5),
            contour=[(1, 4), (1, 5), (3, 5), (3, 4)],
        )
        path = tmp_path / "one.json"
        write_instances_json([rec], path)
        doc = json.loads(path.read_text())
        (entry,) = doc["nuclei"]
        assert entry["id"] == 1 and entry["class_id"] == 3
        assert entry["bbox"] == [1, 4, 3, 5]
        assert entry["contour"][0] == [1, 4]

    def test_byte_identical_runs(self, tmp_path):
        recs = [
            NucleusRecord(i, 1, 0.5, (1.0, 1.0), (0, 0, 2, 2), [(0, 0), (2, 2)])
            for i in (1, 2)
        ]
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_instances_json(recs, p1)
        write_instances_json(recs, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_duplicate_id_rejected(self, tmp_path):
        rec = NucleusRecord(1, 1, 0.5, (0.0, 0.0), (0, 0, 0, 0), [(0, 0)])
        with pytest.raises(ShapeMismatch):
            write_instances_json([rec, rec], tmp_path / "d.json")

    def test_contour_outside_bbox_rejected(self, tmp_path):
        rec = NucleusRecord(1, 1, 0.5, (0.0, 0.0), (0, 0, 1, 1), [(0, 0), (2, 0)])
        with pytest.raises(ShapeMismatch):
            write_instances_json([rec], tmp_path / "d.json")


class TestWriteOverlayPng:
    def test_zero_map_leaves_image(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        path = tmp_path / "o.png"
        write_overlay_png(image, np.zeros((8, 8), dtype=np.int32), {}, path)
        np.testing.assert_array_equal(np.asarray(Image.open(path)), image)

    def test_rectangle_recolors_exact_boundary(self, tmp_path):
        image = np.full((10, 10, 3), 30, dtype=np.uint8)
        inst = np.zeros((10, 10), dtype=np.int32)
        inst[2:6, 2:7] = 1
        path = tmp_path / "o.png"
        write_overlay_png(image, inst, {1: 2}, path)
        out = np.asarray(Image.open(path))
        recolored = {
            (r, c)
            for r, c in zip(*np.nonzero((out != image).any(axis=-1)))
        }
        ring = {
            (r, c)
            for r in range(2, 6)
            for c in range(2, 7)
            if r in (2, 5) or c in (2, 6)
        }
        assert recolored == ring

    def test_palette_deterministic(self, tmp_path):
        image = np.zeros((6, 6, 3), dtype=np.uint8)
        inst = np.zeros((6, 6), dtype=np.int32)
        inst[1:3, 1:3] = 1
        p1, p2 = tmp_path / "a.png", tmp_path / "b.png"
        write_overlay_png(image, inst, {1: 3}, p1)
        write_overlay_png(image, inst, {1: 3}, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_shape_mismatch(self, tmp_path):
        with pytest.raises(ShapeMismatch):
            write_overlay_png(
                np.zeros((4, 4, 3), dtype=np.uint8),
                np.zeros((5, 5), dtype=np.int32),
                {},
                tmp_path / "x.png",
            )


class TestBoundaryMask:
    def test_matches_four_neighbor_oracle_on_rectangle(self):
        # for a filled rectangle the 4- and 8-neighbour rims coincide
        inst = np.zeros((9, 9), dtype=np.int32)
        inst[3:7, 2:8] = 1
        from helpers import boundary_pixels

        got = {(r, c) for r, c in zip(*np.nonzero(boundary_mask(inst)))}
        assert got == boundary_pixels(inst > 0)

    def test_touching_instances_both_rimmed(self):
        inst = np.zeros((4, 6), dtype=np.int32)
        inst[:, :3] = 1
        inst[:, 3:] = 2
        rim = boundary_mask(inst)
        # the shared column boundary belongs to both labels
        assert rim[:, 2].all() and rim[:, 3].all()
