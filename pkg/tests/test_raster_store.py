import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from firescope import raster_store as rs, synthetic


def make(pixels, bands, mask=None):
    pixels = np.asarray(pixels)
    if mask is None:
        mask = np.zeros(pixels.shape[:2], dtype=np.uint8)
    return rs.MultibandPatch(pixels, list(bands), np.asarray(mask, dtype=np.uint8))


class TestContainer:
    def test_size_arithmetic(self, tmp_path):
        ds = rs.PatchDataset([make(np.zeros((128, 128, 2), np.uint16), ["B6", "B7"])])
        path = tmp_path / "one.fpc"
        rs.write_container(ds, path)
        header = 20 + 2 * (1 + 2)
        assert path.stat().st_size == header + 128 * 128 * 2 * 2 + 128 * 128
        assert path.stat().st_size == rs.container_size(128, 128, ["B6", "B7"], 1, 1)

    def test_roundtrip(self, tmp_path, tiny_dataset):
        path = tmp_path / "d.fpc"
        rs.write_container(tiny_dataset, path)
        back = rs.read_container(path)
        assert rs.datasets_equal(back, tiny_dataset)
        assert back.provenance == str(path)

    def test_float32_roundtrip(self, tmp_path, rng):
        ds = rs.PatchDataset([make(rng.standard_normal((4, 4, 3)).astype(np.float32), "abc",
                                   rng.integers(0, 2, (4, 4)))])
        assert rs.datasets_equal(rs.decode_container(rs.encode_container(ds)), ds)

    def test_mismatched_bands(self):
        ds = rs.PatchDataset([make(np.zeros((2, 2, 1), np.uint16), ["B6"]),
                              make(np.zeros((2, 2, 1), np.uint16), ["B7"])])
        with pytest.raises(rs.DatasetValidationError, match="patch 1"):
            rs.encode_container(ds)

    def test_bad_magic(self, tiny_dataset):
        raw = b"XXXX" + rs.encode_container(tiny_dataset)[4:]
        with pytest.raises(rs.BadMagicError, match="bad magic"):
            rs.decode_container(raw)

    def test_truncated(self, tiny_dataset):
        raw = rs.encode_container(tiny_dataset)
        with pytest.raises(rs.TruncatedPayloadError, match=f"expected {len(raw)} bytes, got {len(raw) - 5}"):
            rs.decode_container(raw[:-5])

    def test_unknown_dtype(self, tiny_dataset):
        raw = bytearray(rs.encode_container(tiny_dataset))
        raw[18] = 9
        with pytest.raises(rs.UnknownDtypeError):
            rs.decode_container(bytes(raw))

    def test_errors_are_distinct(self):
        assert len({rs.BadMagicError, rs.TruncatedPayloadError, rs.UnknownDtypeError}) == 3
        assert all(issubclass(e, rs.ContainerError)
                   for e in (rs.BadMagicError, rs.TruncatedPayloadError, rs.UnknownDtypeError))


class TestBands:
    def test_select_green_and_swir(self, rng):
        patch = make(rng.integers(0, 9, (128, 128, 10)).astype(np.uint16), rs.LANDSAT_BANDS)
        sub = rs.select_bands(patch, ["B3", "B6", "B7"])
        assert sub.pixels.shape == (128, 128, 3)
        np.testing.assert_array_equal(sub.pixels[..., 1], patch.band("B6"))

    def test_identity(self, tiny_dataset):
        p = tiny_dataset[0]
        np.testing.assert_array_equal(rs.select_bands(p, p.band_ids).pixels, p.pixels)

    def test_unknown(self, tiny_dataset):
        with pytest.raises(rs.UnknownBandError, match="B99"):
            rs.select_bands(tiny_dataset[0], ["B99"])


class TestStats:
    def test_all_zero_masks(self):
        ds = rs.PatchDataset([make(np.zeros((2, 2, 1), np.uint16), ["B6"]) for _ in range(3)])
        assert rs.dataset_stats(ds).n_fire == 0

    def test_single_fire_pixel(self):
        patches = [make(np.zeros((2, 2, 1), np.uint16), ["B6"]) for _ in range(3)]
        patches[1].mask[0, 1] = 1
        s = rs.dataset_stats(rs.PatchDataset(patches))
        assert (s.n_fire, s.n_nonfire) == (1, 2)


class TestCirrusFilter:
    def test_boundary(self):
        lo = np.zeros((2, 2, 1), np.uint16)
        hi = lo.copy()
        lo[0, 0] = 499
        hi[1, 1] = 500
        ds = rs.PatchDataset([make(lo, ["B9"]), make(hi, ["B9"])])
        assert rs.filter_cirrus(ds, "B9", 500) == [1]

    def test_all_zero(self):
        ds = rs.PatchDataset([make(np.zeros((2, 2, 1), np.uint16), ["B9"])])
        assert rs.filter_cirrus(ds) == []


class TestNormalize:
    def test_two_point(self):
        ds = rs.PatchDataset([make(np.array([[[0], [2]]], np.uint16), ["B6"])])
        out, stats = rs.normalize_bands(ds)
        assert stats.mean[0] == 1.0 and stats.std[0] == 1.0
        assert out[0].pixels.ravel().tolist() == [-1.0, 1.0]

    def test_reuse_stats(self, tiny_dataset):
        a, stats = rs.normalize_bands(tiny_dataset)
        b, _ = rs.normalize_bands(tiny_dataset, stats)
        assert rs.datasets_equal(a, b)

    def test_constant_band(self):
        ds = rs.PatchDataset([make(np.full((2, 2, 1), 7, np.uint16), ["B6"])])
        with pytest.raises(ValueError, match="zero-variance"):
            rs.normalize_bands(ds)

    def test_band_mismatch(self, tiny_dataset):
        _, stats = rs.normalize_bands(tiny_dataset)
        other = rs.select_dataset_bands(tiny_dataset, ["B7", "B6"])
        with pytest.raises(ValueError, match="do not match"):
            rs.normalize_bands(other, stats)


def test_patch_validation():
    with pytest.raises(rs.DatasetValidationError):
        make(np.zeros((2, 2, 2), np.uint16), ["B6"])
    with pytest.raises(rs.DatasetValidationError):
        make(np.zeros((2, 2, 1), np.uint16), ["B6"], np.full((2, 2), 3))


patch_shapes = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(1, 4))


@settings(max_examples=40, deadline=None)
@given(patch_shapes, st.sampled_from([np.uint16, np.float32]), st.integers(0, 2**32 - 1))
def test_container_roundtrip_property(shape, dtype, seed):
    n, h, w, b = shape
    rng = np.random.default_rng(seed)
    if dtype is np.uint16:
        gen = lambda: rng.integers(0, 65536, (h, w, b)).astype(np.uint16)
    else:
        gen = lambda: rng.standard_normal((h, w, b)).astype(np.float32)
    bands = [f"B{i}" for i in range(b)]
    ds = rs.PatchDataset([make(gen(), bands, rng.integers(0, 2, (h, w))) for _ in range(n)])
    assert rs.datasets_equal(rs.decode_container(rs.encode_container(ds)), ds)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3000), min_size=1, max_size=12), st.integers(0, 3000),
       st.integers(0, 3000))
def test_filter_monotone_in_threshold(maxima, t1, t2):
    patches = []
    for m in maxima:
        px = np.zeros((2, 2, 1), np.uint16)
        px[0, 0] = m
        patches.append(make(px, ["B9"]))
    ds = rs.PatchDataset(patches)
    lo, hi = sorted((t1, t2))
    assert set(rs.filter_cirrus(ds, "B9", hi)) <= set(rs.filter_cirrus(ds, "B9", lo))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_normalized_moments(seed):
    ds = synthetic.make_dataset(3, 8, seed=seed)
    out, _ = rs.normalize_bands(ds)
    x = np.stack([p.pixels for p in out.patches]).reshape(-1, 2)
    assert np.all(np.abs(x.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(x.std(axis=0) - 1.0) < 1e-9)
