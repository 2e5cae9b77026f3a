import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from swinunetr.datapipe import (HEADER, LabeledVolume, Volume, gen_phantom, list_labeled, list_volumes,
                                preprocess_ct, read_labeled, read_volume, sample_labeled, sample_subvolume,
                                write_labeled, write_volume)
from swinunetr.errors import FormatError, SamplingError, ShapeError

finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, max_side=5), elements=finite32))
def test_vol1_roundtrip_float(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("v") / "a.vol"
    write_volume(path, Volume(arr, (0.5, 1.0, 2.5)))
    back = read_volume(path)
    assert back.data.tobytes() == arr.tobytes() and back.data.shape == arr.shape
    assert back.spacing == (0.5, 1.0, 2.5)


def test_vol1_roundtrip_u16(tmp_path, rng):
    arr = rng.integers(0, 65536, size=(1, 3, 4, 5)).astype(np.uint16)
    write_volume(tmp_path / "l.vol", Volume(arr))
    assert np.array_equal(read_volume(tmp_path / "l.vol").data, arr)


def test_vol1_layout(tmp_path):
    arr = np.arange(2 * 3 * 4 * 5, dtype=np.float32).reshape(2, 3, 4, 5)
    write_volume(tmp_path / "a.vol", Volume(arr, (1.0, 1.0, 2.0)))
    raw = (tmp_path / "a.vol").read_bytes()
    assert raw[:4] == b"VOL1"
    assert struct.unpack_from("<IIIII", raw, 4) == (1, 2, 3, 4, 5)
    assert struct.unpack_from("<3f", raw, 24) == (1.0, 1.0, 2.0)
    assert raw[36] == 0 and raw[37:40] == b"\0\0\0"
    payload = np.frombuffer(raw, "<f4", offset=40)
    # channel-major then z, y, x with x fastest: the second value steps along H (x)
    assert payload[1] == arr[0, 1, 0, 0] and payload[3] == arr[0, 0, 1, 0] and payload[12] == arr[0, 0, 0, 1]


def test_vol1_minimal_size(tmp_path):
    write_volume(tmp_path / "m.vol", Volume(np.zeros((1, 1, 1, 1), np.float32)))
    assert (tmp_path / "m.vol").stat().st_size == HEADER.size + 4 == 44


def test_vol1_errors(tmp_path):
    path = tmp_path / "a.vol"
    write_volume(path, Volume(np.zeros((1, 2, 2, 2), np.float32)))
    raw = bytearray(path.read_bytes())
    bad = tmp_path / "bad.vol"
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="VOL1"):
        read_volume(bad)
    bad.write_bytes(raw[:-3])
    with pytest.raises(FormatError, match="truncated"):
        read_volume(bad)
    zero = raw.copy()
    struct.pack_into("<I", zero, 12, 0)
    bad.write_bytes(zero)
    with pytest.raises(FormatError, match="offset 12"):
        read_volume(bad)
    bad.write_bytes(raw[:20])
    with pytest.raises(FormatError, match="header"):
        read_volume(bad)
    with pytest.raises(TypeError):
        write_volume(bad, Volume(np.zeros((1, 2, 2, 2), np.float64)))


def test_labeled_io(tmp_path):
    lv = gen_phantom(3, (16, 16, 16), n_shapes=3, n_classes=3)
    write_labeled(tmp_path / "case0", lv)
    (tmp_path / "orphan.img.vol").write_bytes((tmp_path / "case0.img.vol").read_bytes())
    assert list_labeled(tmp_path) == [tmp_path / "case0"]
    assert [p.name for p in list_volumes(tmp_path)] == ["case0.img.vol", "orphan.img.vol"]
    back = read_labeled(tmp_path / "case0", 3)
    assert np.array_equal(back.labels, lv.labels) and np.array_equal(back.image.data, lv.image.data)


def test_volume_validation():
    with pytest.raises(ShapeError):
        Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((1, 2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ShapeError):
        LabeledVolume(Volume(np.zeros((1, 2, 2, 2))), np.zeros((2, 2, 3), int))
    with pytest.raises(ValueError):
        LabeledVolume(Volume(np.zeros((1, 2, 2, 2))), np.full((2, 2, 2), 3), n_classes=3)


def test_preprocess_ct():
    v = Volume(np.array([-3000, -1000, 0, 500, 1000, 4000], np.float32).reshape(1, 6, 1, 1))
    out = preprocess_ct(v).data.ravel()
    np.testing.assert_allclose(out, [0, 0, 0.5, 0.75, 1, 1], atol=1e-7)
    assert np.all(np.diff(out) >= 0)
    twice = preprocess_ct(preprocess_ct(v)).data.ravel()
    np.testing.assert_allclose(twice, 0.5 + out / 2000, atol=1e-7)
    with pytest.raises(ValueError):
        preprocess_ct(v, 1.0, 1.0)


def test_sample_subvolume(rng):
    v = Volume(rng.random((1, 10, 8, 6)).astype(np.float32))
    assert np.array_equal(sample_subvolume(v, (10, 8, 6), rng).data, v.data)
    a = sample_subvolume(v, (4, 4, 4), np.random.default_rng(9)).data
    b = sample_subvolume(v, (4, 4, 4), np.random.default_rng(9)).data
    assert a.shape == (1, 4, 4, 4) and np.array_equal(a, b)
    with pytest.raises(SamplingError):
        sample_subvolume(Volume(np.zeros((1, 8, 8, 8), np.float32)), (4, 4, 4), rng)
    with pytest.raises(ShapeError):
        sample_subvolume(v, (11, 4, 4), rng)


def test_sample_subvolume_rejects_air(rng):
    data = np.zeros((1, 16, 4, 4), np.float32)
    data[0, 15, 0, 0] = 1.0
    for seed in range(20):
        crop = sample_subvolume(Volume(data), (4, 4, 4), np.random.default_rng(seed))
        assert crop.data.max() == 1.0


def test_sample_labeled_alignment(rng):
    lv = gen_phantom(0, (16, 16, 16))
    crop = sample_labeled(LabeledVolume(Volume(lv.labels[None].astype(np.float32)), lv.labels, 3), (8, 8, 8), rng)
    assert np.array_equal(crop.image.data[0], crop.labels)


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_phantom_contract(seed):
    a = gen_phantom(seed, (24, 20, 16), n_shapes=4, n_classes=3)
    b = gen_phantom(seed, (24, 20, 16), n_shapes=4, n_classes=3)
    assert a.image.data.tobytes() == b.image.data.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.image.data.min() >= 0 and a.image.data.max() <= 1
    assert len(np.unique(a.labels)) >= 2 and a.labels.max() < 3
    assert a.image.data.dtype == np.float32


def test_phantom_intensity_bands():
    lv = gen_phantom(5, (32, 32, 32), n_shapes=6, n_classes=4)
    img = lv.image.data[0]
    for c in np.unique(lv.labels):
        mean = img[lv.labels == c].mean()
        expected = 0.1 if c == 0 else 0.2 + 0.15 * c
        assert abs(mean - expected) < 0.06


def test_phantom_errors():
    with pytest.raises(ShapeError):
        gen_phantom(0, (8, 16, 16))
    with pytest.raises(ValueError):
        gen_phantom(0, n_shapes=0)
