"""RVOL container and axis-order tests."""

import numpy as np
import pytest

from voxseg.errors import DataError
from voxseg.volume import (
    RVOL_MAGIC,
    Volume,
    from_tensor_axes,
    read_rvol,
    to_tensor_axes,
    write_rvol,
)


def test_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.normal(size=(7, 5, 3)).astype(np.float32), spacing=(0.7, 0.7, 2.5))
    path = tmp_path / "v.rvol"
    write_rvol(path, vol)
    again = read_rvol(path)
    np.testing.assert_array_equal(again.data, vol.data)
    assert again.spacing == pytest.approx(vol.spacing)
    path2 = tmp_path / "v2.rvol"
    write_rvol(path2, again)
    assert path.read_bytes() == path2.read_bytes()


def test_label_volume_roundtrip(tmp_path):
    labels = (np.arange(24).reshape(2, 3, 4) % 2).astype(np.uint8)
    path = tmp_path / "m.rvol"
    write_rvol(path, Volume(labels))
    again = read_rvol(path)
    assert again.data.dtype == np.uint8
    np.testing.assert_array_equal(again.data, labels)


def test_raster_order_is_x_fastest(tmp_path):
    vol = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    path = tmp_path / "o.rvol"
    write_rvol(path, vol)
    raw = path.read_bytes()
    payload = np.frombuffer(raw[31:], dtype="<f4")
    # value at (x, y, z) must sit at x + 2*y + 4*z
    expected = np.empty(8, np.float32)
    for x in range(2):
        for y in range(2):
            for z in range(2):
                expected[x + 2 * y + 4 * z] = vol.data[x, y, z]
    np.testing.assert_array_equal(payload, expected)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.rvol"
    path.write_bytes(b"GARBAGE" + b"\x00" * 40)
    with pytest.raises(DataError):
        read_rvol(path)


def test_payload_length_checked(tmp_path):
    path = tmp_path / "short.rvol"
    vol = Volume(np.zeros((4, 4, 4), dtype=np.float32))
    write_rvol(path, vol)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(DataError):
        read_rvol(path)


def test_non_3d_rejected():
    with pytest.raises(DataError):
        Volume(np.zeros((4, 4), dtype=np.float32))


def test_tensor_axes_roundtrip():
    arr = np.arange(24).reshape(2, 3, 4)
    t = to_tensor_axes(arr)
    assert t.shape == (4, 3, 2)  # (z, y, x)
    assert t[1, 2, 0] == arr[0, 2, 1]
    np.testing.assert_array_equal(from_tensor_axes(t), arr)
