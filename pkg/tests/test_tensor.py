import io
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtdnet.errors import FormatError, ShapeError, SizeError
from mtdnet.tensor import (
    Shape5, channel_bands, concat_channels, load_tensor, make_rng, randn, read_tensor,
    save_tensor, tensor_from_bytes, tensor_to_bytes, zeros,
)

extent = st.integers(1, 4)
shapes = st.tuples(extent, extent, extent, extent, extent)


def test_zeros_single_element():
    z = zeros((1, 1, 1, 1, 1))
    assert z.shape == (1, 1, 1, 1, 1) and z.dtype == np.float64
    assert z.ravel().tolist() == [0.0]


def test_zeros_count_and_sum():
    z = zeros((2, 3, 4, 5, 6))
    assert z.size == 720
    assert z.sum() == 0.0


def test_zeros_overflow_is_size_error():
    with pytest.raises(SizeError):
        zeros((1, 1, 2**31, 2**31, 2))


@pytest.mark.parametrize("bad", [(0, 1, 1, 1, 1), (1, 1, 1, 1), (1, -2, 1, 1, 1)])
def test_invalid_shapes(bad):
    with pytest.raises(ShapeError):
        Shape5.of(bad)


def test_randn_moments():
    x = randn((1, 1, 1, 1, 10_000), make_rng(42), 1.0)
    assert abs(x.mean()) < 0.05
    assert abs(x.std() - 1.0) < 0.05


def test_randn_deterministic_and_seed_sensitive():
    a = randn((2, 2, 2, 2, 2), make_rng(42), 0.5)
    b = randn((2, 2, 2, 2, 2), make_rng(42), 0.5)
    c = randn((2, 2, 2, 2, 2), make_rng(43), 0.5)
    assert a.tobytes() == b.tobytes()
    assert np.any(a != c)


@pytest.mark.parametrize("std", [0.0, -1.0])
def test_randn_rejects_nonpositive_std(std):
    with pytest.raises(ValueError):
        randn((1, 1, 1, 1, 1), make_rng(0), std)


def test_randn_identical_across_processes():
    code = ("import sys; from mtdnet.tensor import randn, make_rng;"
            "sys.stdout.buffer.write(randn((1,2,3,4,5), make_rng(7), 0.3).tobytes())")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, check=True).stdout
    assert out == randn((1, 2, 3, 4, 5), make_rng(7), 0.3).tobytes()


def test_concat_single_part_is_identity(rng):
    x = rng.standard_normal((2, 3, 4, 2, 2))
    np.testing.assert_array_equal(concat_channels([x]), x)


def test_concat_channel_sum(rng):
    parts = [rng.standard_normal((1, c, 2, 3, 3)) for c in (4, 6, 8)]
    assert concat_channels(parts).shape[1] == 18


def test_concat_bands_recover_parts(rng):
    parts = [rng.standard_normal((2, c, 3, 2, 2)) for c in (3, 5)]
    out = concat_channels(parts)
    for part, band in zip(parts, channel_bands([3, 5])):
        np.testing.assert_array_equal(out[:, band], part)


def test_concat_mismatch(rng):
    with pytest.raises(ShapeError):
        concat_channels([np.zeros((1, 1, 2, 2, 2)), np.zeros((1, 1, 3, 2, 2))])
    with pytest.raises(ValueError):
        concat_channels([])


@given(shapes, st.integers(1, 3), st.integers(1, 3))
def test_concat_associative(shape, c2, c3):
    r = np.random.default_rng(0)
    a = r.standard_normal(shape)
    b = r.standard_normal(shape[:1] + (c2,) + shape[2:])
    c = r.standard_normal(shape[:1] + (c3,) + shape[2:])
    np.testing.assert_array_equal(concat_channels([concat_channels([a, b]), c]),
                                  concat_channels([a, b, c]))


@given(shapes)
def test_flatten_reshape_round_trip(shape):
    x = np.random.default_rng(1).standard_normal(shape)
    np.testing.assert_array_equal(x.ravel().reshape(shape), x)


@settings(max_examples=25)
@given(shapes)
def test_binary_round_trip(shape):
    x = np.random.default_rng(2).standard_normal(shape)
    y = tensor_from_bytes(tensor_to_bytes(x))
    assert y.tobytes() == x.tobytes() and y.shape == x.shape


def test_binary_layout():
    x = np.arange(6, dtype=float).reshape(1, 1, 1, 2, 3)
    data = tensor_to_bytes(x)
    assert data[:4] == b"MTD5"
    assert int.from_bytes(data[4:8], "little") == 1
    dims = [int.from_bytes(data[8 + 8 * i:16 + 8 * i], "little") for i in range(5)]
    assert dims == [1, 1, 1, 2, 3]
    assert np.frombuffer(data[48:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_binary_errors():
    data = tensor_to_bytes(np.ones((1, 1, 1, 1, 3)))
    with pytest.raises(FormatError):
        tensor_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        tensor_from_bytes(data[:-1])
    with pytest.raises(FormatError):
        tensor_from_bytes(data[:4] + (9).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError):
        read_tensor(io.BytesIO(b"MTD"))


def test_file_round_trip(tmp_path, rng):
    x = rng.standard_normal((1, 2, 3, 4, 5))
    save_tensor(tmp_path / "x.mtd5", x)
    assert load_tensor(tmp_path / "x.mtd5").tobytes() == x.tobytes()
