import numpy as np
import pytest

from lift import container
from lift.errors import InvalidInputError, LiftError


def test_round_trip_preserves_arrays_and_header(tmp_path):
    arrays = {"b": np.arange(6, dtype="<i8").reshape(2, 3), "a": np.linspace(0, 1, 5)}
    container.save(tmp_path / "f.bin", b"TESTFILE", {"x": 1, "y": [1, 2]}, arrays)
    header, back = container.load(tmp_path / "f.bin", b"TESTFILE")
    assert header["x"] == 1 and header["y"] == [1, 2]
    for k, v in arrays.items():
        np.testing.assert_array_equal(back[k], v)
        assert back[k].dtype == v.dtype


def test_encoding_is_deterministic():
    arrays = {"z": np.ones(3), "a": np.zeros((2, 2))}
    assert container.encode(b"TESTFILE", {"k": 2, "a": 1}, arrays) == container.encode(
        b"TESTFILE", {"a": 1, "k": 2}, dict(reversed(list(arrays.items()))))


def test_wrong_magic_rejected():
    data = container.encode(b"TESTFILE", {}, {"a": np.ones(2)})
    with pytest.raises(LiftError):
        container.decode(data, b"OTHERMAG")


def test_truncated_payload_rejected():
    data = container.encode(b"TESTFILE", {}, {"a": np.ones(20)})
    with pytest.raises(LiftError):
        container.decode(data[:-8], b"TESTFILE")


def test_atomic_write_replaces_whole_file(tmp_path):
    p = tmp_path / "out.txt"
    container.atomic_write_text(p, "first")
    container.atomic_write_text(p, "second")
    assert p.read_text() == "second"
    assert [q.name for q in tmp_path.iterdir()] == ["out.txt"]
