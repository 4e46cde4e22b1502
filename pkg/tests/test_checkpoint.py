import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from mtcrl import checkpoint as ckpt
from mtcrl.checkpoint import CheckpointError


@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
              elements=st.floats(allow_nan=False, allow_infinity=True, width=64)))
def test_round_trip_is_bit_exact(tmp_path_factory, arr):
    path = tmp_path_factory.mktemp("ck") / "a.ckpt"
    ckpt.save(path, {"x": arr, "ünï/côdé": arr + 0.0}, manifest={"k": [1, 2], "s": "v"})
    loaded, manifest = ckpt.load(path)
    assert list(loaded) == ["x", "ünï/côdé"]
    assert loaded["x"].shape == arr.shape and loaded["x"].tobytes() == arr.tobytes()
    assert manifest == {"k": [1, 2], "s": "v"}


def test_layout_is_little_endian(tmp_path):
    path = tmp_path / "a.ckpt"
    ckpt.save(path, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:8] == b"MTCCKPT1"
    assert struct.unpack_from("<I", raw, 8)[0] == 1 and raw[12:13] == b"w"
    assert struct.unpack_from("<3I", raw, 13) == (2, 1, 2)
    assert struct.unpack_from("<2d", raw, 25) == (1.0, 2.0)
    assert len(raw) == 41


def test_missing_manifest_is_none(tmp_path):
    ckpt.save(tmp_path / "a", {"x": np.zeros(2)})
    assert ckpt.load(tmp_path / "a")[1] is None


def test_bad_magic_and_truncation(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        ckpt.load(tmp_path / "bad")
    ckpt.save(tmp_path / "ok", {"x": np.arange(10.0)})
    raw = (tmp_path / "ok").read_bytes()
    for cut in (10, 20, len(raw) - 3):
        (tmp_path / "cut").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError):
            ckpt.load(tmp_path / "cut")


def test_manifest_check():
    ckpt.check_manifest({"a": 1, "b": 2}, {"a": 1})
    with pytest.raises(CheckpointError):
        ckpt.check_manifest({"a": 1}, {"a": 2})
    with pytest.raises(CheckpointError):
        ckpt.check_manifest(None, {"a": 1})
