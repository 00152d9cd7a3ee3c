"""Checkpoint container round-trip and corruption tests."""

import struct

import numpy as np
import pytest

from vqdisc.checkpoint import (CheckpointError, load_arrays, pack_u64,
                               save_arrays, unpack_u64)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "enc.1.w": rng.standard_normal((4, 7)).astype(np.float32),
        "enc.1.b": rng.standard_normal(7).astype(np.float32),
        "vq.1.vectors": rng.standard_normal((16, 4)).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = tmp_path / "model.ckpt"
    save_arrays(path, arrays)
    loaded = load_arrays(path)
    assert list(loaded) == list(arrays)
    for name in arrays:
        got, want = loaded[name], np.asarray(arrays[name], dtype=np.float32)
        assert got.shape == want.shape
        assert got.tobytes() == want.tobytes()


def test_file_layout_starts_with_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"x": np.zeros(2, dtype=np.float32)})
    blob = path.read_bytes()
    assert blob.startswith(b"VQDISC1\x00")
    assert struct.unpack("<I", blob[8:12])[0] == 1


def test_identical_content_identical_bytes(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3)}
    p1, p2 = tmp_path / "1.ckpt", tmp_path / "2.ckpt"
    save_arrays(p1, arrays)
    save_arrays(p2, {k: v.copy() for k, v in arrays.items()})
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_arrays(path)


def test_truncated_rejected(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_arrays(path, {"x": np.zeros(100, dtype=np.float32)})
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "trail.ckpt"
    save_arrays(path, {"x": np.zeros(2, dtype=np.float32)})
    path.write_bytes(path.read_bytes() + b"zz")
    with pytest.raises(CheckpointError, match="trailing"):
        load_arrays(path)


def test_u64_metadata_round_trip():
    for value in (0, 1, 2**63 + 12345, 2**64 - 1):
        assert unpack_u64(pack_u64(value)) == value
