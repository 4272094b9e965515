"""RXCK checkpoint format: round trips, corruption detection, atomicity."""

import os
import struct

import numpy as np
import pytest

from semrec import checkpoint as ck


def _entries():
    rng = np.random.default_rng(5)
    return {
        "a.w": rng.normal(size=(3, 4)).astype(np.float32),
        "a.b": rng.normal(size=(4,)).astype(np.float32),
        "deep.block.table": rng.normal(size=(2, 3, 4)).astype(np.float32),
        "scalarish": np.array([1.5], dtype=np.float32),
    }


def test_round_trip_bit_identical(tmp_path):
    path = tmp_path / "m.ckpt"
    entries = _entries()
    ck.save_checkpoint(entries, path)
    loaded = ck.load_checkpoint(path)
    assert set(loaded) == set(entries)
    for name, arr in entries.items():
        assert loaded[name].dtype == np.float32
        np.testing.assert_array_equal(loaded[name], arr)


def test_save_twice_same_bytes(tmp_path):
    entries = _entries()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    ck.save_checkpoint(entries, p1)
    ck.save_checkpoint(entries, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + struct.pack("<I", 1))
    with pytest.raises(ck.FormatError, match="magic"):
        ck.load_checkpoint(path)


def test_bad_version(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(ck.MAGIC + struct.pack("<I", 9))
    with pytest.raises(ck.FormatError, match="version"):
        ck.load_checkpoint(path)


def test_truncation_detected_everywhere(tmp_path):
    payload = ck.checkpoint_bytes(_entries())
    path = tmp_path / "cut.ckpt"
    # chop at a few byte positions inside the payload
    for cut in (2, 6, 9, 15, len(payload) // 2, len(payload) - 3):
        path.write_bytes(payload[:cut])
        with pytest.raises(ck.FormatError):
            ck.load_checkpoint(path)


def test_duplicate_entry_rejected(tmp_path):
    one = ck.checkpoint_bytes({"w": np.ones(2, dtype=np.float32)})
    dup = one + one[8:]  # append the same entry again, past the header
    path = tmp_path / "dup.ckpt"
    path.write_bytes(dup)
    with pytest.raises(ck.FormatError, match="duplicate"):
        ck.load_checkpoint(path)


def test_no_partial_file_on_failure(tmp_path):
    target = tmp_path / "x.ckpt"
    entries = {"ok": np.zeros(2, dtype=np.float32)}
    ck.save_checkpoint(entries, target)
    before = target.read_bytes()
    with pytest.raises(ValueError):
        ck.save_checkpoint({"bad": "not an array"}, target)
    # failed write never replaces the previous file, leaves no temp litter
    assert target.read_bytes() == before
    assert [f for f in os.listdir(tmp_path) if f.startswith(".tmp-")] == []
