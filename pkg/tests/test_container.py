"""Container format: round-trips, RLE, corruption reporting."""

import json

import numpy as np
import pytest

from rcfvis.container import read_container, rle_decode, rle_encode, write_container
from rcfvis.errors import FormatError


def test_roundtrip_bit_exact(tmp_path, rng):
    blocks = {
        "a": rng.standard_normal((3, 4)).astype("<f4"),
        "b": rng.standard_normal(7),
        "c": np.arange(5, dtype="<u4"),
        "flags": np.array([0, 1, 1], dtype=np.uint8),
    }
    write_container(tmp_path / "c", {"kind": "test", "x": 1}, blocks)
    meta, out = read_container(tmp_path / "c")
    assert meta == {"kind": "test", "x": 1}
    for k, v in blocks.items():
        assert out[k].dtype == v.dtype and np.array_equal(out[k], v)


def test_rle_all_zero_single_run():
    runs = rle_encode(np.zeros((8, 12), dtype=np.uint8))
    assert runs.tolist() == [0, 96]
    assert np.array_equal(rle_decode(runs, 96), np.zeros(96, dtype=np.uint8))


def test_rle_roundtrip_random(rng):
    for _ in range(20):
        plane = (rng.random(64) < 0.3).astype(np.uint8)
        runs = rle_encode(plane)
        assert np.array_equal(rle_decode(runs, 64), plane)


def test_rle_length_mismatch():
    with pytest.raises(FormatError):
        rle_decode(np.array([1, 5], dtype="<u4"), 6)


def test_truncated_tensor_file_names_block(tmp_path, rng):
    write_container(tmp_path / "c", {}, {"alpha": rng.standard_normal(4), "beta": rng.standard_normal(4)})
    raw = (tmp_path / "c" / "tensors.bin").read_bytes()
    (tmp_path / "c" / "tensors.bin").write_bytes(raw[:40])
    with pytest.raises(FormatError, match="beta"):
        read_container(tmp_path / "c")


def test_unknown_version_rejected(tmp_path):
    write_container(tmp_path / "c", {}, {"a": np.zeros(2)})
    mpath = tmp_path / "c" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["version"] = 99
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="version"):
        read_container(tmp_path / "c")


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError, match="manifest"):
        read_container(tmp_path / "nothing")


def test_overlapping_blocks_rejected(tmp_path):
    write_container(tmp_path / "c", {}, {"a": np.zeros(4), "b": np.zeros(4)})
    mpath = tmp_path / "c" / "manifest.json"
    manifest = json.loads(mpath.read_text())
    manifest["blocks"][1]["offset"] = 8  # overlaps block a (32 bytes)
    mpath.write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="overlap"):
        read_container(tmp_path / "c")
