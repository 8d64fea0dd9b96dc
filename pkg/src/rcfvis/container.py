"""Versioned on-disk container: `manifest.json` + `tensors.bin`.

The manifest is UTF-8 JSON describing named blocks; `tensors.bin` holds the
raw block bytes back to back, all multi-byte values little-endian.  Clips,
checkpoints and prediction dumps all reuse this layer.  Binary masks are
stored run-length encoded: a sequence of (value, run-length) pairs of
unsigned 32-bit integers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError

FORMAT_NAME = "rcfvis-container"
FORMAT_VERSION = 1

MANIFEST_FILE = "manifest.json"
TENSORS_FILE = "tensors.bin"

_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"), "<u4": np.dtype("<u4"), "<u1": np.dtype("<u1")}


def rle_encode(plane: np.ndarray) -> np.ndarray:
    """Run-length encode a flat binary array into (value, run) uint32 pairs."""
    flat = np.asarray(plane).reshape(-1).astype(np.uint32)
    if flat.size == 0:
        return np.zeros(0, dtype="<u4")
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [flat.size]))
    pairs = np.empty((starts.size, 2), dtype="<u4")
    pairs[:, 0] = flat[starts]
    pairs[:, 1] = ends - starts
    return pairs.reshape(-1)


def rle_decode(runs: np.ndarray, size: int) -> np.ndarray:
    """Inverse of rle_encode; returns a uint8 array of `size` elements."""
    runs = np.asarray(runs, dtype="<u4")
    if runs.size % 2 != 0:
        raise FormatError("RLE stream has an odd number of words")
    values = runs[0::2]
    lengths = runs[1::2].astype(np.int64)
    if lengths.sum() != size:
        raise FormatError(f"RLE stream decodes to {lengths.sum()} elements, expected {size}")
    return np.repeat(values.astype(np.uint8), lengths)


def write_container(path: str | Path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    """Write `meta` plus named arrays to `path` (a directory, created)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr)
        code = f"<{arr.dtype.kind}{arr.dtype.itemsize}"
        if code not in _DTYPES:
            raise FormatError(f"unsupported block dtype {arr.dtype} for {name!r}")
        raw = arr.astype(_DTYPES[code], copy=False).tobytes()
        entries.append(
            {"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "meta": meta, "blocks": entries}
    (path / TENSORS_FILE).write_bytes(b"".join(chunks))
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container directory; returns (meta, {name: array})."""
    path = Path(path)
    mpath = path / MANIFEST_FILE
    tpath = path / TENSORS_FILE
    if not mpath.is_file():
        raise FormatError(f"missing {MANIFEST_FILE} under {path}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt manifest: {e}") from e
    if manifest.get("format") != FORMAT_NAME:
        raise FormatError(f"unrecognized format {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"unrecognized container version {manifest.get('version')!r}")
    if not tpath.is_file():
        raise FormatError(f"missing {TENSORS_FILE} under {path}")
    raw = tpath.read_bytes()
    blocks: dict[str, np.ndarray] = {}
    prev_end = 0
    for entry in manifest["blocks"]:
        name, offset, nbytes = entry["name"], entry["offset"], entry["nbytes"]
        if offset < prev_end:
            raise FormatError(f"block {name!r} overlaps the previous block", offset=offset)
        if offset + nbytes > len(raw):
            raise FormatError(f"truncated tensors.bin: block {name!r} extends past end of file", offset=offset)
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"block {name!r} has unsupported dtype {entry['dtype']!r}", offset=offset)
        arr = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        blocks[name] = arr.reshape(entry["shape"]).copy()
        prev_end = offset + nbytes
    return manifest["meta"], blocks
