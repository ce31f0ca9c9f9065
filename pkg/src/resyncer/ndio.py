"""On-disk formats: raw array files, checkpoint containers, JSON helpers.

Array file layout (little-endian throughout):

    bytes 0..3   magic ``RSY1``
    byte  4      dtype code (0=uint8, 1=float32, 2=float64, 3=int32)
    byte  5      ndim (1..4)
    bytes 6..7   reserved (zero)
    bytes 8..15  dims, 4 x uint16 (unused trailing dims are 1)
    bytes 16..   payload, C-order

Checkpoint layout: magic ``RSCK``, uint32 JSON header length, JSON header
(config echo, metadata, array index), then the named arrays concatenated in
index order. Everything is written with sorted keys and no timestamps so
that identical inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

ARRAY_MAGIC = b"RSY1"
CKPT_MAGIC = b"RSCK"
_HEADER = struct.Struct("<4sBBH4H")

_DTYPE_CODES = {0: np.uint8, 1: np.float32, 2: np.float64, 3: np.int32}
_DTYPE_TO_CODE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}
_MAX_DIM = 0xFFFF


def array_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise DataError(f"unsupported dtype for array file: {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 4:
        raise DataError(f"array rank must be 1..4, got {arr.ndim}")
    if any(d > _MAX_DIM for d in arr.shape):
        raise DataError(f"dimension exceeds {_MAX_DIM}: shape {arr.shape}")
    dims = list(arr.shape) + [1] * (4 - arr.ndim)
    header = _HEADER.pack(ARRAY_MAGIC, _DTYPE_TO_CODE[arr.dtype], arr.ndim, 0, *dims)
    if arr.dtype == np.uint8:
        payload = arr.tobytes()
    else:
        payload = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def bytes_to_array(buf: bytes, context: str = "<memory>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise DataError(f"{context}: truncated array header")
    magic, code, ndim, _, d0, d1, d2, d3 = _HEADER.unpack_from(buf)
    if magic != ARRAY_MAGIC:
        raise DataError(f"{context}: bad magic {magic!r}")
    if code not in _DTYPE_CODES:
        raise DataError(f"{context}: unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise DataError(f"{context}: bad ndim {ndim}")
    shape = (d0, d1, d2, d3)[:ndim]
    dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
    expect = int(np.prod(shape)) * dtype.itemsize
    payload = buf[_HEADER.size:]
    if len(payload) != expect:
        raise DataError(f"{context}: payload is {len(payload)} bytes, expected {expect}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(_DTYPE_CODES[code])


def save_array(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    try:
        path.write_bytes(array_to_bytes(arr))
    except OSError as exc:
        raise DataError(f"failed to write array file {path}: {exc}") from exc


def load_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"failed to read array file {path}: {exc}") from exc
    return bytes_to_array(buf, context=str(path))


def dump_json(path: str | Path, obj: object) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"failed to write {path}: {exc}") from exc


def load_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"failed to read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {path}: {exc}") from exc


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


VIDEO_MAGIC = b"RVID"
_VIDEO_HEADER = struct.Struct("<4sHHHHHH")


def save_raw_video(path: str | Path, frames: np.ndarray, fps: int) -> None:
    """Codec-free video: fixed header + contiguous rgb24 frame payload."""
    frames = np.ascontiguousarray(frames)
    if frames.dtype != np.uint8 or frames.ndim != 4 or frames.shape[3] != 3:
        raise DataError(f"raw video needs uint8 [T, H, W, 3], got {frames.shape}")
    t, h, w, _ = frames.shape
    if max(t, h, w, fps) > _MAX_DIM:
        raise DataError(f"video dimension exceeds {_MAX_DIM}")
    header = _VIDEO_HEADER.pack(VIDEO_MAGIC, t, h, w, 3, int(fps), 0)
    try:
        Path(path).write_bytes(header + frames.tobytes())
    except OSError as exc:
        raise DataError(f"failed to write video file {path}: {exc}") from exc


def load_raw_video(path: str | Path) -> tuple[np.ndarray, int]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"failed to read video file {path}: {exc}") from exc
    if len(buf) < _VIDEO_HEADER.size:
        raise DataError(f"{path}: truncated video header")
    magic, t, h, w, c, fps, _ = _VIDEO_HEADER.unpack_from(buf)
    if magic != VIDEO_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expect = t * h * w * c
    payload = buf[_VIDEO_HEADER.size:]
    if len(payload) != expect:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expect}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, c).copy(), fps


def save_checkpoint(
    path: str | Path,
    config: dict,
    arrays: dict[str, np.ndarray],
    meta: dict | None = None,
) -> None:
    """Write a self-describing checkpoint: config echo + named weight arrays."""
    path = Path(path)
    names = sorted(arrays)
    index = []
    payloads = []
    for name in names:
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(arrays[name], dtype=np.float32)
        index.append({"name": name, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = {"config": config, "meta": meta or {}, "arrays": index, "version": 1}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", len(header_bytes)))
            fh.write(header_bytes)
            for payload in payloads:
                fh.write(payload)
    except OSError as exc:
        raise DataError(f"failed to write checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (config, arrays, meta)."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"failed to read checkpoint {path}: {exc}") from exc
    if buf[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8 : 8 + hlen].decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    off = 8 + hlen
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) * 4
        if off + n > len(buf):
            raise DataError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = (
            np.frombuffer(buf, dtype="<f4", count=int(np.prod(shape)), offset=off)
            .reshape(shape)
            .astype(np.float32)
        )
        off += n
    return header["config"], arrays, header.get("meta", {})
