"""Single-file checkpoint format.

Layout: [8-byte LE header length][UTF-8 JSON header][blob][8-byte LE CRC-64
of the blob]. The header maps parameter paths to dtype/shape/offset/length/
trainable records; offsets are relative to the blob start, assigned in sorted
path order, contiguous and exhaustive. Writes are atomic (temp file + rename)
and byte-deterministic for identical inputs.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ._kernels import crc64
from .tensor import Parameter

FORMAT_VERSION = 1

_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
_DTYPE_NAMES = {np.dtype(np.float32): "f32le", np.dtype(np.float64): "f64le"}


class CheckpointError(ValueError):
    """Base class for checkpoint problems."""


class HeaderError(CheckpointError):
    """Malformed or truncated header / file structure."""


class LayoutError(CheckpointError):
    """Blob offsets overlap, leave gaps, or disagree with shapes."""


class CrcMismatchError(CheckpointError):
    """Blob bytes do not match the stored CRC-64."""


@dataclass
class CheckpointFile:
    """Parsed header of a checkpoint on disk."""

    path: str
    format_version: int
    tensors: dict[str, dict]
    blob_bytes: int

    @property
    def total_params(self) -> int:
        return sum(int(np.prod(rec["shape"], dtype=np.int64)) for rec in self.tensors.values())


def save(path: str, params: Mapping[str, "Parameter | np.ndarray"]) -> None:
    """Write parameters to `path` atomically. Plain arrays are stored as
    trainable; Parameter flags are preserved."""
    if not params:
        raise CheckpointError("refusing to write an empty checkpoint")
    records = {}
    blobs = []
    offset = 0
    for name in sorted(params):
        p = params[name]
        arr = p.data if isinstance(p, Parameter) else np.asarray(p)
        trainable = p.trainable if isinstance(p, Parameter) else True
        if arr.dtype not in _DTYPE_NAMES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        records[name] = {
            "dtype": _DTYPE_NAMES[arr.dtype],
            "shape": list(arr.shape),
            "offset": offset,
            "length": len(raw),
            "trainable": bool(trainable),
        }
        blobs.append(raw)
        offset += len(raw)

    header = json.dumps({"format_version": FORMAT_VERSION, "tensors": records},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(blobs)
    crc = crc64(blob)

    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(blob)
            fh.write(struct.pack("<Q", crc))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse(path: str) -> tuple[CheckpointFile, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise HeaderError(f"{path}: too short to hold a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen + 8 > len(raw):
        raise HeaderError(f"{path}: header length {hlen} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or "tensors" not in header or "format_version" not in header:
        raise HeaderError(f"{path}: header missing format_version/tensors")
    version = header["format_version"]
    if version != FORMAT_VERSION:
        raise HeaderError(f"{path}: unsupported format version {version!r}")
    tensors = header["tensors"]
    if not isinstance(tensors, dict) or not tensors:
        raise HeaderError(f"{path}: tensor table must be a non-empty object")

    blob = raw[8 + hlen:len(raw) - 8]
    (stored_crc,) = struct.unpack("<Q", raw[len(raw) - 8:])

    end = 0
    for name in sorted(tensors):
        rec = tensors[name]
        if not isinstance(rec, dict) or set(rec) != {"dtype", "shape", "offset", "length", "trainable"}:
            raise HeaderError(f"{path}: malformed record for {name!r}")
        if rec["dtype"] not in _DTYPES:
            raise HeaderError(f"{path}: {name}: unknown dtype {rec['dtype']!r}")
        want = int(np.prod(rec["shape"], dtype=np.int64)) * _DTYPES[rec["dtype"]].itemsize
        if rec["length"] != want:
            raise LayoutError(f"{path}: {name}: length {rec['length']} != shape size {want}")
        if rec["offset"] != end:
            kind = "overlaps" if rec["offset"] < end else "leaves a gap before"
            raise LayoutError(f"{path}: {name} at offset {rec['offset']} {kind} byte {end}")
        end += rec["length"]
    if end != len(blob):
        raise LayoutError(f"{path}: records cover {end} bytes, blob has {len(blob)}")

    actual = crc64(blob)
    if actual != stored_crc:
        raise CrcMismatchError(
            f"{path}: blob CRC-64 {actual:016x} != stored {stored_crc:016x}")
    return CheckpointFile(path, version, tensors, len(blob)), blob


def inspect(path: str) -> CheckpointFile:
    """Validate and return the header without materializing arrays."""
    meta, _ = _parse(path)
    return meta


def load(path: str) -> dict[str, Parameter]:
    """Read a checkpoint back into named Parameters, bitwise and with
    trainable flags restored."""
    meta, blob = _parse(path)
    out = {}
    for name in sorted(meta.tensors):
        rec = meta.tensors[name]
        dt = _DTYPES[rec["dtype"]]
        arr = np.frombuffer(blob, dtype=dt, count=rec["length"] // dt.itemsize,
                            offset=rec["offset"]).reshape(rec["shape"]).copy()
        out[name] = Parameter(arr, name, trainable=rec["trainable"])
    return out
