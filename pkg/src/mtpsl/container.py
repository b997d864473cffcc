"""Binary container: JSON header + concatenated raw little-endian arrays.

Both the dataset file and the model checkpoint use this layout:

    magic (4 bytes) | version (u32 LE) | header length (u64 LE)
    | header JSON (utf-8) | payload

The header declares every array (name, dtype as a numpy typestr, shape)
in payload order plus a sha256 of the payload, so a reader can verify
integrity before touching any bytes. Identical inputs produce identical
files: the header is dumped with sorted keys and there are no timestamps.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import DatasetFormatError

FORMAT_VERSION = 1

_PREFIX = struct.Struct("<4sIQ")


def _typestr(arr: np.ndarray) -> str:
    # force explicit little-endian typestrs ("<f4", "<i2", ...)
    return arr.dtype.newbyteorder("<").str


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write `arrays` (in dict order) with `meta` merged into the header."""
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    payload = b"".join(
        np.ascontiguousarray(a).astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        for a in arrays.values()
    )
    header = dict(meta)
    header["arrays"] = [
        {"name": name, "dtype": _typestr(a), "shape": list(a.shape)}
        for name, a in arrays.items()
    ]
    header["payload_bytes"] = len(payload)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Read and verify a container, returning (header, arrays by name)."""
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise DatasetFormatError(f"{path}: truncated prefix")
        got_magic, version, header_len = _PREFIX.unpack(prefix)
        if got_magic != magic:
            raise DatasetFormatError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
        if version != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: version {version}, reader supports {FORMAT_VERSION}")
        blob = fh.read(header_len)
        if len(blob) < header_len:
            raise DatasetFormatError(f"{path}: truncated header")
        header = json.loads(blob.decode("utf-8"))
        payload = fh.read()
    expected = header.get("payload_bytes")
    if expected is None or len(payload) != expected:
        raise DatasetFormatError(f"{path}: payload is {len(payload)} bytes, header declares {expected}")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise DatasetFormatError(f"{path}: payload checksum mismatch")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        chunk = payload[offset:offset + nbytes]
        if len(chunk) < nbytes:
            raise DatasetFormatError(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(payload):
        raise DatasetFormatError(f"{path}: {len(payload) - offset} undeclared trailing bytes")
    return header, arrays
