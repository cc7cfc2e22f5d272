"""ETK1 binary container.

Layout (all integers little-endian)::

    b"ETK1"  u16 version  u32 n_sections
    n_sections x ( 4-byte ASCII tag | u64 payload length | payload )

Tags:

* ``META`` -- UTF-8 JSON object with sorted keys. Always the first section and
  always carries ``"kind"`` (``trajectory``, ``signal``, ``pc-bundle``,
  ``lambda-profile``).
* ``ARRY`` -- one named float64 array: ``u16 name length | name | u8 ndim |
  ndim x u64 shape | little-endian float64 data (C order)``.

Floats in META are written by ``json`` with ``repr`` precision, so every
payload round-trips bit for bit.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ETK1"
VERSION = 1


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def _unpack_array(payload: bytes) -> tuple[str, np.ndarray]:
    try:
        (name_len,) = struct.unpack_from("<H", payload, 0)
        pos = 2
        name = payload[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
        pos += 8 * ndim
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt array section header: {exc}") from exc
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = payload[pos:]
    if len(data) != 8 * count:
        raise FormatError(f"array {name!r}: expected {8 * count} payload bytes, found {len(data)}")
    return name, np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)


def dumps(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if "kind" not in meta:
        raise ValueError("container metadata needs a 'kind'")
    sections = [(b"META", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8"))]
    sections += [(b"ARRY", _pack_array(name, arr)) for name, arr in arrays.items()]
    out = [MAGIC, struct.pack("<HI", VERSION, len(sections))]
    for tag, payload in sections:
        out.append(tag + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:4] != MAGIC:
        raise FormatError("not an ETK1 container (bad magic)")
    try:
        version, n_sections = struct.unpack_from("<HI", blob, 4)
    except struct.error as exc:
        raise FormatError("truncated ETK1 header") from exc
    if version != VERSION:
        raise FormatError(f"unsupported ETK1 version {version}")
    pos = 10
    meta = None
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        if pos + 12 > len(blob):
            raise FormatError("truncated section header")
        tag = blob[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", blob, pos + 4)
        pos += 12
        payload = blob[pos:pos + length]
        if len(payload) != length:
            raise FormatError(f"truncated {tag!r} section")
        pos += length
        if tag == b"META":
            meta = json.loads(payload.decode("utf-8"))
        elif tag == b"ARRY":
            name, arr = _unpack_array(payload)
            arrays[name] = arr
        else:
            raise FormatError(f"unknown section tag {tag!r}")
    if pos != len(blob):
        raise FormatError("trailing bytes after last section")
    if meta is None or "kind" not in meta:
        raise FormatError("container has no META section")
    return meta, arrays


def write(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(meta, arrays))


def read(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    meta, arrays = loads(Path(path).read_bytes())
    if kind is not None and meta["kind"] != kind:
        raise FormatError(f"{path}: expected a {kind!r} container, found {meta['kind']!r}")
    return meta, arrays


def write_signal(path, x: np.ndarray, **meta) -> None:
    write(path, {"kind": "signal", **meta}, {"x": np.asarray(x, dtype=np.float64)})


def read_signal(path) -> np.ndarray:
    _, arrays = read(path, "signal")
    return arrays["x"]
