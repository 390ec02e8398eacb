"""Shared binary file helpers: magic line + JSON header + raw array payload.

Every binary artifact in this package (model checkpoints, training
checkpoints, fitted latents, volume payloads) uses the same envelope:

    <MAGIC> <version>\n          ascii magic word and integer version
    <header JSON>\n              one line, utf-8
    <payload>                    concatenated arrays, little-endian

The header carries an ``arrays`` list of [name, shape, dtype] entries in
payload order, so readers can validate byte counts before touching the
payload. Round-trips are bit-exact: arrays are written as little-endian
raw bytes and read back with the recorded dtype and shape.
"""

from __future__ import annotations

import json
from typing import BinaryIO

import numpy as np

from .errors import FormatVersionError, PayloadError

_LE_DTYPES = {"float64": "<f8", "float32": "<f4", "uint8": "|u1", "int64": "<i8"}


def _le_dtype(name: str) -> np.dtype:
    if name not in _LE_DTYPES:
        raise PayloadError(f"unsupported array dtype {name!r} in header")
    return np.dtype(_LE_DTYPES[name])


def array_entries(arrays: dict[str, np.ndarray]) -> list[list]:
    """Header ``arrays`` entries ([name, shape, dtype]) in dict order."""
    out = []
    for name, arr in arrays.items():
        if arr.dtype.name not in _LE_DTYPES:
            raise PayloadError(f"array {name!r} has unsupported dtype {arr.dtype.name}")
        out.append([name, list(arr.shape), arr.dtype.name])
    return out


def write_blob(f: BinaryIO, magic: str, version: int, header: dict,
               arrays: dict[str, np.ndarray]) -> None:
    """Write the envelope. ``header`` must not already contain 'arrays'."""
    full = dict(header)
    full["arrays"] = array_entries(arrays)
    f.write(f"{magic} {version}\n".encode("ascii"))
    f.write(json.dumps(full, sort_keys=True).encode("utf-8"))
    f.write(b"\n")
    for name, _, dtype_name in full["arrays"]:
        f.write(np.ascontiguousarray(arrays[name], dtype=_le_dtype(dtype_name)).tobytes())


def read_blob(f: BinaryIO, magic: str, max_version: int) -> tuple[int, dict, dict[str, np.ndarray]]:
    """Read and validate an envelope; returns (version, header, arrays)."""
    first = f.readline().decode("ascii", errors="replace").rstrip("\n")
    parts = first.split(" ")
    if len(parts) != 2 or parts[0] != magic or not parts[1].isdigit():
        raise PayloadError(f"bad magic line {first!r}, expected {magic!r} + version")
    version = int(parts[1])
    if version > max_version:
        raise FormatVersionError(f"{magic} version {version} is newer than supported {max_version}")
    try:
        header = json.loads(f.readline().decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise PayloadError(f"unreadable header: {exc}") from exc
    if "arrays" not in header:
        raise PayloadError("header missing 'arrays' table")
    arrays: dict[str, np.ndarray] = {}
    for name, shape, dtype_name in header["arrays"]:
        dt = _le_dtype(dtype_name)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = f.read(count * dt.itemsize)
        if len(raw) != count * dt.itemsize:
            raise PayloadError(f"array {name!r}: payload truncated "
                               f"({len(raw)} of {count * dt.itemsize} bytes)")
        arrays[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    trailing = f.read(1)
    if trailing:
        raise PayloadError("trailing bytes after declared payload")
    return version, header, arrays
