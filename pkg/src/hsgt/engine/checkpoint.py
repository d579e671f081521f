"""Flat binary container for named float arrays.

Layout::

    HSGT-CKPT 1 <header_bytes>\\n
    <header: one line per array, "name<TAB>d0,d1,...<TAB>offset<TAB>nbytes">
    <payload: little-endian float64 blocks at the listed offsets>

Offsets are relative to the start of the payload. A scalar has an empty
shape field.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

from hsgt.errors import InputError

MAGIC = "HSGT-CKPT"
VERSION = 1


def save_arrays(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    lines = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if "\t" in name or "\n" in name:
            raise InputError(f"array name {name!r} contains a tab or newline")
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = ",".join(str(s) for s in np.shape(arr))
        lines.append(f"{name}\t{shape}\t{offset}\t{len(blob)}\n")
        blobs.append(blob)
        offset += len(blob)
    header = "".join(lines).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION} {len(header)}\n".encode("ascii"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", errors="replace").split()
        if len(first) != 3 or first[0] != MAGIC:
            raise InputError(f"{path}: not an HSGT checkpoint")
        if int(first[1]) != VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {first[1]}")
        header = fh.read(int(first[2])).decode("utf-8")
        payload = fh.read()
    arrays = {}
    for lineno, line in enumerate(header.splitlines(), start=2):
        try:
            name, shape_text, offset, nbytes = line.split("\t")
            shape = tuple(int(s) for s in shape_text.split(",")) if shape_text else ()
            offset, nbytes = int(offset), int(nbytes)
        except ValueError as exc:
            raise InputError(f"{path}: malformed header line {lineno}: {line!r}") from exc
        if offset + nbytes > len(payload):
            raise InputError(f"{path}: array {name!r} runs past end of file")
        data = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset)
        arrays[name] = data.reshape(shape).astype(np.float64)
    return arrays
