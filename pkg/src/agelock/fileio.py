"""Shared container for ``.mask`` and ``.ckpt`` files.

Layout::

    <magic line>\\n
    <one-line JSON header>\\n
    <payload: little-endian float32, row-major>

The header declares every array shape, so the payload length is known before
reading it and truncation is always detected.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatVersionError

_F32 = np.dtype("<f4")


def write_container(path, magic: bytes, header: dict, arrays) -> None:
    path = Path(path)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(blob + b"\n")
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes(order="C"))
    os.replace(tmp, path)


def read_container(path, magic: bytes, version: int) -> tuple[dict, bytes]:
    """Return ``(header, payload)`` after validating magic and version."""
    data = Path(path).read_bytes()
    first = data.find(b"\n")
    if first < 0 or data[:first] != magic:
        raise CorruptFileError(f"{path}: missing {magic.decode()} magic line")
    second = data.find(b"\n", first + 1)
    if second < 0:
        raise CorruptFileError(f"{path}: header line is not terminated")
    try:
        header = json.loads(data[first + 1:second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise CorruptFileError(f"{path}: header is not an object")
    if header.get("version") != version:
        raise FormatVersionError(
            f"{path}: format version {header.get('version')!r}, this build reads {version}")
    return header, data[second + 1:]


def split_payload(path, payload: bytes, shapes) -> list[np.ndarray]:
    """Cut a float32 payload into arrays of the declared shapes."""
    sizes = [int(np.prod(s)) for s in shapes]
    expected = sum(sizes) * _F32.itemsize
    if len(payload) != expected:
        kind = "truncated" if len(payload) < expected else "has trailing bytes"
        raise CorruptFileError(f"{path}: payload {kind} ({len(payload)} bytes, expected {expected})")
    flat = np.frombuffer(payload, dtype=_F32)
    out, offset = [], 0
    for shape, size in zip(shapes, sizes):
        out.append(flat[offset:offset + size].reshape(shape).astype(np.float32))
        offset += size
    return out
