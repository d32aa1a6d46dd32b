"""Versioned, checksummed newline-delimited record files.

Layout::

    {"format": "primil-records", "version": 1, "kind": "...", ...header fields}
    {...record 0...}
    {...record n-1...}
    {"count": n, "sha256": "<hex digest of every byte above this line>"}

Floats go through ``repr`` so round-trips are bit-exact. Numpy arrays are
stored as base64 of their little-endian float64 bytes (see
:func:`encode_array`).
"""

from __future__ import annotations

import base64
import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT = "primil-records"
VERSION = 1


class VersionMismatch(RuntimeError):
    pass


class CorruptFile(RuntimeError):
    pass


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["b64"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=True)


def write_records(path, kind: str, records, **header) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h = hashlib.sha256()
    lines = [_dumps({"format": FORMAT, "version": VERSION, "kind": kind, **header})]
    lines += [_dumps(r) for r in records]
    body = "".join(line + "\n" for line in lines).encode("utf-8")
    h.update(body)
    trailer = _dumps({"count": len(lines) - 1, "sha256": h.hexdigest()}) + "\n"
    path.write_bytes(body + trailer.encode("utf-8"))
    return path


def read_records(path, kind: str | None = None) -> tuple[dict, list]:
    """Return ``(header, records)``; raise on any integrity problem."""
    data = Path(path).read_bytes()
    if not data.endswith(b"\n"):
        raise CorruptFile(f"{path}: truncated (no final newline)")
    cut = data.rfind(b"\n", 0, len(data) - 1) + 1
    body, trailer_raw = data[:cut], data[cut:]
    try:
        trailer = json.loads(trailer_raw)
        expected = trailer["sha256"]
    except (ValueError, KeyError, TypeError):
        raise CorruptFile(f"{path}: missing checksum trailer") from None
    if hashlib.sha256(body).hexdigest() != expected:
        raise CorruptFile(f"{path}: checksum mismatch")
    lines = body.decode("utf-8").splitlines()
    if not lines:
        raise CorruptFile(f"{path}: no header")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT:
        raise CorruptFile(f"{path}: not a {FORMAT} file")
    if header.get("version") != VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('version')} (expected {VERSION})")
    if kind is not None and header.get("kind") != kind:
        raise CorruptFile(f"{path}: holds {header.get('kind')!r} records, expected {kind!r}")
    records = [json.loads(line) for line in lines[1:]]
    if len(records) != trailer.get("count"):
        raise CorruptFile(f"{path}: record count mismatch")
    return header, records


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
