"""Single-file container for numpy arrays plus JSON metadata.

Layout: magic bytes, a fixed-width header length, a JSON header holding
user metadata and an array directory, the raw array payloads
(little-endian, C order), and a trailing SHA-256 over everything before
it. Writes are bit-for-bit deterministic for equal inputs, so artifact
checksums are reproducible across runs.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorpusFormatError

MAGIC = b"CGB1"
FORMAT_VERSION = 1

_DTYPES = {"<f8", "<i8"}


def _canonical_dtype(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return "<f8"
    if arr.dtype.kind in ("i", "u", "b"):
        return "<i8"
    raise CorpusFormatError(f"unsupported dtype {arr.dtype}")


def write_bundle(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write `arrays` and JSON-serializable `meta` to `path`.

    meta must contain a "format" key naming the payload kind.
    """
    if "format" not in meta:
        raise CorpusFormatError("bundle meta requires a 'format' key")
    directory = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = _canonical_dtype(arr)
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        directory.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = {
        "bundle_version": FORMAT_VERSION,
        "meta": meta,
        "arrays": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + bytes(payload)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(body + digest)


def read_bundle(
    path: str | Path, expect_format: str | None = None
) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a bundle back; returns (meta, arrays).

    Verifies magic, version, and the integrity checksum. Raises
    CorpusFormatError on any structural problem, including truncation.
    """
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CorpusFormatError(f"cannot read {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4 + 32:
        raise CorpusFormatError(f"{path}: file too short")
    if blob[: len(MAGIC)] != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorpusFormatError(f"{path}: checksum mismatch (corrupt or truncated)")
    (header_len,) = struct.unpack_from("<I", body, len(MAGIC))
    header_start = len(MAGIC) + 4
    header_end = header_start + header_len
    if header_end > len(body):
        raise CorpusFormatError(f"{path}: truncated header")
    try:
        header = json.loads(body[header_start:header_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"{path}: unparsable header: {exc}") from exc
    if header.get("bundle_version") != FORMAT_VERSION:
        raise CorpusFormatError(
            f"{path}: bundle version {header.get('bundle_version')} "
            f"(expected {FORMAT_VERSION})"
        )
    meta = header.get("meta", {})
    if expect_format is not None and meta.get("format") != expect_format:
        raise CorpusFormatError(
            f"{path}: format {meta.get('format')!r}, expected {expect_format!r}"
        )
    payload = body[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for entry in header.get("arrays", []):
        if entry["dtype"] not in _DTYPES:
            raise CorpusFormatError(f"{path}: unknown dtype {entry['dtype']}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CorpusFormatError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(
            payload, dtype=np.dtype(entry["dtype"]), count=nbytes // 8, offset=start
        ).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()  # detach from the file buffer
    return meta, arrays


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
