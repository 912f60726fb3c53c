"""Versioned line-delimited record files.

One JSON object per line, preceded by a header line carrying the kind, the
format version, free-form metadata, the record count and a CRC32 checksum of
the record block.  Floats go through Python's shortest round-trip repr, so a
save/load cycle is bit-exact and the files stay diff-able.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

FORMAT_VERSION = 1


class RecordFormatError(ValueError):
    """Malformed, truncated or version-incompatible record file."""


def dump_records(path, kind: str, meta: dict, records: list[dict]) -> None:
    lines = [json.dumps(rec, separators=(",", ":"), allow_nan=False)
             for rec in records]
    body = "\n".join(lines)
    checksum = f"{zlib.crc32(body.encode('utf-8')):08x}"
    header = json.dumps({
        "kind": kind,
        "version": FORMAT_VERSION,
        "n_records": len(records),
        "checksum": checksum,
        "meta": meta,
    }, separators=(",", ":"), allow_nan=False)
    Path(path).write_text(header + "\n" + body + ("\n" if lines else ""),
                          encoding="utf-8")


def load_records(path, expect_kind: str) -> tuple[dict, list[dict]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines:
        raise RecordFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"{path}: unreadable header: {exc}") from exc
    if header.get("kind") != expect_kind:
        raise RecordFormatError(
            f"{path}: expected kind {expect_kind!r}, found {header.get('kind')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise RecordFormatError(
            f"{path}: format version {header.get('version')} is not supported "
            f"(this build reads version {FORMAT_VERSION})")
    body = lines[1:]
    n_expected = header["n_records"]
    if len(body) < n_expected:
        raise RecordFormatError(
            f"{path}: truncated at record {len(body)} of {n_expected}")
    if len(body) > n_expected:
        raise RecordFormatError(
            f"{path}: {len(body)} records found but header declares {n_expected}")
    joined = "\n".join(body)
    checksum = f"{zlib.crc32(joined.encode('utf-8')):08x}"
    if checksum != header["checksum"]:
        raise RecordFormatError(f"{path}: checksum mismatch (file corrupted)")
    records = []
    for i, line in enumerate(body):
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise RecordFormatError(f"{path}: malformed record {i}: {exc}") from exc
    return header["meta"], records
