"""On-disk run artifacts: parameter binary, coupling matrices and the run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import subprocess
from pathlib import Path

import numpy as np

from .errors import ArtifactNotFound, ParseError

MAGIC = b"SCOT1"


def write_params(blocks, path):
    """Write named float64 arrays as little-endian binary.

    Layout: magic, u32 block count, then per block u16 name length, name,
    u8 ndim and u32 dims; all data follows the header in block order.
    """
    header = bytearray(MAGIC)
    header += struct.pack("<I", len(blocks))
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        header += struct.pack("<H", len(raw)) + raw
        header += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with Path(path).open("wb") as fh:
        fh.write(bytes(header))
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_params(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFound(f"missing parameter file {path}")
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise ParseError(path, 1, f"bad magic {data[:len(MAGIC)]!r}, expected {MAGIC!r}")
    try:
        pos = len(MAGIC)
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        specs = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            specs.append((name, shape))
        blocks = {}
        for name, shape in specs:
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            blocks[name] = arr.astype(float)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise ParseError(path, 1, f"truncated or corrupt parameter file ({exc})") from None
    if pos != len(data):
        raise ParseError(path, 1, f"{len(data) - pos} trailing bytes after parameter data")
    return blocks


def write_matrix(M, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(M, dtype=float):
            w.writerow([format(x, ".17g") for x in row])


def read_matrix(path):
    path = Path(path)
    if not path.exists():
        raise ArtifactNotFound(f"missing matrix file {path}")
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                raise ParseError(path, lineno, f"non-numeric entry in {row}") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(path, lineno, f"expected {len(rows[0])} columns, got {len(rows[-1])}")
    if not rows:
        raise ParseError(path, 1, "empty matrix file")
    return np.array(rows)


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def content_hash(payload):
    """SHA-256 of a JSON-serializable payload with sorted keys."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def file_hash(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(manifest, path):
    with Path(path).open("w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.exists():
        raise ArtifactNotFound(f"missing {path}; expected a run directory written by `scot train` "
                               "(manifest.json, record.csv, params.bin, coupling CSVs)")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.msg) from None
