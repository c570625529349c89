"""Binary tensor records and tagged checkpoint files.

Tensor record: ``u32 rank``, ``rank x u32 dims``, then ``prod(dims)`` float64,
all little-endian, row-major.

Checkpoint: magic ``TPFC``, ``u32 version``, ``u32 n_sections``; each section
is ``u32 len + utf8 tag``, ``u32 n_entries``, and per entry ``u32 len + utf8
name`` followed by one tensor record.  Entries are written in sorted name
order so equal states produce equal bytes.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping

import numpy as np

MAGIC = b"TPFC"
VERSION = 1


def write_tensor(fh: BinaryIO, arr) -> None:
    arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    fh.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
    n = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 8 * n), dtype="<f8").astype(np.float64)
    return data.reshape(shape)


def tensor_to_bytes(arr) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    return read_tensor(io.BytesIO(raw))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise EOFError(f"truncated record: wanted {n} bytes, got {len(raw)}")
    return raw


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n).decode("utf-8")


def save_checkpoint(path, sections: Mapping[str, Mapping[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(sections)))
        for tag in sorted(sections):
            entries = sections[tag]
            _write_str(fh, tag)
            fh.write(struct.pack("<I", len(entries)))
            for name in sorted(entries):
                _write_str(fh, name)
                write_tensor(fh, entries[name])


def load_checkpoint(path) -> Dict[str, Dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_sections = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        out: Dict[str, Dict[str, np.ndarray]] = {}
        for _ in range(n_sections):
            tag = _read_str(fh)
            (n,) = struct.unpack("<I", _read_exact(fh, 4))
            out[tag] = {}
            for _ in range(n):
                name = _read_str(fh)
                out[tag][name] = read_tensor(fh)
    return out


def save_arrays(path, arrays) -> None:
    """Write a bare sequence of tensor records (feature dumps)."""
    with open(Path(path), "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_arrays(path) -> list:
    out = []
    with open(Path(path), "rb") as fh:
        while True:
            head = fh.peek(1)[:1] if hasattr(fh, "peek") else b""
            if not head:
                break
            out.append(read_tensor(fh))
    return out
