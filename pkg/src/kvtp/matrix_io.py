"""Embedding matrix files.

Binary layout: two little-endian u64 (rows, cols) followed by row-major
little-endian float32 data. Files ending in ``.csv`` (or whose content is not
a valid binary matrix) are read as CSV, one row per line.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<QQ")


class MatrixFormatError(ValueError):
    pass


def write_matrix(path, matrix) -> None:
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    path = Path(path)
    if path.suffix.lower() == ".csv":
        np.savetxt(path, m, delimiter=",", fmt="%.9g")
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*m.shape))
        fh.write(m.astype("<f4").tobytes(order="C"))


def _parse_binary(raw: bytes) -> np.ndarray | None:
    if len(raw) < _HEADER.size:
        return None
    rows, cols = _HEADER.unpack_from(raw)
    if len(raw) != _HEADER.size + 4 * rows * cols:
        return None
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


def _parse_csv(text: str, source) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError as exc:
            raise MatrixFormatError(f"{source}:{lineno}: {exc}") from None
    if not rows:
        raise MatrixFormatError(f"{source}: no rows")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise MatrixFormatError(f"{source}: row {i} has {len(r)} columns, expected {width}")
    return np.array(rows, dtype=np.float64)


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() != ".csv":
        m = _parse_binary(raw)
        if m is not None:
            if not np.all(np.isfinite(m)):
                raise MatrixFormatError(f"{path}: non-finite entries")
            return m
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise MatrixFormatError(f"{path}: neither a binary matrix nor UTF-8 CSV") from None
    m = _parse_csv(text, path)
    if not np.all(np.isfinite(m)):
        raise MatrixFormatError(f"{path}: non-finite entries")
    return m


def parse_vector(text: str) -> np.ndarray:
    """Parse a comma-separated list of numbers such as ``"0,0,5,0"``."""
    try:
        v = np.array([float(t) for t in text.split(",") if t.strip()], dtype=np.float64)
    except ValueError as exc:
        raise MatrixFormatError(str(exc)) from None
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise MatrixFormatError(f"bad vector: {text!r}")
    return v
