"""Binary dense-matrix layout shared by residuals, coexpression estimates and
graph features.

File layout::

    8 bytes   little-endian uint64: length L of the JSON header
    L bytes   UTF-8 JSON {"rows": int, "cols": int, "names": [...], ...extra}
    rows*cols little-endian float64 values, row-major
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Sequence

import numpy as np


def write_matrix(path: str | os.PathLike, values: np.ndarray, names: Sequence[str] = (), **extra) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError("matrix must be 2-D")
    header = {"rows": int(values.shape[0]), "cols": int(values.shape[1]), "names": list(names)}
    header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(values.tobytes(order="C"))


def read_matrix(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    data = Path(path).read_bytes()
    (length,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + length].decode("utf-8"))
    rows, cols = header["rows"], header["cols"]
    body = data[8 + length:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"{path}: expected {rows * cols} values, found {len(body) // 8}")
    values = np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return values, header
