"""Backbone feature files: ``image_path,f0,...,fN`` CSV or a compact binary."""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"CXFV"
_HEADER = struct.Struct("<4sII")  # magic, n_rows, dim


def write_features(path, paths, X) -> None:
    X = np.asarray(X, dtype=np.float64)
    path = Path(path)
    if path.suffix.lower() == ".csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_path", *(f"f{i}" for i in range(X.shape[1]))])
        for p, row in zip(paths, X):
            w.writerow([p, *(repr(float(v)) for v in row)])
        path.write_text(buf.getvalue(), encoding="utf-8")
        return
    parts = [_HEADER.pack(_MAGIC, X.shape[0], X.shape[1])]
    for p, row in zip(paths, X):
        b = p.encode("utf-8")
        parts.append(struct.pack("<H", len(b)) + b + row.astype("<f8").tobytes())
    path.write_bytes(b"".join(parts))


def read_features(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        reader = csv.reader(io.StringIO(path.read_text(encoding="utf-8")))
        header = next(reader)
        if not header or header[0].strip() != "image_path":
            raise ValueError(f"{path}: first column must be image_path")
        paths, rows = [], []
        for row in reader:
            if not row:
                continue
            paths.append(row[0].strip())
            rows.append([float(v) for v in row[1:]])
        return paths, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    buf = path.read_bytes()
    magic, n, dim = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a feature file")
    off = _HEADER.size
    paths = []
    X = np.empty((n, dim))
    for i in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        paths.append(buf[off : off + ln].decode("utf-8"))
        off += ln
        X[i] = np.frombuffer(buf, dtype="<f8", count=dim, offset=off)
        off += 8 * dim
    return paths, X
