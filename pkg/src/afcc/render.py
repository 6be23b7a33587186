"""Matrix export: CSV tables and four-colour binary PPM images."""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np

from .io import atomic_write_bytes
from .metrics import ClippedMatrix, FieldMatrix, FilterProfile

BLACK = (0, 0, 0)
WHITE = (255, 255, 255)  # cluster cell
YELLOW = (255, 255, 0)  # above-threshold cell outside every cluster
GREEN = (0, 160, 0)  # normalised value <= -th


def cell_colours(clipped: ClippedMatrix, profile: FilterProfile) -> np.ndarray:
    """(L, L, 3) uint8 image, one pixel per cell."""
    n = clipped.bits.shape[0]
    img = np.zeros((n, n, 3), dtype=np.uint8)
    block = np.zeros((n, n), dtype=bool)
    for cl in profile.clusters:
        block[np.ix_(cl, cl)] = True
    img[clipped.negative_extreme] = GREEN
    img[clipped.bits & ~block] = YELLOW
    img[clipped.bits & block] = WHITE
    return img


def ppm_bytes(img: np.ndarray, scale: int = 1) -> bytes:
    """Binary P6 pixel map; each cell becomes a ``scale`` x ``scale`` square."""
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    magic, dims, maxval, rest = data.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError("not an 8-bit binary P6 image")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_matrix_image(path, clipped: ClippedMatrix, profile: FilterProfile, scale: int = 4, permuted: bool = False) -> Path:
    """Render a clipped matrix; with ``permuted`` the clusters are moved onto contiguous diagonal blocks first."""
    img = cell_colours(clipped, profile)
    if permuted:
        members = [l for c in profile.clusters for l in c]
        rest = [l for l in range(img.shape[0]) if l not in set(members)]
        perm = np.array(members + rest, dtype=np.int64)
        img = img[np.ix_(perm, perm)]
    return atomic_write_bytes(path, ppm_bytes(img, scale))


def matrix_csv(matrix: FieldMatrix | ClippedMatrix | np.ndarray) -> str:
    if isinstance(matrix, FieldMatrix):
        vals = matrix.values
    elif isinstance(matrix, ClippedMatrix):
        vals = matrix.bits.astype(np.int64)
    else:
        vals = np.asarray(matrix)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in vals:
        w.writerow([repr(float(v)) if vals.dtype.kind == "f" else int(v) for v in row])
    return buf.getvalue()


def write_matrix_csv(path, matrix) -> Path:
    return atomic_write_bytes(path, matrix_csv(matrix).encode())


def rows_csv(rows: list[dict], columns) -> str:
    buf = _io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return v
