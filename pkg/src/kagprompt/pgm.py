"""ASCII PGM (P2) writer/reader for heatmaps, images and masks."""
from __future__ import annotations

import numpy as np

__all__ = ["quantize", "write_pgm", "read_pgm", "render_pgm"]

MAXVAL = 255


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255, rounding halves away from zero."""
    v = np.asarray(values, dtype=np.float64)
    if v.size and (not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0):
        raise ValueError("PGM values must lie in [0, 1]")
    scaled = v * MAXVAL
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)


def write_pgm(values: np.ndarray, path: str) -> None:
    q = quantize(values)
    if q.ndim != 2:
        raise ValueError(f"PGM maps must be 2-D, got shape {q.shape}")
    H, W = q.shape
    lines = ["P2", f"{W} {H}", str(MAXVAL)]
    lines += [" ".join(str(int(v)) for v in row) for row in q]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


render_pgm = write_pgm


def read_pgm(path: str) -> np.ndarray:
    """Read a P2 file back as floats in [0, 1]."""
    with open(path, encoding="ascii") as fh:
        tokens = [t for line in fh for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM (P2) file")
    W, H, maxval = (int(t) for t in tokens[1:4])
    vals = np.array([int(t) for t in tokens[4:]], dtype=np.float64)
    if vals.size != W * H:
        raise ValueError(f"{path}: expected {W * H} pixels, found {vals.size}")
    return vals.reshape(H, W) / maxval
