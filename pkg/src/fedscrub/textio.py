"""Plain-text matrix and manifest files shared by all checkpoint formats."""

from __future__ import annotations

from pathlib import Path

import numpy as np

# 9 significant digits: round-trips float32-scale training state closely enough
# while keeping checkpoints diffable.
FLOAT_FMT = ".9g"


def write_matrix(path, mat) -> None:
    """One matrix row per line, space-separated values."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    with open(path, "w", encoding="utf-8") as fh:
        for row in mat:
            fh.write(" ".join(format(v, FLOAT_FMT) for v in row))
            fh.write("\n")


def read_matrix(path, cols: int | None = None) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split()])
    if not rows:
        return np.zeros((0, cols if cols else 0), dtype=float)
    out = np.asarray(rows, dtype=float)
    if cols is not None and out.shape[1] != cols:
        raise ValueError(f"{path}: expected {cols} columns, found {out.shape[1]}")
    return out


def write_ints(path, values) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for v in values:
            fh.write(f"{int(v)}\n")


def read_ints(path) -> np.ndarray:
    vals = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                vals.append(int(line))
    return np.asarray(vals, dtype=int)


def write_manifest(path, entries: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, val in entries.items():
            fh.write(f"{key}={val}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: bad manifest line {line!r}")
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
