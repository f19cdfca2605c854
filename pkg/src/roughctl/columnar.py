"""Plain-text columnar files: one JSON header line, a CSV column line, numeric rows.

Floats are written with 17 significant digits so every float64 round-trips
exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

FLOAT_FMT = "%.17g"


def fmt(x) -> str:
    return FLOAT_FMT % x


def write_columnar(path, header: dict, columns, rows) -> Path:
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != len(columns):
        raise InvalidArgumentError(f"{rows.shape[1]} row entries for {len(columns)} columns")
    path = Path(path)
    with path.open("w", newline="\n") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")
    return path


def read_columnar(path):
    """Return ``(header, columns, rows)``."""
    with Path(path).open() as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise InvalidArgumentError(f"{path}: missing header line")
        header = json.loads(first[2:])
        columns = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.split(",")] for line in fh if line.strip()]
    return header, columns, np.array(rows, dtype=float).reshape(len(rows), len(columns))


def save_rough_path(path, eta) -> Path:
    d = eta.dim
    cols = ["t"] + [f"inc_{i}" for i in range(d)] + [f"area_{i}{j}" for i in range(d) for j in range(d)]
    rows = np.column_stack([eta.grid.times[:-1], eta.inc, eta.area.reshape(eta.n, d * d)])
    header = {"kind": "rough_path", "d": d, "n": eta.n, "T": eta.grid.T}
    return write_columnar(path, header, cols, rows)


def load_rough_path(path):
    from .rough_path import GridRoughPath, TimeGrid

    header, _, rows = read_columnar(path)
    if header.get("kind") != "rough_path":
        raise InvalidArgumentError(f"{path}: not a rough path file")
    d, n = header["d"], header["n"]
    times = np.append(rows[:, 0], header["T"])
    return GridRoughPath(TimeGrid(times), rows[:, 1:1 + d], rows[:, 1 + d:].reshape(n, d, d))
