"""Atomic file writes and the small text formats used for results."""

import csv
import io
import os
import tempfile

import numpy as np

from .errors import FormatError


def atomic_write(path, data):
    """Write bytes or text via a temporary file and rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    atomic_write(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def write_pgm(path, values):
    """Plain (P2) graymap, min-max scaled to 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros(v.shape, dtype=int) if hi == lo else np.rint(255 * (v - lo) / (hi - lo)).astype(int)
    lines = ["P2", f"{v.shape[1]} {v.shape[0]}", "255"]
    lines += [" ".join(str(x) for x in row) for row in scaled]
    atomic_write(path, "\n".join(lines) + "\n")


def read_pgm(path):
    with open(path) as f:
        tokens = f.read().split()
    if not tokens or tokens[0] != "P2":
        raise FormatError("not a plain (P2) graymap", 0)
    w, h = int(tokens[1]), int(tokens[2])
    if len(tokens) - 4 != w * h:
        raise FormatError(f"{w}x{h} graymap holds {len(tokens) - 4} values")
    return np.array(tokens[4:], dtype=int).reshape(h, w)
