"""FBGRID1 field dumps and CSV reports.

FBGRID1 layout: b"FBGRID1\\0", u8 dim, u64 dims[n], f64 h, f64 origin[n],
then the node values as row-major little-endian f64.
"""

import csv
import hashlib
import logging
import struct

import numpy as np

from .exceptions import FieldFormatError
from .grid import Grid, ScalarFieldGrid

MAGIC = b"FBGRID1\x00"


def dumps_field(u):
    grid = u.grid
    n = grid.dim
    header = MAGIC + struct.pack(f"<B{n}Qd{n}d", n, *grid.dims, grid.h, *grid.origin)
    return header + np.ascontiguousarray(u.values, dtype="<f8").tobytes(order="C")


def loads_field(data):
    """Parses FBGRID1 bytes.

    Raises:
        FieldFormatError: Wrong magic, unsupported dimension or truncated payload.
    """
    if data[: len(MAGIC)] != MAGIC:
        raise FieldFormatError("not an FBGRID1 file")
    offset = len(MAGIC)
    if len(data) < offset + 1:
        raise FieldFormatError("truncated header")
    n = data[offset]
    if n not in (1, 2, 3):
        raise FieldFormatError(f"unsupported dimension {n}")
    fmt = f"<B{n}Qd{n}d"
    size = struct.calcsize(fmt)
    if len(data) < offset + size:
        raise FieldFormatError("truncated header")
    values = struct.unpack_from(fmt, data, offset)
    dims = tuple(int(d) for d in values[1 : 1 + n])
    h = values[1 + n]
    origin = tuple(values[2 + n :])
    payload = data[offset + size :]
    expected = 8 * int(np.prod(dims))
    if len(payload) != expected:
        raise FieldFormatError(f"expected {expected} value bytes, found {len(payload)}")
    grid = Grid(dim=n, h=h, origin=origin, dims=dims)
    return ScalarFieldGrid(grid, np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims))


def write_field(path, u):
    data = dumps_field(u)
    with open(path, "wb") as out:
        out.write(data)
    logging.debug(f"Wrote {path} ({len(data)} bytes)")
    return sha256_of(path)


def read_field(path):
    with open(path, "rb") as src:
        return loads_field(src.read())


def write_csv(path, header, rows):
    with open(path, "w", newline="") as out:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])
    return sha256_of(path)


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    if hasattr(value, "value"):
        return value.value
    return value


def sha256_of(path):
    digest = hashlib.sha256()
    with open(path, "rb") as src:
        for chunk in iter(lambda: src.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
