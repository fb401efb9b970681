"""Small persistence helpers: dims-prefixed binary arrays, atomic writes."""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"MFAR"


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path):
    with open(path, "r") as fh:
        return json.load(fh)


def write_array(path, arr) -> None:
    """Little-endian float64, row-major, after a ``MFAR | ndim | dims`` header."""
    a = np.ascontiguousarray(arr, dtype="<f8")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    atomic_write_bytes(path, header + a.tobytes(order="C"))


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a morphofit array file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    shape = struct.unpack_from(f"<{ndim}Q", data, 8)
    offset = 8 + 8 * ndim
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    return arr.reshape(shape).astype(np.float64)
