"""Deterministic binary bundle for named float64 tensors (magic ``ARTB``).

Used internally to persist model parameters (classifier heads, encoder
weights) between pipeline stages; unlike zip-based formats the byte output
depends only on the payload.
"""

import struct

import numpy as np

_MAGIC = b"ARTB"
_VERSION = 1


def save_tensors(path, tensors):
    """Write an ordered {name: ndarray} mapping."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path):
    out = {}
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not an ARTB bundle: %s" % path)
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError("unsupported ARTB version %d" % version)
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack("<%dQ" % ndim, f.read(8 * ndim)) if ndim else ()
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * size), dtype="<f8")
            out[name] = data.reshape(shape).astype(np.float64)
    return out
