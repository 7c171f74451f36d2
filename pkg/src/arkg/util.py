"""Shared helpers: seeded RNG substreams and content hashing."""

import hashlib

import numpy as np


def substream(seed, *names):
    """Derive an independent, reproducible RNG from a root seed and a name path.

    Every source of randomness in the package draws from a named substream so
    that stages can be re-run (or run in parallel) without perturbing each
    other's draws.
    """
    tag = "%d|%s" % (int(seed), "|".join(str(n) for n in names))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def stable_id_hash(s):
    """64-bit run-independent hash of a string (for binary sidecar keys)."""
    return int.from_bytes(hashlib.sha256(s.encode("utf-8")).digest()[:8], "little")


def array_hash(*arrays):
    """SHA-256 over dtype, shape and raw bytes of one or more arrays."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
