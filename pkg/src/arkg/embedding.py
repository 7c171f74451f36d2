"""Embedding tables keyed by node id, with TSV and binary snapshots.

The binary snapshot (magic ``AREM``) stores float32 rows only; row order
is the table's id order, so sparse tables need their id list carried by a
sidecar (see TwoLevelTable) while graph tables use dense 0..n-1 ids.
"""

import struct

import numpy as np

from .util import array_hash


class EmbeddingTable:
    """Fixed-dimension float32 vectors keyed by sorted int64 ids."""

    def __init__(self, ids, vectors):
        ids = np.asarray(ids, dtype=np.int64)
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or len(ids) != len(vectors):
            raise ValueError("ids and vectors disagree")
        order = np.argsort(ids, kind="stable")
        ids = ids[order]
        if len(ids) > 1 and (np.diff(ids) == 0).any():
            raise ValueError("duplicate ids in embedding table")
        self.ids = ids
        self.vectors = np.ascontiguousarray(vectors[order])
        self.ids.setflags(write=False)
        self.vectors.setflags(write=False)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table contains non-finite vectors")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, node_id):
        i = np.searchsorted(self.ids, node_id)
        return i < len(self.ids) and self.ids[i] == node_id

    def row_of(self, node_id):
        i = np.searchsorted(self.ids, node_id)
        if i >= len(self.ids) or self.ids[i] != node_id:
            raise KeyError("no embedding for node %r" % (node_id,))
        return int(i)

    def lookup(self, node_id):
        return self.vectors[self.row_of(node_id)]

    def is_dense(self):
        return len(self.ids) == 0 or (
            self.ids[0] == 0 and self.ids[-1] == len(self.ids) - 1
        )

    def hash(self):
        return array_hash(self.ids, self.vectors)


_MAGIC = b"AREM"
_VERSION = 1


def save_arem(path, vectors):
    vectors = np.asarray(vectors, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IIQ", _VERSION, vectors.shape[1], vectors.shape[0]))
        f.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def load_arem(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ValueError("not an AREM snapshot: %s" % path)
        version, dim, count = struct.unpack("<IIQ", f.read(16))
        if version != _VERSION:
            raise ValueError("unsupported AREM version %d" % version)
        data = np.frombuffer(f.read(4 * dim * count), dtype="<f4")
        return data.reshape(count, dim).astype(np.float32)


def save_table(table, path):
    """Write a dense-id table's rows as an AREM snapshot."""
    save_arem(path, table.vectors)


def load_table(path, ids=None):
    vectors = load_arem(path)
    if ids is None:
        ids = np.arange(len(vectors), dtype=np.int64)
    return EmbeddingTable(ids, vectors)


def write_tsv(table, path, name="graph", seed=0):
    with open(path, "w") as f:
        f.write("# dim=%d graph=%s seed=%d\n" % (table.dim, name, seed))
        for node_id, row in zip(table.ids, table.vectors):
            f.write("%d\t%s\n" % (node_id, "\t".join(repr(float(x)) for x in row)))


def read_tsv(path):
    ids, rows = [], []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            ids.append(int(parts[0]))
            rows.append([float(x) for x in parts[1:]])
    return EmbeddingTable(np.asarray(ids), np.asarray(rows, dtype=np.float32))
