"""Weighted cluster graph built from a graph plus a cluster assignment.

The weight of edge (i, j) is the cross-edge density: the number of graph
edges running between clusters i and j divided by |i|*|j|, the maximum
possible. Intra-cluster edges are ignored; clusters with no cross edges
stay in the vertex set as isolated vertices.
"""

from dataclasses import dataclass

import numpy as np

from .graph import GraphError


@dataclass(frozen=True)
class ClusterGraph:
    """Symmetric weighted CSR over cluster ids."""

    offsets: np.ndarray
    neighbors: np.ndarray
    weights: np.ndarray
    sizes: np.ndarray

    def __post_init__(self):
        for a in (self.offsets, self.neighbors, self.weights, self.sizes):
            a.setflags(write=False)

    @property
    def node_count(self):
        return len(self.offsets) - 1

    @property
    def edge_count(self):
        return len(self.neighbors) // 2

    @property
    def degrees(self):
        return np.diff(self.offsets)

    def neighbors_of(self, i):
        return self.neighbors[self.offsets[i] : self.offsets[i + 1]]

    def weights_of(self, i):
        return self.weights[self.offsets[i] : self.offsets[i + 1]]

    def edge_array(self):
        """(m, 3) columns i, j, weight with i < j."""
        src = np.repeat(np.arange(self.node_count, dtype=np.int64), self.degrees)
        mask = src < self.neighbors
        return src[mask], self.neighbors[mask], self.weights[mask]


def cluster_of(assignment, u):
    """Cluster id of entity ``u`` under an assignment array or dict."""
    if isinstance(assignment, dict):
        if u not in assignment:
            raise GraphError("entity %r has no cluster assignment" % (u,))
        return int(assignment[u])
    u = int(u)
    if u < 0 or u >= len(assignment) or assignment[u] < 0:
        raise GraphError("entity %r has no cluster assignment" % (u,))
    return int(assignment[u])


def build_cluster_graph(g, assignment):
    """Aggregate a graph into its weighted cluster graph.

    Every cluster id in [0, max] must own at least one node; an id with
    zero members indicates a broken assignment and raises.
    """
    labels = np.asarray(assignment, dtype=np.int64)
    if labels.shape != (g.node_count,) or (labels < 0).any():
        raise GraphError("assignment must cover every node")
    ncl = int(labels.max()) + 1 if len(labels) else 0
    sizes = np.bincount(labels, minlength=ncl)
    if (sizes == 0).any():
        missing = np.flatnonzero(sizes == 0)
        raise GraphError("clusters with 0 nodes referenced: %s" % missing[:10].tolist())

    if g.edge_count:
        edges = g.edge_array()  # undirected edges counted once
        ci = labels[edges[:, 0]]
        cj = labels[edges[:, 1]]
        cross = ci != cj
        lo = np.minimum(ci[cross], cj[cross])
        hi = np.maximum(ci[cross], cj[cross])
        pairs, counts = np.unique(np.stack([lo, hi], axis=1), axis=0, return_counts=True)
    else:
        pairs = np.empty((0, 2), dtype=np.int64)
        counts = np.empty(0, dtype=np.int64)

    w = counts / (sizes[pairs[:, 0]].astype(np.float64) * sizes[pairs[:, 1]])
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    ww = np.concatenate([w, w])
    order = np.lexsort((dst, src))
    neighbors = np.ascontiguousarray(dst[order])
    weights = np.ascontiguousarray(ww[order])
    offsets = np.zeros(ncl + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=ncl), out=offsets[1:])
    return ClusterGraph(offsets=offsets, neighbors=neighbors, weights=weights, sizes=sizes)


def write_weighted_edge_tsv(cg, path):
    i, j, w = cg.edge_array()
    with open(path, "w") as f:
        for a, b, weight in zip(i, j, w):
            f.write("%d\t%d\t%r\n" % (a, b, weight))


def write_cluster_sizes_tsv(cg, path):
    with open(path, "w") as f:
        for c, s in enumerate(cg.sizes):
            f.write("%d\t%d\n" % (c, s))


def read_weighted_edge_tsv(path, sizes_path):
    sizes = []
    with open(sizes_path) as f:
        for line in f:
            if not line.strip():
                continue
            _c, s = line.split("\t")
            sizes.append(int(s))
    sizes = np.asarray(sizes, dtype=np.int64)
    ncl = len(sizes)
    i, j, w = [], [], []
    with open(path) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            a, b, weight = line.split("\t")
            i.append(int(a))
            j.append(int(b))
            w.append(float(weight))
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    w = np.asarray(w, dtype=np.float64)
    s = np.concatenate([i, j])
    d = np.concatenate([j, i])
    ww = np.concatenate([w, w])
    order = np.lexsort((d, s))
    offsets = np.zeros(ncl + 1, dtype=np.int64)
    np.cumsum(np.bincount(s, minlength=ncl), out=offsets[1:])
    return ClusterGraph(
        offsets=offsets,
        neighbors=np.ascontiguousarray(d[order]),
        weights=np.ascontiguousarray(ww[order]),
        sizes=sizes,
    )
