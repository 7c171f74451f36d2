"""Hierarchical Louvain modularity clustering.

Classic two-phase algorithm: greedy local moves until the per-pass
modularity gain falls under ``min_gain``, then aggregation of communities
into supernodes, repeated until no further coarsening. Node visit order is
reshuffled from a seeded stream each pass, so runs are reproducible.
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .graph import GraphError
from .util import substream


def _as_assignment(node_count, partition):
    if isinstance(partition, dict):
        arr = np.full(node_count, -1, dtype=np.int64)
        for k, v in partition.items():
            arr[k] = v
        partition = arr
    arr = np.asarray(partition, dtype=np.int64)
    if arr.shape != (node_count,):
        raise GraphError("partition must assign every node exactly once")
    if (arr < 0).any():
        raise GraphError("partition leaves nodes unassigned")
    return arr


def modularity(g, partition):
    """Newman modularity Q of a partition of an unweighted graph.

    Q = sum_c [ e_c / m - (d_c / 2m)^2 ] with e_c the intra-cluster edge
    count, d_c the total degree of cluster c and m the edge count.
    """
    labels = _as_assignment(g.node_count, partition)
    m = g.edge_count
    if m == 0:
        raise GraphError("modularity is undefined on an edgeless graph (m = 0)")
    src = np.repeat(np.arange(g.node_count, dtype=np.int64), g.degrees)
    same = labels[src] == labels[g.neighbors]
    ncl = int(labels.max()) + 1
    # each undirected intra edge appears twice in the CSR scan
    e_c = np.bincount(labels[src][same], minlength=ncl) / 2.0
    d_c = np.bincount(labels, weights=g.degrees.astype(np.float64), minlength=ncl)
    return float(np.sum(e_c / m - (d_c / (2.0 * m)) ** 2))


@dataclass
class ClusterHierarchy:
    """Stack of nested partitions produced by Louvain.

    ``levels[0]`` is the identity partition over original nodes; each later
    entry maps the previous level's cluster ids to coarser ids. Modularity
    is evaluated on the original graph at every level.
    """

    levels: list
    modularities: list

    @property
    def num_levels(self):
        return len(self.levels)

    def cluster_counts(self):
        return [int(lv.max()) + 1 if len(lv) else 0 for lv in self.levels]

    def assignment(self, level=-1):
        """Compose level maps down to original node ids."""
        if not self.levels:
            raise GraphError("empty hierarchy")
        idx = range(len(self.levels))[level]
        out = self.levels[0]
        for lv in self.levels[1 : idx + 1]:
            out = lv[out]
        return out


def coarsest_assignment(hierarchy):
    return hierarchy.assignment(-1)


class _LevelGraph:
    """Weighted multigraph view used between aggregation rounds."""

    def __init__(self, adj, self_w):
        self.adj = adj  # list of dicts: neighbor -> weight (no self keys)
        self.self_w = self_w  # per-node self-loop weight
        self.k = np.array(
            [sum(a.values()) + 2.0 * self_w[i] for i, a in enumerate(adj)]
        )
        self.m = (sum(sum(a.values()) for a in adj)) / 2.0 + float(np.sum(self_w))

    @classmethod
    def from_entity_graph(cls, g):
        adj = [
            {int(v): 1.0 for v in g.neighbors_of(u)} for u in range(g.node_count)
        ]
        return cls(adj, np.zeros(g.node_count))


def _level_modularity(lg, node_com):
    """Weighted Q on a level graph (intra weights once, self-loops included)."""
    ncl = int(node_com.max()) + 1
    tot = np.bincount(node_com, weights=lg.k, minlength=ncl)
    in_c = np.bincount(node_com, weights=lg.self_w, minlength=ncl).astype(np.float64)
    for u, a in enumerate(lg.adj):
        cu = node_com[u]
        for v, w in a.items():
            if node_com[v] == cu:
                in_c[cu] += w / 2.0
    return float(np.sum(in_c / lg.m - (tot / (2.0 * lg.m)) ** 2))


def _one_level(lg, min_gain, rng):
    """Greedy local-move phase. Returns (node -> community map, moved?)."""
    n = len(lg.adj)
    node_com = np.arange(n)
    com_tot = lg.k.copy()
    two_m = 2.0 * lg.m
    order = np.arange(n)
    improved = False
    q_prev = _level_modularity(lg, node_com)
    while True:
        rng.shuffle(order)
        pass_gain = 0.0
        for u in order:
            cu = node_com[u]
            links = {}
            for v, w in lg.adj[u].items():
                links[node_com[v]] = links.get(node_com[v], 0.0) + w
            com_tot[cu] -= lg.k[u]
            stay = links.get(cu, 0.0) - com_tot[cu] * lg.k[u] / two_m
            best_c, best_gain = cu, stay
            for c in sorted(links):
                if c == cu:
                    continue
                gain = links[c] - com_tot[c] * lg.k[u] / two_m
                if gain > best_gain + 1e-15:
                    best_c, best_gain = c, gain
            com_tot[best_c] += lg.k[u]
            node_com[u] = best_c
            if best_c != cu:
                improved = True
                pass_gain += (best_gain - stay) / lg.m
        q_pass = _level_modularity(lg, node_com)
        if q_pass < q_prev - 1e-12:
            raise AssertionError(
                "modularity decreased within a pass: %r -> %r" % (q_prev, q_pass)
            )
        q_prev = q_pass
        if pass_gain < min_gain:
            break
    return node_com, improved


def _renumber(node_com):
    """Dense community ids ordered by each community's smallest member."""
    mapping = {}
    out = np.empty_like(node_com)
    for u in range(len(node_com)):
        c = node_com[u]
        if c not in mapping:
            mapping[c] = len(mapping)
        out[u] = mapping[c]
    return out, len(mapping)


def _aggregate(lg, node_com, n_new):
    adj = [dict() for _ in range(n_new)]
    self_w = np.zeros(n_new)
    for u, a in enumerate(lg.adj):
        cu = node_com[u]
        for v, w in a.items():
            cv = node_com[v]
            if cu == cv:
                self_w[cu] += w / 2.0  # each intra edge visited from both sides
            else:
                adj[cu][cv] = adj[cu].get(cv, 0.0) + w
    self_w += np.bincount(node_com, weights=lg.self_w, minlength=n_new)
    return _LevelGraph(adj, self_w)


def louvain_cluster(g, min_gain=1e-6, max_levels=10, seed=0):
    """Run hierarchical Louvain on a connected unweighted graph.

    The returned hierarchy always contains the identity level; each
    aggregation round appends one coarser level. Per-pass modularity on the
    original graph is checked to be non-decreasing (up to 1e-12).
    """
    if g.edge_count == 0:
        raise GraphError("Louvain requires at least one edge")
    hierarchy = ClusterHierarchy(
        levels=[np.arange(g.node_count, dtype=np.int64)],
        modularities=[modularity(g, np.arange(g.node_count))],
    )
    lg = _LevelGraph.from_entity_graph(g)
    rng = substream(seed, "louvain")
    for _level in range(1, max_levels + 1):
        node_com, improved = _one_level(lg, min_gain, rng)
        if not improved:
            break
        node_com, n_new = _renumber(node_com)
        hierarchy.levels.append(node_com)
        q = modularity(g, hierarchy.assignment(-1))
        if q < hierarchy.modularities[-1] - 1e-12:
            raise AssertionError(
                "modularity decreased across a Louvain pass: %r -> %r"
                % (hierarchy.modularities[-1], q)
            )
        hierarchy.modularities.append(q)
        if n_new == len(lg.adj):
            break
        lg = _aggregate(lg, node_com, n_new)
    return hierarchy


class LouvainClustering(BaseEstimator):
    """Estimator facade over :func:`louvain_cluster`.

    Parameters
    ----------
    min_gain : float
        Stop local moves once a full pass gains less than this.
    max_levels : int
        Cap on aggregation rounds.
    level : int or None
        Hierarchy level exposed through ``labels_`` (None = coarsest).
    seed : int
        Root seed for the visit-order shuffles.
    """

    def __init__(self, min_gain=1e-6, max_levels=10, level=None, seed=0):
        self.min_gain = min_gain
        self.max_levels = max_levels
        self.level = level
        self.seed = seed

    def fit(self, graph):
        self.hierarchy_ = louvain_cluster(
            graph, min_gain=self.min_gain, max_levels=self.max_levels, seed=self.seed
        )
        lvl = -1 if self.level is None else self.level
        self.labels_ = self.hierarchy_.assignment(lvl)
        self.modularities_ = list(self.hierarchy_.modularities)
        self.n_levels_ = self.hierarchy_.num_levels
        return self

    def fit_predict(self, graph):
        return self.fit(graph).labels_


def write_assignment_tsv(path, assignment, level, q):
    with open(path, "w") as f:
        f.write("# level=%d modularity=%r\n" % (level, q))
        for node, cluster in enumerate(assignment):
            f.write("%d\t%d\n" % (node, cluster))


def read_assignment_tsv(path):
    nodes, clusters = [], []
    with open(path) as f:
        for line in f:
            if line.startswith("#") or not line.strip():
                continue
            a, b = line.split("\t")
            nodes.append(int(a))
            clusters.append(int(b))
    out = np.full(max(nodes) + 1 if nodes else 0, -1, dtype=np.int64)
    out[nodes] = clusters
    return out
