"""Immutable undirected entity graphs with CSR adjacency.

Graphs are built once from an edge stream (N-Triples or TSV edge lists),
after which they are read-only and safe to share. Node ids are dense
integers assigned in first-appearance order of the interned IRIs.
"""

import re
import struct
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    pass


class ParseError(GraphError):
    pass


class CapacityError(GraphError):
    """Raised when a builder exceeds its configured node/edge budget."""


@dataclass
class ParseStats:
    """Counters accumulated while streaming an edge source."""

    emitted: int = 0
    literal_objects: int = 0
    blank_nodes: int = 0
    malformed: int = 0
    comments: int = 0


# subject/predicate are IRIs in angle brackets; object is captured raw and
# classified afterwards (IRI, literal, blank node).
_TRIPLE_RE = re.compile(r"^<([^<>\s]*)>\s+<([^<>\s]*)>\s+(.+?)\s*\.$")


def _iter_lines(source):
    """Yield (text, terminated) from a file object or an iterable of lines."""
    for raw in source:
        if isinstance(raw, bytes):
            try:
                raw = raw.decode("utf-8")
            except UnicodeDecodeError:
                yield None, True
                continue
        terminated = raw.endswith("\n") or raw.endswith("\r")
        yield raw, terminated


def parse_ntriples(source, stats=None):
    """Stream (subject IRI, object IRI) pairs from N-Triples lines.

    Predicates are parsed and discarded; only IRI-IRI statements produce
    pairs. Literal objects and blank nodes are counted and skipped, as are
    malformed lines (streaming never aborts on a bad interior line). A
    final line that is cut off before its ``.`` terminator raises
    ``ParseError``: that indicates a truncated dump rather than noise.

    Parameters
    ----------
    source : file-like or iterable of str/bytes lines
    stats : ParseStats, optional
        Filled with skip counters while the stream is consumed.
    """
    stats = stats if stats is not None else ParseStats()
    for text, terminated in _iter_lines(source):
        if text is None:
            stats.malformed += 1
            continue
        line = text.strip()
        if not line:
            continue
        if line.startswith("#"):
            stats.comments += 1
            continue
        m = _TRIPLE_RE.match(line)
        if m is None:
            if not terminated:
                raise ParseError("unterminated triple at end of input: %r" % line[:80])
            stats.malformed += 1
            continue
        sub, _pred, obj = m.group(1), m.group(2), m.group(3)
        if obj.startswith('"'):
            stats.literal_objects += 1
            continue
        if obj.startswith("_:") or sub.startswith("_:"):
            stats.blank_nodes += 1
            continue
        if not (obj.startswith("<") and obj.endswith(">")):
            stats.malformed += 1
            continue
        stats.emitted += 1
        yield sub, obj[1:-1]


def parse_edge_tsv(source, stats=None):
    """Stream (src, dst) pairs from ``src<TAB>dst`` lines ('#' comments)."""
    stats = stats if stats is not None else ParseStats()
    for text, _terminated in _iter_lines(source):
        if text is None:
            stats.malformed += 1
            continue
        line = text.rstrip("\r\n")
        if not line.strip():
            continue
        if line.lstrip().startswith("#"):
            stats.comments += 1
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            stats.malformed += 1
            continue
        stats.emitted += 1
        yield parts[0], parts[1]


@dataclass(frozen=True)
class EntityGraph:
    """Undirected graph in CSR form: sorted neighbor lists, no self-loops.

    ``labels`` optionally maps dense node ids back to entity IRIs.
    """

    offsets: np.ndarray
    neighbors: np.ndarray
    labels: tuple = None
    _label_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.offsets.setflags(write=False)
        self.neighbors.setflags(write=False)

    @property
    def node_count(self):
        return len(self.offsets) - 1

    @property
    def edge_count(self):
        return len(self.neighbors) // 2

    @property
    def degrees(self):
        return np.diff(self.offsets)

    def neighbors_of(self, u):
        return self.neighbors[self.offsets[u] : self.offsets[u + 1]]

    def has_edge(self, u, v):
        row = self.neighbors_of(u)
        i = np.searchsorted(row, v)
        return i < len(row) and row[i] == v

    def edge_array(self):
        """All undirected edges as an (m, 2) array with u < v per row."""
        src = np.repeat(np.arange(self.node_count, dtype=np.int64), self.degrees)
        mask = src < self.neighbors
        return np.stack([src[mask], self.neighbors[mask]], axis=1)

    def label_index(self):
        if self.labels is None:
            raise GraphError("graph carries no labels")
        if self._label_index is None:
            object.__setattr__(
                self, "_label_index", {iri: i for i, iri in enumerate(self.labels)}
            )
        return self._label_index


def build_graph(pairs, node_budget=None, edge_budget=None):
    """Intern IRIs and assemble an EntityGraph from an edge stream.

    Self-loops and duplicate edges are dropped; neighbor lists come out
    sorted. Peak memory is O(nodes + edges). Budgets, when given, bound the
    interner and the raw edge buffer and raise ``CapacityError`` once
    exceeded.
    """
    interner = {}
    labels = []
    src, dst = [], []
    for s, o in pairs:
        for iri in (s, o):
            if iri not in interner:
                if node_budget is not None and len(labels) >= node_budget:
                    raise CapacityError("node budget %d exceeded" % node_budget)
                interner[iri] = len(labels)
                labels.append(iri)
        if edge_budget is not None and len(src) >= edge_budget:
            raise CapacityError("edge budget %d exceeded" % edge_budget)
        src.append(interner[s])
        dst.append(interner[o])
    n = len(labels)
    a = np.asarray(src, dtype=np.int64)
    b = np.asarray(dst, dtype=np.int64)
    return _assemble(n, a, b, tuple(labels))


def build_graph_from_ids(node_count, src, dst, labels=None):
    """Assemble a graph directly from integer endpoint arrays."""
    a = np.asarray(src, dtype=np.int64)
    b = np.asarray(dst, dtype=np.int64)
    if len(a) and (a.min() < 0 or b.min() < 0 or max(a.max(), b.max()) >= node_count):
        raise GraphError("edge endpoint out of range")
    return _assemble(node_count, a, b, labels)


def _assemble(n, a, b, labels):
    keep = a != b
    a, b = a[keep], b[keep]
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    if len(lo):
        und = np.unique(np.stack([lo, hi], axis=1), axis=0)
        lo, hi = und[:, 0], und[:, 1]
    all_src = np.concatenate([lo, hi])
    all_dst = np.concatenate([hi, lo])
    order = np.lexsort((all_dst, all_src))
    neighbors = np.ascontiguousarray(all_dst[order])
    counts = np.bincount(all_src, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return EntityGraph(offsets=offsets, neighbors=neighbors, labels=labels)


def connected_components(g):
    """Label nodes by component id (BFS); ids ordered by smallest member."""
    n = g.node_count
    comp = np.full(n, -1, dtype=np.int64)
    queue = np.empty(n, dtype=np.int64)
    cid = 0
    for start in range(n):
        if comp[start] >= 0:
            continue
        comp[start] = cid
        queue[0] = start
        head, tail = 0, 1
        while head < tail:
            u = queue[head]
            head += 1
            for v in g.neighbors_of(u):
                if comp[v] < 0:
                    comp[v] = cid
                    queue[tail] = v
                    tail += 1
        cid += 1
    return comp, cid


def largest_wcc(g):
    """Induced subgraph of the largest connected component.

    Ties go to the component containing the smallest original node id,
    which is the lowest component id by construction. Returns the subgraph
    and the id translation table (new id -> original id).
    """
    if g.node_count == 0:
        return g, np.empty(0, dtype=np.int64)
    comp, k = connected_components(g)
    sizes = np.bincount(comp, minlength=k)
    best = int(np.argmax(sizes))  # argmax takes the first (= lowest) maximum
    keep = np.flatnonzero(comp == best)
    return induce_subgraph(g, keep)


def induce_subgraph(g, seeds):
    """Subgraph on ``seeds`` with all edges whose endpoints are both kept.

    New ids follow ascending original id. Returns (subgraph, node_map) with
    node_map[new_id] = original id.
    """
    seeds = np.unique(np.asarray(list(seeds), dtype=np.int64))
    if len(seeds) and (seeds[0] < 0 or seeds[-1] >= g.node_count):
        bad = seeds[(seeds < 0) | (seeds >= g.node_count)]
        raise GraphError("unknown seed node ids: %s" % bad[:10].tolist())
    present = np.zeros(g.node_count, dtype=bool)
    present[seeds] = True
    old2new = np.full(g.node_count, -1, dtype=np.int64)
    old2new[seeds] = np.arange(len(seeds))
    src = np.repeat(np.arange(g.node_count, dtype=np.int64), g.degrees)
    keep = present[src] & present[g.neighbors]
    new_src = old2new[src[keep]]
    new_dst = old2new[g.neighbors[keep]]
    labels = None
    if g.labels is not None:
        labels = tuple(g.labels[o] for o in seeds)
    sub = _assemble(len(seeds), new_src, new_dst, labels)
    return sub, seeds


_MAGIC = b"ARKG"
_VERSION = 1


def save_graph(g, path):
    """Write the binary snapshot (magic ARKG, little-endian integers)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQQ", _VERSION, g.node_count, len(g.neighbors)))
        f.write(g.offsets.astype("<u8").tobytes())
        f.write(g.neighbors.astype("<u8").tobytes())
        if g.labels is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", len(g.labels)))
            for iri in g.labels:
                raw = iri.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)


def load_graph(path):
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ParseError("not an ARKG snapshot: %s" % path)
        version, n, m = struct.unpack("<IQQ", f.read(20))
        if version != _VERSION:
            raise ParseError("unsupported ARKG version %d" % version)
        offsets = np.frombuffer(f.read(8 * (n + 1)), dtype="<u8").astype(np.int64)
        neighbors = np.frombuffer(f.read(8 * m), dtype="<u8").astype(np.int64)
        labels = None
        (has_labels,) = struct.unpack("<B", f.read(1))
        if has_labels:
            (count,) = struct.unpack("<Q", f.read(8))
            out = []
            for _ in range(count):
                (ln,) = struct.unpack("<I", f.read(4))
                out.append(f.read(ln).decode("utf-8"))
            labels = tuple(out)
        return EntityGraph(offsets=offsets, neighbors=neighbors, labels=labels)


def write_edge_tsv(g, path):
    with open(path, "w") as f:
        if g.labels is not None:
            for u, v in g.edge_array():
                f.write("%s\t%s\n" % (g.labels[u], g.labels[v]))
        else:
            for u, v in g.edge_array():
                f.write("%d\t%d\n" % (u, v))
