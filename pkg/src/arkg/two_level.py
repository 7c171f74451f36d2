"""Two-level entity embeddings: cluster-graph half plus subgraph half.

An entity's vector is the concatenation of its cluster's embedding and its
own subgraph embedding. Entities without a usable knowledge-graph link
(the UNK sentinel) read back as exact zero vectors, which is also how the
disambiguation auditor neutralizes entries it flags.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .cluster_graph import cluster_of
from .embedding import EmbeddingTable, load_arem, save_arem
from .graph import GraphError, induce_subgraph
from .util import array_hash

UNK = -1
UNK_MARKER = "UNK"

FLAG_OK = "OK"
FLAG_UNK = "UNK"
FLAG_ZEROED = "ZEROED"
_FLAG_CODES = {FLAG_OK: 0, FLAG_UNK: 1, FLAG_ZEROED: 2}
_FLAG_NAMES = {v: k for k, v in _FLAG_CODES.items()}

_WS = re.compile(r"\s+")


def normalize_aspect(text):
    """Canonical aspect key: lowercase with collapsed whitespace."""
    return _WS.sub(" ", text.strip().lower())


@dataclass
class AspectEntityMap:
    """Deterministic aspect-surface -> entity-IRI mapping (UNK preserved)."""

    entries: dict
    misses: int = 0

    def entity_iri(self, aspect):
        """IRI for an aspect surface, or the UNK marker (counting misses)."""
        key = normalize_aspect(aspect)
        if key not in self.entries:
            self.misses += 1
            return UNK_MARKER
        return self.entries[key]


def load_entity_map(path):
    """Read ``aspect<TAB>entity_iri_or_UNK`` lines into an AspectEntityMap."""
    entries = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphError("entity map line %d is malformed" % lineno)
            key = normalize_aspect(parts[0])
            iri = parts[1].strip()
            if key in entries and entries[key] != iri:
                raise GraphError(
                    "aspect %r maps to conflicting entities %r and %r"
                    % (parts[0], entries[key], iri)
                )
            entries[key] = iri
    return AspectEntityMap(entries=entries)


def resolve_entity(graph, iri):
    """Node id of an IRI in the graph, or UNK for the marker/missing IRIs."""
    if iri == UNK_MARKER or not iri:
        return UNK
    return graph.label_index().get(iri, UNK)


def fill_entities(dataset, amap):
    """Fill missing instance entity fields from an aspect-entity map.

    Instances that already carry an IRI keep it; aspects absent from the
    map become UNK (counted on the map's miss counter)."""
    for inst in dataset:
        if not inst.entity:
            inst.entity = amap.entity_iri(inst.aspect)
    return dataset


def build_aspect_subgraph(kg, entity_ids):
    """Induced subgraph over the dataset's resolved aspect entities."""
    ids = sorted({int(e) for e in entity_ids if int(e) != UNK})
    if not ids:
        import warnings

        warnings.warn("no resolvable aspect entities; subgraph is empty")
        return induce_subgraph(kg, [])
    return induce_subgraph(kg, ids)


def assemble(z_clusters, z_subgraph, assignment, entity):
    """Concatenate [cluster half; subgraph half] for one entity.

    ``z_subgraph`` must be keyed by the same ids as ``entity`` (the
    knowledge-graph ids); a missing entity means the subgraph was not
    induced from the dataset's aspects first.
    """
    dim = z_clusters.dim + z_subgraph.dim
    if entity == UNK:
        return np.zeros(dim, dtype=np.float32)
    cluster = cluster_of(assignment, entity)
    try:
        zs = z_subgraph.lookup(entity)
    except KeyError:
        raise GraphError(
            "entity %d has no subgraph embedding; induce the aspect subgraph "
            "over the dataset first" % entity
        )
    return np.concatenate([z_clusters.lookup(cluster), zs])


class TwoLevelTable:
    """Entity-keyed concatenated embeddings with provenance flags."""

    def __init__(self, ids, vectors, flags=None):
        self._table = EmbeddingTable(ids, vectors)
        if flags is None:
            flags = np.zeros(len(self._table), dtype=np.int8)
        else:
            flags = np.asarray(flags, dtype=np.int8)
            order = np.argsort(np.asarray(ids, dtype=np.int64), kind="stable")
            flags = flags[order]
        if len(flags) != len(self._table):
            raise ValueError("flags and ids disagree")
        self.flags = flags
        self.flags.setflags(write=False)
        zero = ~self.vectors.any(axis=1)
        for i in np.flatnonzero(self.flags == _FLAG_CODES[FLAG_UNK]):
            if not zero[i]:
                raise ValueError("UNK entry %d is not a zero vector" % self.ids[i])

    @property
    def ids(self):
        return self._table.ids

    @property
    def vectors(self):
        return self._table.vectors

    @property
    def dim(self):
        return self._table.dim

    def __len__(self):
        return len(self._table)

    def __contains__(self, entity):
        return entity in self._table

    def lookup(self, entity):
        return self._table.lookup(entity)

    def flag_of(self, entity):
        return _FLAG_NAMES[int(self.flags[self._table.row_of(entity)])]

    def hash(self):
        return array_hash(self.ids, self.vectors, self.flags)

    def with_zeroed(self, entity_ids):
        """Copy with the given entities zeroed and flagged ZEROED."""
        vectors = self.vectors.copy()
        flags = self.flags.copy()
        for e in entity_ids:
            row = self._table.row_of(e)
            vectors[row] = 0.0
            flags[row] = _FLAG_CODES[FLAG_ZEROED]
        return TwoLevelTable(self.ids.copy(), vectors, flags)

    def save(self, arem_path, flags_path):
        save_arem(arem_path, self.vectors)
        with open(flags_path, "w") as f:
            for e, flag in zip(self.ids, self.flags):
                f.write("%d\t%s\n" % (e, _FLAG_NAMES[int(flag)]))

    @classmethod
    def load(cls, arem_path, flags_path):
        vectors = load_arem(arem_path)
        ids, flags = [], []
        with open(flags_path) as f:
            for line in f:
                if not line.strip():
                    continue
                e, flag = line.rstrip("\n").split("\t")
                ids.append(int(e))
                flags.append(_FLAG_CODES[flag])
        if len(ids) != len(vectors):
            raise ValueError("flags sidecar does not match snapshot row count")
        return cls(np.asarray(ids), vectors, np.asarray(flags))


def build_two_level_table(z_clusters, z_subgraph, assignment, entity_ids):
    """Assemble vectors for a set of entities into a TwoLevelTable."""
    ids = sorted({int(e) for e in entity_ids if int(e) != UNK})
    rows = [assemble(z_clusters, z_subgraph, assignment, e) for e in ids]
    dim = z_clusters.dim + z_subgraph.dim
    vectors = np.asarray(rows, dtype=np.float32).reshape(len(ids), dim)
    return TwoLevelTable(np.asarray(ids, dtype=np.int64), vectors)
