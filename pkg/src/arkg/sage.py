"""Unsupervised graph embeddings: random-walk positives, negative sampling,
two-layer mean-aggregator encoder, and the co-occurrence loss.

Works on both the unweighted entity graphs (uniform walk steps) and the
weighted cluster graph (step probability proportional to edge weight).
Node input features are learnable per-node vectors, since the graphs carry
no attributes of their own.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Adam, Var, backward, check_finite
from .embedding import EmbeddingTable
from .graph import GraphError
from .tensorio import load_tensors, save_tensors
from .util import substream


@dataclass
class WalkConfig:
    """Random-walk schedule for positive-pair generation."""

    walk_length: int = 5
    walks_per_node: int = 50
    window: int = 5
    seed: int = 0

    def __post_init__(self):
        if min(self.walk_length, self.walks_per_node, self.window) <= 0:
            raise ValueError("walk parameters must be positive")


def _step(graph, node, rng):
    nbrs = graph.neighbors_of(node)
    if len(nbrs) == 0:
        return None
    weights = getattr(graph, "weights", None)
    if weights is None:
        return int(nbrs[rng.integers(len(nbrs))])
    w = graph.weights_of(node)
    cdf = np.cumsum(w)
    return int(nbrs[np.searchsorted(cdf, rng.random() * cdf[-1], side="right")])


def sample_walks(graph, cfg, rng=None):
    """Emit (center, co-occurring) pairs from seeded random walks.

    Pairs are the forward pairs within ``window`` on each walk of
    ``walk_length`` nodes; isolated nodes contribute one (v, v) self-pair
    per walk so that every node appears in the positive stream.
    """
    if graph.node_count == 0:
        raise GraphError("cannot walk an empty graph")
    rng = rng if rng is not None else substream(cfg.seed, "walks")
    pairs = []
    for _round in range(cfg.walks_per_node):
        for start in rng.permutation(graph.node_count):
            walk = [int(start)]
            for _ in range(cfg.walk_length - 1):
                nxt = _step(graph, walk[-1], rng)
                if nxt is None:
                    break
                walk.append(nxt)
            if len(walk) == 1:
                pairs.append((walk[0], walk[0]))
                continue
            for i in range(len(walk)):
                for j in range(i + 1, min(i + cfg.window, len(walk) - 1) + 1):
                    pairs.append((walk[i], walk[j]))
    return np.asarray(pairs, dtype=np.int64)


def negative_distribution(graph):
    """Unigram distribution over nodes proportional to degree^(3/4)."""
    w = graph.degrees.astype(np.float64) ** 0.75
    total = w.sum()
    if total == 0:
        return np.full(graph.node_count, 1.0 / graph.node_count)
    return w / total


def sample_negatives(pairs, dist, q, rng, max_rounds=100):
    """Draw q negatives per pair, resampling draws that hit i or j."""
    out = rng.choice(len(dist), size=(len(pairs), q), p=dist)
    for _ in range(max_rounds):
        bad = (out == pairs[:, :1]) | (out == pairs[:, 1:2])
        hits = int(bad.sum())
        if hits == 0:
            break
        out[bad] = rng.choice(len(dist), size=hits, p=dist)
    return out


@dataclass
class SampledNeighborhood:
    """Two-level sample tree used by the encoder for one node."""

    node: int
    layer1: np.ndarray  # aggregated at the hidden layer for the node itself
    layer2: np.ndarray  # aggregated at the output layer
    layer2_layer1: np.ndarray  # hidden-layer samples for each layer2 node


def _sample_set(graph, node, fanout, rng):
    nbrs = graph.neighbors_of(node)
    if len(nbrs) == 0:
        return np.full(fanout, node, dtype=np.int64)
    if len(nbrs) >= fanout:
        return np.asarray(rng.choice(nbrs, size=fanout, replace=False), dtype=np.int64)
    return np.asarray(rng.choice(nbrs, size=fanout, replace=True), dtype=np.int64)


def sample_neighborhood(graph, node, fanouts=(25, 10), seed=0):
    """Sample the encoder's support for ``node`` (with replacement when the
    degree is below the fanout; isolated nodes fall back to themselves)."""
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "nbhd", node)
    layer1 = _sample_set(graph, node, fanouts[0], rng)
    layer2 = _sample_set(graph, node, fanouts[1], rng)
    layer2_layer1 = np.stack(
        [_sample_set(graph, int(v), fanouts[0], rng) for v in layer2]
    )
    return SampledNeighborhood(int(node), layer1, layer2, layer2_layer1)


def _sample_all(graph, fanout, rng):
    return np.stack(
        [_sample_set(graph, u, fanout, rng) for u in range(graph.node_count)]
    )


class SageParams:
    """Encoder parameters: per-node input vectors plus two aggregator layers."""

    def __init__(
        self,
        node_count,
        in_dim=50,
        hidden_dim=50,
        out_dim=50,
        fanouts=(25, 10),
        negatives=5,
        seed=0,
    ):
        if len(fanouts) != 2 or min(fanouts) <= 0:
            raise ValueError("fanouts must be two positive integers")
        rng = substream(seed, "sage-init")
        self.X = Var(rng.normal(0.0, 1.0 / np.sqrt(in_dim), (node_count, in_dim)),
                     requires_grad=True)
        lim1 = np.sqrt(6.0 / (2 * in_dim + hidden_dim))
        self.W1 = Var(rng.uniform(-lim1, lim1, (2 * in_dim, hidden_dim)),
                      requires_grad=True)
        self.b1 = Var(np.zeros(hidden_dim), requires_grad=True)
        lim2 = np.sqrt(6.0 / (2 * hidden_dim + out_dim))
        self.W2 = Var(rng.uniform(-lim2, lim2, (2 * hidden_dim, out_dim)),
                      requires_grad=True)
        self.b2 = Var(np.zeros(out_dim), requires_grad=True)
        self.fanouts = tuple(int(f) for f in fanouts)
        self.negatives = int(negatives)

    @property
    def out_dim(self):
        return self.W2.value.shape[1]

    def variables(self):
        return [self.X, self.W1, self.b1, self.W2, self.b2]

    def save(self, path):
        save_tensors(
            path,
            {
                "X": self.X.value,
                "W1": self.W1.value,
                "b1": self.b1.value,
                "W2": self.W2.value,
                "b2": self.b2.value,
                "meta": np.asarray(
                    [self.fanouts[0], self.fanouts[1], self.negatives], dtype=np.float64
                ),
            },
        )

    @classmethod
    def load(cls, path):
        t = load_tensors(path)
        obj = cls.__new__(cls)
        obj.X = Var(t["X"], requires_grad=True)
        obj.W1 = Var(t["W1"], requires_grad=True)
        obj.b1 = Var(t["b1"], requires_grad=True)
        obj.W2 = Var(t["W2"], requires_grad=True)
        obj.b2 = Var(t["b2"], requires_grad=True)
        meta = t["meta"]
        obj.fanouts = (int(meta[0]), int(meta[1]))
        obj.negatives = int(meta[2])
        return obj


def _encode_all_var(params, layer1_sets, layer2_sets):
    """Encode every node as a Var matrix (n, out_dim)."""
    x = params.X
    neigh0 = ad.vmean(ad.take(x, layer1_sets), axis=1)
    h1 = ad.relu(ad.add(ad.matmul(ad.concat([x, neigh0]), params.W1), params.b1))
    neigh1 = ad.vmean(ad.take(h1, layer2_sets), axis=1)
    out = ad.add(ad.matmul(ad.concat([h1, neigh1]), params.W2), params.b2)
    return ad.l2_normalize_rows(out)


def encode(params, graph, node, neighborhood):
    """Forward pass for one node given its sampled support tree."""
    xv = params.X.value
    w1, b1 = params.W1.value, params.b1.value
    w2, b2 = params.W2.value, params.b2.value

    def hidden(v, l1):
        pre = np.concatenate([xv[v], xv[l1].mean(axis=0)]) @ w1 + b1
        return np.maximum(pre, 0.0)

    h_self = hidden(neighborhood.node, neighborhood.layer1)
    h_neigh = np.stack(
        [
            hidden(int(v), neighborhood.layer2_layer1[t])
            for t, v in enumerate(neighborhood.layer2)
        ]
    ).mean(axis=0)
    out = np.concatenate([h_self, h_neigh]) @ w2 + b2
    return out / np.sqrt((out**2).sum() + 1e-24)


def _log_sigmoid_clamped(x):
    return ad.log(ad.clip(ad.sigmoid(x), 1e-12, 1.0 - 1e-12))


def unsup_loss(z_i, z_j, negatives=()):
    """Per-pair co-occurrence loss: -log s(zi.zj) - sum_k log s(-zi.zk)."""
    zi, zj = ad.as_var(z_i), ad.as_var(z_j)
    loss = -_log_sigmoid_clamped(ad.vsum(ad.mul(zi, zj)))
    for zk in negatives:
        loss = ad.add(loss, -_log_sigmoid_clamped(-ad.vsum(ad.mul(zi, ad.as_var(zk)))))
    return float(loss.value)


def pair_loss_var(z, pairs, negs):
    """Mean per-pair loss over a batch; z is a Var matrix of embeddings."""
    zi = ad.take(z, pairs[:, 0])
    zj = ad.take(z, pairs[:, 1])
    pos = ad.vsum(ad.mul(zi, zj), axis=1)
    zk = ad.take(z, negs)
    b, d = zi.value.shape
    neg = ad.vsum(ad.mul(ad.reshape(zi, (b, 1, d)), zk), axis=2)
    per_pair = ad.add(
        -_log_sigmoid_clamped(pos), -ad.vsum(_log_sigmoid_clamped(-neg), axis=1)
    )
    return ad.vmean(per_pair)


@dataclass
class TrainResult:
    table: EmbeddingTable
    params: SageParams
    loss_trace: list = field(default_factory=list)


def train_embeddings(
    graph,
    dim=50,
    hidden_dim=None,
    in_dim=None,
    fanouts=(25, 10),
    negatives=5,
    walk=None,
    lr=3e-5,
    batch_size=512,
    epochs=10,
    seed=0,
    params=None,
):
    """Fit embeddings by minimizing the pair loss over walk co-occurrences.

    Deterministic for a given seed: walk order, neighborhood samples, batch
    order and negatives all come from named substreams. Aborts with
    ``DivergenceError`` if the loss stops being finite.
    """
    n = graph.node_count
    if n == 0:
        raise GraphError("cannot embed an empty graph")
    walk = walk if walk is not None else WalkConfig(seed=seed)
    if params is None:
        params = SageParams(
            n,
            in_dim=in_dim or dim,
            hidden_dim=hidden_dim or dim,
            out_dim=dim,
            fanouts=fanouts,
            negatives=negatives,
            seed=seed,
        )
    opt = Adam(params.variables(), lr=lr)
    dist = negative_distribution(graph)
    trace = []
    for epoch in range(epochs):
        rng = substream(seed, "sage-epoch", epoch)
        a1 = _sample_all(graph, params.fanouts[0], rng)
        a2 = _sample_all(graph, params.fanouts[1], rng)
        pairs = sample_walks(graph, walk, rng=rng)
        rng.shuffle(pairs, axis=0)
        negs = sample_negatives(pairs, dist, params.negatives, rng)
        losses = []
        for lo in range(0, len(pairs), batch_size):
            z = _encode_all_var(params, a1, a2)
            loss = pair_loss_var(z, pairs[lo : lo + batch_size], negs[lo : lo + batch_size])
            check_finite(loss, "embedding training loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            if __debug__:
                for p in params.variables():
                    check_finite(p, "embedding parameters")
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))
    table = extract_table(graph, params, seed)
    return TrainResult(table=table, params=params, loss_trace=trace)


def extract_table(graph, params, seed=0):
    """Encode every node with a fixed sample tree into a float32 table."""
    rng = substream(seed, "sage-final")
    a1 = _sample_all(graph, params.fanouts[0], rng)
    a2 = _sample_all(graph, params.fanouts[1], rng)
    z = _encode_all_var(params, a1, a2).value
    return EmbeddingTable(np.arange(graph.node_count), z.astype(np.float32))


class GraphSageEmbedder(BaseEstimator):
    """Estimator facade: ``fit`` trains on a graph, ``transform`` returns rows.

    The graph stands in for the usual X matrix; embeddings compose with
    downstream sklearn-style models through ``fit_transform``.
    """

    def __init__(
        self,
        dim=50,
        hidden_dim=None,
        fanouts=(25, 10),
        negatives=5,
        walk_length=5,
        walks_per_node=50,
        window=5,
        lr=3e-5,
        batch_size=512,
        epochs=10,
        seed=0,
    ):
        self.dim = dim
        self.hidden_dim = hidden_dim
        self.fanouts = fanouts
        self.negatives = negatives
        self.walk_length = walk_length
        self.walks_per_node = walks_per_node
        self.window = window
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed

    def fit(self, graph):
        walk = WalkConfig(
            walk_length=self.walk_length,
            walks_per_node=self.walks_per_node,
            window=self.window,
            seed=self.seed,
        )
        result = train_embeddings(
            graph,
            dim=self.dim,
            hidden_dim=self.hidden_dim,
            fanouts=self.fanouts,
            negatives=self.negatives,
            walk=walk,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )
        self.embeddings_ = result.table
        self.params_ = result.params
        self.loss_trace_ = result.loss_trace
        return self

    def transform(self, node_ids=None):
        table = self.embeddings_
        if node_ids is None:
            return table.vectors.copy()
        return np.stack([table.lookup(i) for i in node_ids])

    def fit_transform(self, graph, node_ids=None):
        return self.fit(graph).transform(node_ids)
