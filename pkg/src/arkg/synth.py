"""Synthetic graphs and datasets used by tests, demos and the bundled
pipeline fixture.

The "graph signal" fixture plants a label that depends only on an
entity's community in the knowledge graph: frequent aspects give the
classifier enough examples to learn the community-label mapping, while
rare aspects appear only at test time, so any gain there must come through
the graph. The "text signal" fixture instead plants a single token that
determines the label, which is what the text explainer should recover.
"""

import os

import numpy as np

from .data import AlscDataset, AlscInstance, save_jsonl
from .graph import build_graph_from_ids
from .util import substream

LABEL_OF_COMMUNITY = ("P", "N", "O")


def sbm_graph(sizes, p_in, p_out, seed=0, iri_prefix="http://example.org/e"):
    """Stochastic block model graph with IRI labels; returns (graph, community)."""
    rng = substream(seed, "sbm")
    n = int(sum(sizes))
    community = np.repeat(np.arange(len(sizes)), sizes)
    iu, ju = np.triu_indices(n, 1)
    p = np.where(community[iu] == community[ju], p_in, p_out)
    mask = rng.random(len(iu)) < p
    labels = tuple("%s%d" % (iri_prefix, i) for i in range(n))
    g = build_graph_from_ids(n, iu[mask], ju[mask], labels)
    return g, community


def planted_cliques(num_cliques=4, clique_size=30, noise_edges=4, seed=0):
    """Disjoint cliques joined by a few random cross edges."""
    rng = substream(seed, "cliques")
    n = num_cliques * clique_size
    labels = np.repeat(np.arange(num_cliques), clique_size)
    src, dst = [], []
    for c in range(num_cliques):
        base = c * clique_size
        for i in range(clique_size):
            for j in range(i + 1, clique_size):
                src.append(base + i)
                dst.append(base + j)
    added = set()
    while len(added) < noise_edges:
        u = int(rng.integers(n))
        v = int(rng.integers(n))
        if labels[u] == labels[v]:
            continue
        key = (min(u, v), max(u, v))
        if key in added:
            continue
        added.add(key)
        src.append(key[0])
        dst.append(key[1])
    return build_graph_from_ids(n, src, dst), labels


_FILLERS = ["w%d" % i for i in range(30)]


def _instance(idx, aspect_token, label, rng, extra=None):
    fillers = [str(_FILLERS[rng.integers(len(_FILLERS))]) for _ in range(3)]
    tokens = ["the", aspect_token, "is", fillers[0], fillers[1], fillers[2]]
    if extra:
        tokens.insert(3, extra)
    return AlscInstance(
        id="i%05d" % idx,
        tokens=tokens,
        aspect_span=(1, 2),
        entity="",
        label=label,
        disambiguation=None,
    )


def graph_signal_fixture(
    seed=0,
    per_community=40,
    communities=3,
    p_in=0.25,
    p_out=0.015,
    frequent_per_community=10,
    rare_per_community=10,
    train_per_frequent=25,
    test_per_frequent=2,
    test_per_rare=2,
):
    """Dataset whose labels equal the entity's knowledge-graph community.

    Rare aspects have zero training instances (they land in the lowest
    training-count bucket); their community is only reachable through the
    graph side of the model.
    """
    sizes = [per_community] * communities
    kg, community = sbm_graph(sizes, p_in, p_out, seed=seed)
    rng = substream(seed, "fixture")
    train, test = [], []
    entity_map = {}
    idx = 0
    for c in range(communities):
        base = c * per_community
        label = LABEL_OF_COMMUNITY[c % 3]
        for a in range(frequent_per_community):
            node = base + a
            token = "thing%d" % node
            entity_map[token] = "http://example.org/e%d" % node
            for _ in range(train_per_frequent):
                train.append(_instance(idx, token, label, rng))
                idx += 1
            for _ in range(test_per_frequent):
                test.append(_instance(idx, token, label, rng))
                idx += 1
        for a in range(rare_per_community):
            node = base + frequent_per_community + a
            token = "thing%d" % node
            entity_map[token] = "http://example.org/e%d" % node
            for _ in range(test_per_rare):
                test.append(_instance(idx, token, label, rng))
                idx += 1
    return {
        "kg": kg,
        "community": community,
        "train": AlscDataset(train),
        "test": AlscDataset(test),
        "entity_map": entity_map,
    }


_SIGNALS = {"good": "P", "bad": "N", "meh": "O"}


def text_signal_fixture(seed=0, n_train=240, n_test=120):
    """Dataset where exactly one context token determines the label."""
    rng = substream(seed, "text-fixture")
    signals = sorted(_SIGNALS)

    def make(count, start):
        out = []
        for i in range(count):
            sig = signals[int(rng.integers(len(signals)))]
            out.append(_instance(start + i, "item", _SIGNALS[sig], rng, extra=sig))
        return AlscDataset(out)

    return {"train": make(n_train, 0), "test": make(n_test, n_train)}


def write_fixture(fixture, out_dir, config_extra=None):
    """Write a fixture as pipeline-ready files plus a config."""
    os.makedirs(out_dir, exist_ok=True)
    kg_path = os.path.join(out_dir, "kg.nt")
    with open(kg_path, "w") as f:
        g = fixture["kg"]
        for u, v in g.edge_array():
            f.write("<%s> <http://example.org/linksTo> <%s> .\n" % (g.labels[u], g.labels[v]))
    save_jsonl(fixture["train"], os.path.join(out_dir, "train.jsonl"))
    save_jsonl(fixture["test"], os.path.join(out_dir, "test.jsonl"))
    with open(os.path.join(out_dir, "entity_map.tsv"), "w") as f:
        for aspect in sorted(fixture["entity_map"]):
            f.write("%s\t%s\n" % (aspect, fixture["entity_map"][aspect]))
    lines = {
        "paths.kg": kg_path,
        "paths.train": os.path.join(out_dir, "train.jsonl"),
        "paths.test": os.path.join(out_dir, "test.jsonl"),
        "paths.entity_map": os.path.join(out_dir, "entity_map.tsv"),
        "paths.artifacts": os.path.join(out_dir, "artifacts"),
        # desk-scale training schedule; model defaults stay untouched
        "sage.walks_per_node": 10,
        "sage.lr": 0.01,
        "sage.cluster_epochs": 8,
        "sage.subgraph_epochs": 8,
        "alsc.lr": 0.05,
        "alsc.epochs": 6,
        "probe.lr": 0.001,
        "probe.epochs": 30,
        "explain.concept_epochs": 20,
        "explain.graph_epochs": 4,
        "explain.mc_samples": 4,
        "explain.refine_epochs": 1,
    }
    lines.update(config_extra or {})
    config_path = os.path.join(out_dir, "pipeline.cfg")
    with open(config_path, "w") as f:
        for key in sorted(lines):
            value = lines[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            f.write("%s = %s\n" % (key, value))
    return config_path
