"""Pipeline orchestration: config parsing, stage execution, resumability.

Stages communicate exclusively through files in the artifact directory.
Every stage records the config hash, seed, and content hashes of its
inputs and outputs in ``manifest.json``; a stage refuses to run on top of
artifacts produced under a different config (with a line diff), and the
report refuses mixed-provenance artifacts. Two runs with the same config
and seed write byte-identical artifacts.
"""

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from . import explain as ex
from . import probing, sentiment
from .cluster_graph import (
    build_cluster_graph,
    read_weighted_edge_tsv,
    write_cluster_sizes_tsv,
    write_weighted_edge_tsv,
)
from .data import ToyTextEncoder, load_arft, load_jsonl
from .embedding import EmbeddingTable, load_arem, save_arem
from .graph import (
    ParseStats,
    largest_wcc,
    load_graph,
    build_graph,
    parse_edge_tsv,
    parse_ntriples,
    save_graph,
)
from .louvain import louvain_cluster, read_assignment_tsv, write_assignment_tsv
from .sage import SageParams, WalkConfig, train_embeddings
from .sentiment import JointConfig, TrainConfig, evaluate, paired_confusion, train_joint, train_static
from .two_level import (
    UNK,
    FLAG_ZEROED,
    TwoLevelTable,
    build_aspect_subgraph,
    build_two_level_table,
    fill_entities,
    load_entity_map,
)
from .util import file_hash, substream


class PipelineError(RuntimeError):
    pass


DEFAULTS = {
    "seed": 0,
    "deterministic": True,
    "paths.kg": "",
    "paths.train": "",
    "paths.test": "",
    "paths.entity_map": "",
    "paths.features": "",
    "paths.artifacts": "artifacts",
    "stages.ingest": True,
    "stages.cluster": True,
    "stages.cluster-graph": True,
    "stages.embed-clusters": True,
    "stages.embed-subgraph": True,
    "stages.idd": True,
    "stages.train-static": True,
    "stages.train-joint": True,
    "stages.explain": True,
    "stages.evaluate": True,
    "stages.report": True,
    "graph.node_budget": 0,
    "graph.edge_budget": 0,
    "louvain.min_gain": 1e-6,
    "louvain.max_levels": 10,
    "louvain.level": -1,
    "sage.dim": 50,
    "sage.hidden_dim": 50,
    "sage.fanout1": 25,
    "sage.fanout2": 10,
    "sage.negatives": 5,
    "sage.walk_length": 5,
    "sage.walks_per_node": 50,
    "sage.window": 5,
    "sage.lr": 3e-5,
    "sage.batch_size": 512,
    "sage.cluster_epochs": 10,
    "sage.subgraph_epochs": 10,
    "features.provider": "toy",
    "features.dim": 32,
    "alsc.lr": 3e-5,
    "alsc.batch_size": 32,
    "alsc.epochs": 7,
    "alsc.alpha1": 1.0,
    "alsc.alpha2": 1.0,
    "alsc.batch_graph": 512,
    "alsc.embedding_lr": -1.0,
    "alsc.bucket_edges": "20,50,100",
    "probe.n": 10,
    "probe.per_aspect": 1,
    "probe.samples": 20,
    "probe.dim": 100,
    "probe.lam": 0.01,
    "probe.lr": 1e-5,
    "probe.batch_size": 128,
    "probe.epochs": 100,
    "probe.zero_on_agreement": False,
    "explain.k": 16,
    "explain.lam_div": 0.1,
    "explain.top_m": 3,
    "explain.budget": 5,
    "explain.hidden": 32,
    "explain.sparsity": 0.05,
    "explain.mc_samples": 8,
    "explain.t_start": 1.0,
    "explain.t_end": 0.1,
    "explain.lr": 1e-2,
    "explain.concept_epochs": 40,
    "explain.graph_epochs": 8,
    "explain.sig_lr": 0.05,
    "explain.sig_epochs": 100,
    "explain.lam": 1.0,
    "explain.refine_epochs": 2,
    "explain.refine_lr": 1e-3,
}


def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false"):
            raise PipelineError("key %s expects true/false, got %r" % (key, raw))
        return low == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


class PipelineConfig:
    """Flat ``key = value`` configuration, namespaced by module."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise PipelineError("unknown config key %r" % k)
            self.values[k] = v

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise PipelineError("config line %d has no '=': %r" % (lineno, line))
            key, raw = stripped.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise PipelineError("unknown config key %r (line %d)" % (key, lineno))
            values[key] = _coerce(key, raw)
        return cls(values)

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls.from_text(f.read())

    def get(self, key):
        return self.values[key]

    def override(self, **kwargs):
        out = PipelineConfig(self.values)
        for k, v in kwargs.items():
            key = k.replace("__", ".")
            if key not in DEFAULTS:
                raise PipelineError("unknown config key %r" % key)
            out.values[key] = v
        return out

    def bucket_edges(self):
        return tuple(int(x) for x in self.get("alsc.bucket_edges").split(","))

    def canonical_text(self):
        lines = []
        for key in sorted(self.values):
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append("%s = %s" % (key, value))
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    def validate_paths(self):
        for key in ("paths.kg", "paths.train", "paths.test"):
            path = self.get(key)
            if not path or not os.path.exists(path):
                raise PipelineError("%s does not exist: %r" % (key, path))
        for key in ("paths.entity_map", "paths.features"):
            path = self.get(key)
            if path and not os.path.exists(path):
                raise PipelineError("%s does not exist: %r" % (key, path))


STAGE_ORDER = [
    "ingest",
    "cluster",
    "cluster-graph",
    "embed-clusters",
    "embed-subgraph",
    "idd",
    "train-static",
    "train-joint",
    "explain",
    "evaluate",
    "report",
]

STAGE_DEPS = {
    "ingest": [],
    "cluster": ["ingest"],
    "cluster-graph": ["cluster"],
    "embed-clusters": ["cluster-graph"],
    "embed-subgraph": ["ingest"],
    "idd": ["embed-clusters", "embed-subgraph"],
    "train-static": ["embed-clusters", "embed-subgraph"],
    "train-joint": ["embed-clusters", "embed-subgraph"],
    "explain": ["train-joint"],
    "evaluate": ["train-static", "train-joint"],
    "report": ["evaluate"],
}


class Manifest:
    def __init__(self, path):
        self.path = path
        if os.path.exists(path):
            with open(path) as f:
                self.data = json.load(f)
        else:
            self.data = {"stages": {}}

    def save(self):
        with open(self.path, "w") as f:
            json.dump(self.data, f, sort_keys=True, indent=1)
            f.write("\n")

    def record(self, stage, config, outputs):
        self.data["stages"][stage] = {
            "config_hash": config.hash(),
            "config_text": config.canonical_text(),
            "seed": config.get("seed"),
            "outputs": {os.path.basename(p): file_hash(p) for p in outputs},
        }
        self.save()

    def entry(self, stage):
        return self.data["stages"].get(stage)


def _config_diff(old_text, new_text):
    old = dict(line.split(" = ", 1) for line in old_text.strip().splitlines())
    new = dict(line.split(" = ", 1) for line in new_text.strip().splitlines())
    changed = []
    for key in sorted(set(old) | set(new)):
        if old.get(key) != new.get(key):
            changed.append("%s: %r -> %r" % (key, old.get(key), new.get(key)))
    return changed


@dataclass
class StageIO:
    """Resolved artifact paths for one pipeline run."""

    root: str

    def path(self, name):
        return os.path.join(self.root, name)


def _provider(config):
    if config.get("features.provider") == "toy":
        return ToyTextEncoder(dim=config.get("features.dim"), seed=config.get("seed"))
    if config.get("features.provider") == "file":
        return load_arft(config.get("paths.features"))
    raise PipelineError("unknown feature provider %r" % config.get("features.provider"))


def _load_datasets(config):
    train = load_jsonl(config.get("paths.train"))
    test = load_jsonl(config.get("paths.test"))
    if config.get("paths.entity_map"):
        amap = load_entity_map(config.get("paths.entity_map"))
        fill_entities(train, amap)
        fill_entities(test, amap)
    return train, test


def _load_subgraph(io):
    sub = load_graph(io.path("subgraph.arkg"))
    node_map = []
    with open(io.path("subgraph_nodes.tsv")) as f:
        for line in f:
            if not line.strip() or line.startswith("#"):
                continue
            local, kg_id = line.split("\t")[:2]
            node_map.append(int(kg_id))
    return sub, np.asarray(node_map, dtype=np.int64)


def _resolved_entities(config, io):
    kg = load_graph(io.path("kg_wcc.arkg"))
    train, test = _load_datasets(config)
    ids_train = sentiment.resolve_dataset_entities(train, kg)
    ids_test = sentiment.resolve_dataset_entities(test, kg)
    return kg, train, test, ids_train, ids_test


def _load_flags(io):
    flags = {}
    path = io.path("flags.tsv")
    if not os.path.exists(path):
        return flags
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            flags[int(parts[0])] = parts[1]
    return flags


def _mask_flagged(entity_ids, flags):
    out = entity_ids.copy()
    for i, e in enumerate(out):
        if flags.get(int(e)) == FLAG_ZEROED:
            out[i] = UNK
    return out


def _two_level_table(io, config):
    """Corrected table when the audit ran, otherwise the raw assembly."""
    if os.path.exists(io.path("z_mod.arem")):
        return TwoLevelTable.load(io.path("z_mod.arem"), io.path("z_mod.flags.tsv"))
    return TwoLevelTable.load(io.path("two_level.arem"), io.path("two_level.flags.tsv"))


# ---------------------------------------------------------------------------
# stage implementations
# ---------------------------------------------------------------------------


def _stage_ingest(config, io):
    path = config.get("paths.kg")
    stats = ParseStats()
    budgets = {
        "node_budget": config.get("graph.node_budget") or None,
        "edge_budget": config.get("graph.edge_budget") or None,
    }
    with open(path, "rb") as f:
        if path.endswith((".nt", ".ntriples")):
            pairs = parse_ntriples(f, stats)
        else:
            pairs = parse_edge_tsv(f, stats)
        g = build_graph(pairs, **budgets)
    wcc, node_map = largest_wcc(g)
    save_graph(wcc, io.path("kg_wcc.arkg"))
    info = {
        "nodes": g.node_count,
        "edges": g.edge_count,
        "wcc_nodes": wcc.node_count,
        "wcc_edges": wcc.edge_count,
        "wcc_fraction": (wcc.node_count / g.node_count) if g.node_count else 0.0,
        "skipped_literal_objects": stats.literal_objects,
        "skipped_malformed": stats.malformed,
        "skipped_blank_nodes": stats.blank_nodes,
    }
    with open(io.path("ingest_stats.json"), "w") as f:
        json.dump(info, f, sort_keys=True, indent=1)
        f.write("\n")
    return [io.path("kg_wcc.arkg"), io.path("ingest_stats.json")]


def _stage_cluster(config, io):
    g = load_graph(io.path("kg_wcc.arkg"))
    hierarchy = louvain_cluster(
        g,
        min_gain=config.get("louvain.min_gain"),
        max_levels=config.get("louvain.max_levels"),
        seed=config.get("seed"),
    )
    level = config.get("louvain.level")
    assignment = hierarchy.assignment(level)
    idx = range(hierarchy.num_levels)[level]
    write_assignment_tsv(
        io.path("clusters.tsv"), assignment, idx, hierarchy.modularities[idx]
    )
    with open(io.path("hierarchy.json"), "w") as f:
        json.dump(
            {
                "level_sizes": hierarchy.cluster_counts(),
                "modularities": hierarchy.modularities,
            },
            f,
            sort_keys=True,
            indent=1,
        )
        f.write("\n")
    return [io.path("clusters.tsv"), io.path("hierarchy.json")]


def _stage_cluster_graph(config, io):
    g = load_graph(io.path("kg_wcc.arkg"))
    assignment = read_assignment_tsv(io.path("clusters.tsv"))
    cg = build_cluster_graph(g, assignment)
    write_weighted_edge_tsv(cg, io.path("cluster_graph.tsv"))
    write_cluster_sizes_tsv(cg, io.path("cluster_sizes.tsv"))
    return [io.path("cluster_graph.tsv"), io.path("cluster_sizes.tsv")]


def _sage_kwargs(config, epochs_key):
    return dict(
        dim=config.get("sage.dim"),
        hidden_dim=config.get("sage.hidden_dim"),
        fanouts=(config.get("sage.fanout1"), config.get("sage.fanout2")),
        negatives=config.get("sage.negatives"),
        walk=WalkConfig(
            walk_length=config.get("sage.walk_length"),
            walks_per_node=config.get("sage.walks_per_node"),
            window=config.get("sage.window"),
            seed=config.get("seed"),
        ),
        lr=config.get("sage.lr"),
        batch_size=config.get("sage.batch_size"),
        epochs=config.get(epochs_key),
        seed=config.get("seed"),
    )


def _stage_embed_clusters(config, io):
    cg = read_weighted_edge_tsv(io.path("cluster_graph.tsv"), io.path("cluster_sizes.tsv"))
    result = train_embeddings(cg, **_sage_kwargs(config, "sage.cluster_epochs"))
    save_arem(io.path("z_clusters.arem"), result.table.vectors)
    with open(io.path("z_clusters_trace.tsv"), "w") as f:
        for epoch, loss in enumerate(result.loss_trace):
            f.write("%d\t%r\n" % (epoch, loss))
    return [io.path("z_clusters.arem"), io.path("z_clusters_trace.tsv")]


def _stage_embed_subgraph(config, io):
    kg, train, test, ids_train, ids_test = _resolved_entities(config, io)
    entity_ids = np.concatenate([ids_train, ids_test])
    sub, node_map = build_aspect_subgraph(kg, entity_ids)
    save_graph(sub, io.path("subgraph.arkg"))
    with open(io.path("subgraph_nodes.tsv"), "w") as f:
        for local, kg_id in enumerate(node_map):
            f.write("%d\t%d\t%s\n" % (local, kg_id, kg.labels[kg_id]))
    result = train_embeddings(sub, **_sage_kwargs(config, "sage.subgraph_epochs"))
    save_arem(io.path("z_subgraph.arem"), result.table.vectors)
    result.params.save(io.path("sage_subgraph.artb"))
    return [
        io.path("subgraph.arkg"),
        io.path("subgraph_nodes.tsv"),
        io.path("z_subgraph.arem"),
        io.path("sage_subgraph.artb"),
    ]


def _load_embeddings(io):
    z_clusters = EmbeddingTable(
        np.arange(len(load_arem(io.path("z_clusters.arem")))),
        load_arem(io.path("z_clusters.arem")),
    )
    sub, node_map = _load_subgraph(io)
    z_sub = EmbeddingTable(node_map, load_arem(io.path("z_subgraph.arem")))
    assignment = read_assignment_tsv(io.path("clusters.tsv"))
    return z_clusters, sub, node_map, z_sub, assignment


def _stage_idd(config, io):
    kg, train, test, ids_train, ids_test = _resolved_entities(config, io)
    z_clusters, sub, node_map, z_sub, assignment = _load_embeddings(io)
    table = build_two_level_table(
        z_clusters, z_sub, assignment, np.concatenate([ids_train, ids_test])
    )
    table.save(io.path("two_level.arem"), io.path("two_level.flags.tsv"))

    provider = _provider(config)
    h_map = probing.aspect_text_embeddings(train, provider, ids_train)
    auditor = probing.DisambiguationAuditor(
        n=config.get("probe.n"),
        per_aspect=config.get("probe.per_aspect"),
        samples=config.get("probe.samples"),
        dim_b=config.get("probe.dim"),
        lam=config.get("probe.lam"),
        lr=config.get("probe.lr"),
        batch_size=config.get("probe.batch_size"),
        epochs=config.get("probe.epochs"),
        seed=config.get("seed"),
        zero_on_agreement=config.get("probe.zero_on_agreement"),
    )
    audit_table = table
    known = [e for e in audit_table.ids if int(e) in h_map]
    if len(known) < config.get("probe.n") + 2:
        raise PipelineError(
            "too few aspects with text features to audit (%d)" % len(known)
        )
    auditor.fit(table, h_map)
    corrected = auditor.audit(table, h_map)
    corrected.save(io.path("z_mod.arem"), io.path("z_mod.flags.tsv"))
    auditor.probe_.save(io.path("probe_b.arem"))
    probing.write_flags_tsv(io.path("flags.tsv"), auditor.flags_, auditor.margins_)
    with open(io.path("probe_trace.tsv"), "w") as f:
        for epoch, (loss, margin) in enumerate(auditor.trace_):
            f.write("%d\t%r\t%r\n" % (epoch, loss, margin))
    return [
        io.path("two_level.arem"),
        io.path("two_level.flags.tsv"),
        io.path("z_mod.arem"),
        io.path("z_mod.flags.tsv"),
        io.path("probe_b.arem"),
        io.path("flags.tsv"),
        io.path("probe_trace.tsv"),
    ]


def _stage_train_static(config, io):
    kg, train, test, ids_train, ids_test = _resolved_entities(config, io)
    provider = _provider(config)
    flags = _load_flags(io)
    table = _two_level_table(io, config)
    ids_masked = _mask_flagged(ids_train, flags)
    cfg = TrainConfig(
        lr=config.get("alsc.lr"),
        batch_size=config.get("alsc.batch_size"),
        epochs=config.get("alsc.epochs"),
        seed=config.get("seed"),
    )
    head_text, trace_text = train_static(train, provider, cfg=cfg)
    head_static, trace_static = train_static(
        train, provider, table=table, entity_ids=ids_masked, cfg=cfg
    )
    head_text.save(io.path("head_text.artb"))
    head_static.save(io.path("head_static.artb"))
    with open(io.path("trace_static.tsv"), "w") as f:
        for epoch, (a, b) in enumerate(zip(trace_text, trace_static)):
            f.write("%d\t%r\t%r\n" % (epoch, a, b))
    return [io.path("head_text.artb"), io.path("head_static.artb"), io.path("trace_static.tsv")]


def _stage_train_joint(config, io):
    kg, train, test, ids_train, ids_test = _resolved_entities(config, io)
    provider = _provider(config)
    flags = _load_flags(io)
    z_clusters, sub, node_map, z_sub, assignment = _load_embeddings(io)
    ids_masked = _mask_flagged(ids_train, flags)
    emb_lr = config.get("alsc.embedding_lr")
    cfg = JointConfig(
        alpha1=config.get("alsc.alpha1"),
        alpha2=config.get("alsc.alpha2"),
        lr=config.get("alsc.lr"),
        embedding_lr=None if emb_lr < 0 else emb_lr,
        batch_cls=config.get("alsc.batch_size"),
        batch_graph=config.get("alsc.batch_graph"),
        epochs=config.get("alsc.epochs"),
        negatives=config.get("sage.negatives"),
        walk=WalkConfig(
            walk_length=config.get("sage.walk_length"),
            walks_per_node=config.get("sage.walks_per_node"),
            window=config.get("sage.window"),
            seed=config.get("seed"),
        ),
        seed=config.get("seed"),
    )
    head, z_joint, trace = train_joint(
        train, provider, sub, node_map, z_clusters, z_sub, assignment, ids_masked, cfg
    )
    head.save(io.path("head_joint.artb"))
    save_arem(io.path("z_subgraph_joint.arem"), z_joint.vectors)
    with open(io.path("trace_joint.tsv"), "w") as f:
        f.write("# alpha1=%r alpha2=%r\n" % (trace.alpha1, trace.alpha2))
        for step, (c, g) in enumerate(zip(trace.cls_losses, trace.graph_losses)):
            f.write("%d\t%r\t%r\t%r\n" % (step, c, g, trace.alpha1 * c + trace.alpha2 * g))
    return [
        io.path("head_joint.artb"),
        io.path("z_subgraph_joint.arem"),
        io.path("trace_joint.tsv"),
    ]


def _joint_feature_parts(config, io, dataset, entity_ids):
    """Const feature blocks matching the joint head's layout."""
    provider = _provider(config)
    z_clusters, sub, node_map, z_sub, assignment = _load_embeddings(io)
    z_joint = EmbeddingTable(node_map, load_arem(io.path("z_subgraph_joint.arem")))
    table = build_two_level_table(z_clusters, z_joint, assignment, entity_ids)
    return provider, table


def _stage_explain(config, io):
    kg, train, test, ids_train, ids_test = _resolved_entities(config, io)
    provider = _provider(config)
    if not hasattr(provider, "encode_tokens"):
        raise PipelineError("explain stage needs a token-level feature provider (toy)")
    flags = _load_flags(io)
    z_clusters, sub, node_map, z_sub, assignment = _load_embeddings(io)
    params = SageParams.load(io.path("sage_subgraph.artb"))
    head = sentiment.SentimentHead.load(io.path("head_joint.artb"))
    z_joint = EmbeddingTable(node_map, load_arem(io.path("z_subgraph_joint.arem")))

    kg2local = {int(k): i for i, k in enumerate(node_map)}
    zc_rows = np.zeros((sub.node_count, z_clusters.dim))
    for local, kg_id in enumerate(node_map):
        zc_rows[local] = z_clusters.lookup(int(assignment[kg_id]))
    ctx = ex.GraphContext(sub, params, zc_rows, node_features=z_sub.vectors)

    def build_model(dataset, ids):
        ids = _mask_flagged(ids, flags)
        h_rows = sentiment.text_matrix(dataset, provider)
        dz = z_clusters.dim + z_joint.dim
        z_rows = np.zeros((len(dataset), dz))
        locals_ = np.full(len(dataset), -1, dtype=np.int64)
        for i, e in enumerate(ids):
            e = int(e)
            if e == UNK:
                continue
            locals_[i] = kg2local[e]
            z_rows[i] = np.concatenate(
                [z_clusters.lookup(int(assignment[e])), z_joint.lookup(e)]
            )
        return ex.ExplainedModel(head, provider, dataset, h_rows, z_rows, locals_, ctx)

    model_train = build_model(train, ids_train)
    model_test = build_model(test, ids_test)

    concept_model, concept_trace = ex.train_concepts(
        model_train,
        k=config.get("explain.k"),
        lam_div=config.get("explain.lam_div"),
        lr=config.get("explain.lr"),
        epochs=config.get("explain.concept_epochs"),
        seed=config.get("seed"),
    )
    graph_explainer, graph_trace = ex.train_graph_explainer(
        model_train,
        hidden=config.get("explain.hidden"),
        sparsity=config.get("explain.sparsity"),
        mc_samples=config.get("explain.mc_samples"),
        t_start=config.get("explain.t_start"),
        t_end=config.get("explain.t_end"),
        lr=config.get("explain.lr"),
        epochs=config.get("explain.graph_epochs"),
        seed=config.get("seed"),
    )

    top_m = config.get("explain.top_m")
    budget = config.get("explain.budget")
    counts_local = {}
    for inst, e in zip(train, ids_train):
        e = int(e)
        if e in kg2local:
            counts_local[kg2local[e]] = counts_local.get(kg2local[e], 0) + 1

    def explanations_for(model):
        text_expl, graph_expl = [], []
        for i in range(len(model.dataset)):
            inst = model.dataset[i]
            _, tokens = provider.encode_tokens(inst.tokens, inst.aspect_span)
            ranked, _scores = ex.extract_text_explanation(tokens, concept_model, top_m)
            text_expl.append(ranked)
            local = int(model.locals_[i])
            if local >= 0:
                sub_expl = ex.extract_subgraph(local, graph_explainer, ctx, budget, counts_local)
                graph_expl.append(sub_expl)
            else:
                graph_expl.append(None)
        return text_expl, graph_expl

    train_text, train_graph = explanations_for(model_train)
    labels_t, labels_g = [], []
    for i in range(len(train)):
        nodes = train_graph[i].nodes if train_graph[i] is not None else []
        st, sg = ex.perturb_and_label(model_train, i, train_text[i], nodes)
        labels_t.append(st)
        labels_g.append(sg)

    features_train = np.stack([model_train.features(i) for i in range(len(train))])
    sig_model, sig_trace = ex.train_significance(
        features_train,
        labels_t,
        labels_g,
        lr=config.get("explain.sig_lr"),
        epochs=config.get("explain.sig_epochs"),
        seed=config.get("seed"),
    )
    concept_model, graph_explainer, sig_model, refine_trace = ex.joint_refine(
        model_train,
        concept_model,
        graph_explainer,
        sig_model,
        labels_t,
        labels_g,
        lam=config.get("explain.lam"),
        lr=config.get("explain.refine_lr"),
        epochs=config.get("explain.refine_epochs"),
        mc_samples=2,
        seed=config.get("seed"),
    )

    test_text, test_graph = explanations_for(model_test)
    records = []
    modes = []
    improved = {}
    for i in range(len(test)):
        inst = test[i]
        nodes = test_graph[i].nodes if test_graph[i] is not None else []
        st, sg = ex.perturb_and_label(model_test, i, test_text[i], nodes)
        feats = model_test.features(i)
        st_pred, sg_pred = sig_model.predict(feats[None, :])
        mode = ex.mode_of(float(st_pred[0]), float(sg_pred[0]))
        modes.append(mode)
        top_entity = None
        if test_graph[i] is not None and test_graph[i].top_node >= 0:
            top_entity = sub.labels[test_graph[i].top_node] if sub.labels else str(
                int(node_map[test_graph[i].top_node])
            )
        records.append(
            {
                "id": inst.id,
                "text_tokens": [inst.tokens[t] for t in test_text[i]],
                "graph_edges": []
                if test_graph[i] is None
                else [
                    [int(node_map[a]), int(node_map[b]), float(p)]
                    for (a, b), p in zip(test_graph[i].edges, test_graph[i].probabilities)
                ],
                "top_entity": top_entity,
                "s_t": int(st),
                "s_g": int(sg),
                "S_t": float(st_pred[0]),
                "S_g": float(sg_pred[0]),
                "mode": mode,
            }
        )
    ex.write_explanations_jsonl(io.path("explanations.jsonl"), records)
    ex.write_mode_distribution_tsv(
        io.path("mode_distribution.tsv"), ex.mode_distribution(modes), improved
    )
    with open(io.path("explain_trace.tsv"), "w") as f:
        f.write("# concept\n")
        for epoch, loss in enumerate(concept_trace):
            f.write("concept\t%d\t%r\n" % (epoch, loss))
        f.write("# graph\n")
        for epoch, loss in enumerate(graph_trace):
            f.write("graph\t%d\t%r\n" % (epoch, loss))
        f.write("# significance\n")
        for epoch, loss in enumerate(sig_trace):
            f.write("significance\t%d\t%r\n" % (epoch, loss))
        f.write("# refine (weighted_text weighted_graph bce_t bce_g total)\n")
        for step in range(len(refine_trace.total)):
            f.write(
                "refine\t%d\t%r\t%r\t%r\t%r\t%r\n"
                % (
                    step,
                    refine_trace.weighted_text[step],
                    refine_trace.weighted_graph[step],
                    refine_trace.bce_text[step],
                    refine_trace.bce_graph[step],
                    refine_trace.total[step],
                )
            )
    return [
        io.path("explanations.jsonl"),
        io.path("mode_distribution.tsv"),
        io.path("explain_trace.tsv"),
    ]


def _stage_evaluate(config, io):
    kg, train, test, ids_train, ids_test = _resolved_entities(config, io)
    provider = _provider(config)
    flags = _load_flags(io)
    table = _two_level_table(io, config)
    ids_test_masked = _mask_flagged(ids_test, flags)
    edges = config.bucket_edges()
    train_counts = train.aspect_counts()

    head_text = sentiment.SentimentHead.load(io.path("head_text.artb"))
    head_static = sentiment.SentimentHead.load(io.path("head_static.artb"))
    head_joint = sentiment.SentimentHead.load(io.path("head_joint.artb"))
    provider2, joint_table = _joint_feature_parts(
        config, io, test, np.concatenate([ids_train, ids_test])
    )

    report_text = evaluate(
        head_text, test, provider, train_counts=train_counts, bucket_edges=edges
    )
    report_static = evaluate(
        head_static, test, provider, table=table, entity_ids=ids_test_masked,
        train_counts=train_counts, bucket_edges=edges,
    )
    report_joint = evaluate(
        head_joint, test, provider, table=joint_table, entity_ids=ids_test_masked,
        train_counts=train_counts, bucket_edges=edges,
    )

    h = sentiment.text_matrix(test, provider)
    y = test.labels()
    pred_base = head_text.predict(h)
    fj = np.concatenate(
        [h, sentiment.entity_matrix(test, joint_table, ids_test_masked)], axis=1
    )
    pred_joint = head_joint.predict(fj)
    paired = paired_confusion(y, pred_base, pred_joint)

    with open(io.path("model_comparison.tsv"), "w") as f:
        f.write("model\taccuracy\tmacro_f1\n")
        f.write("text-baseline\t%.4f\t%.4f\n" % (report_text.accuracy, report_text.macro_f1))
        f.write("static\t%.4f\t%.4f\n" % (report_static.accuracy, report_static.macro_f1))
        f.write("joint\t%.4f\t%.4f\n" % (report_joint.accuracy, report_joint.macro_f1))
    with open(io.path("paired_confusion.tsv"), "w") as f:
        f.write("\tjoint_correct\tjoint_incorrect\n")
        f.write("baseline_correct\t%d\t%d\n" % (paired[0, 0], paired[0, 1]))
        f.write("baseline_incorrect\t%d\t%d\n" % (paired[1, 0], paired[1, 1]))
    with open(io.path("buckets.tsv"), "w") as f:
        f.write("bucket\tcount\tbaseline_accuracy\tjoint_accuracy\n")
        for bb, bj in zip(report_text.buckets, report_joint.buckets):
            f.write(
                "%s\t%d\t%.4f\t%.4f\n" % (bb["label"], bb["count"], bb["accuracy"], bj["accuracy"])
            )
    with open(io.path("categories.tsv"), "w") as f:
        f.write("category\terrors\ttotal\n")
        for cat in sorted(report_joint.categories):
            err, tot = report_joint.categories[cat]
            f.write("%s\t%d\t%d\n" % (cat, err, tot))
    outputs = [
        io.path("model_comparison.tsv"),
        io.path("paired_confusion.tsv"),
        io.path("buckets.tsv"),
        io.path("categories.tsv"),
    ]

    annotated = [inst.disambiguation for inst in test if inst.disambiguation]
    if flags and annotated:
        planted, detected, clean, false_pos = 0, 0, 0, 0
        for inst, e in zip(test, ids_test):
            if not inst.disambiguation or int(e) == UNK:
                continue
            flagged = flags.get(int(e)) == FLAG_ZEROED
            if inst.disambiguation == "id":
                planted += 1
                detected += int(flagged)
            elif inst.disambiguation == "cd":
                clean += 1
                false_pos += int(flagged)
        with open(io.path("detection.tsv"), "w") as f:
            f.write("category\tflagged\ttotal\n")
            f.write("id\t%d\t%d\n" % (detected, planted))
            f.write("cd\t%d\t%d\n" % (false_pos, clean))
        outputs.append(io.path("detection.tsv"))

    with open(io.path("metrics_joint.txt"), "w") as f:
        f.write(report_joint.to_text())
    with open(io.path("metrics_baseline.txt"), "w") as f:
        f.write(report_text.to_text())
    outputs += [io.path("metrics_joint.txt"), io.path("metrics_baseline.txt")]
    return outputs


def _stage_report(config, io):
    sections = []
    with open(io.path("model_comparison.tsv")) as f:
        sections.append("== model comparison (accuracy / macro-F1) ==\n" + f.read())
    with open(io.path("paired_confusion.tsv")) as f:
        sections.append("== baseline vs joint confusion ==\n" + f.read())
    with open(io.path("buckets.tsv")) as f:
        sections.append("== accuracy by training-count bucket ==\n" + f.read())
    with open(io.path("categories.tsv")) as f:
        sections.append("== error fractions by disambiguation category ==\n" + f.read())
    if os.path.exists(io.path("detection.tsv")):
        with open(io.path("detection.tsv")) as f:
            sections.append("== disambiguation detection ==\n" + f.read())
    if os.path.exists(io.path("mode_distribution.tsv")):
        with open(io.path("mode_distribution.tsv")) as f:
            sections.append("== explanation mode distribution ==\n" + f.read())
    else:
        sections.append("== explanation mode distribution ==\n(no explanation artifacts)\n")
    text = "\n".join(sections)
    with open(io.path("report.txt"), "w") as f:
        f.write(text)
    return [io.path("report.txt")]


_STAGES = {
    "ingest": _stage_ingest,
    "cluster": _stage_cluster,
    "cluster-graph": _stage_cluster_graph,
    "embed-clusters": _stage_embed_clusters,
    "embed-subgraph": _stage_embed_subgraph,
    "idd": _stage_idd,
    "train-static": _stage_train_static,
    "train-joint": _stage_train_joint,
    "explain": _stage_explain,
    "evaluate": _stage_evaluate,
    "report": _stage_report,
}


def run_stage(name, config, force=False):
    """Run one stage after verifying its upstream artifacts are current."""
    if name not in _STAGES:
        raise PipelineError("unknown stage %r" % name)
    os.makedirs(config.get("paths.artifacts"), exist_ok=True)
    io = StageIO(config.get("paths.artifacts"))
    manifest = Manifest(io.path("manifest.json"))
    for dep in STAGE_DEPS[name]:
        if not config.get("stages.%s" % dep):
            continue
        entry = manifest.entry(dep)
        if entry is None:
            raise PipelineError("stage %r requires %r; run that stage first" % (name, dep))
        if entry["config_hash"] != config.hash():
            diff = _config_diff(entry["config_text"], config.canonical_text())
            raise PipelineError(
                "stage %r has stale upstream %r (config changed):\n  %s"
                % (name, dep, "\n  ".join(diff) or "(seed or unlisted difference)")
            )
    entry = manifest.entry(name)
    if entry is not None and not force and entry["config_hash"] == config.hash():
        existing = [io.path(p) for p in entry["outputs"]]
        if all(os.path.exists(p) for p in existing) and all(
            file_hash(p) == entry["outputs"][os.path.basename(p)] for p in existing
        ):
            return existing
    outputs = _STAGES[name](config, io)
    manifest.record(name, config, outputs)
    return outputs


def run_pipeline(config, force=False):
    """Run every enabled stage in dependency order; resumable."""
    config.validate_paths()
    results = {}
    for name in STAGE_ORDER:
        if not config.get("stages.%s" % name):
            continue
        results[name] = run_stage(name, config, force=force)
    return results
