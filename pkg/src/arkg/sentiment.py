"""Polarity classification over [text features; entity embedding].

The head is a single affine map with softmax over {P, N, O}. Static
training updates only the head against frozen embeddings; joint training
interleaves classification batches with subgraph co-occurrence batches and
additionally updates the subgraph embedding vectors, while the cluster
half stays frozen throughout.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Var, backward, check_finite
from .cluster_graph import cluster_of
from .data import LABEL_INDEX, LABELS
from .embedding import EmbeddingTable
from .graph import GraphError
from .sage import WalkConfig, negative_distribution, pair_loss_var, sample_negatives, sample_walks
from .tensorio import load_tensors, save_tensors
from .two_level import UNK, resolve_entity
from .util import array_hash, substream


class SentimentHead:
    """Affine map (feature dim -> 3) with softmax output."""

    def __init__(self, dim):
        self.W = np.zeros((dim, 3))
        self.b = np.zeros(3)

    @property
    def dim(self):
        return self.W.shape[0]

    def logits(self, features):
        return features @ self.W + self.b

    def predict_proba(self, features):
        logits = self.logits(features)
        shifted = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)

    def predict(self, features):
        return np.argmax(self.logits(features), axis=-1)

    def copy(self):
        out = SentimentHead(self.dim)
        out.W = self.W.copy()
        out.b = self.b.copy()
        return out

    def hash(self):
        return array_hash(self.W, self.b)

    def save(self, path):
        save_tensors(path, {"W": self.W, "b": self.b})

    @classmethod
    def load(cls, path):
        t = load_tensors(path)
        out = cls(t["W"].shape[0])
        out.W = t["W"]
        out.b = t["b"]
        return out


def predict(head, h, z=None):
    """Probability vector over (P, N, O) for one instance."""
    features = np.concatenate([h, z]) if z is not None else np.asarray(h, dtype=np.float64)
    if features.shape != (head.dim,):
        raise ValueError("feature dim %s does not match head dim %d" % (features.shape, head.dim))
    return head.predict_proba(features)


def alsc_loss(pred, label):
    """Cross-entropy -log pred[label] with a 1e-12 clamp."""
    idx = LABEL_INDEX[label] if isinstance(label, str) else int(label)
    return float(-np.log(np.clip(pred[idx], 1e-12, None)))


def resolve_dataset_entities(dataset, graph):
    """Entity node id per instance (UNK sentinel for unmapped entities)."""
    return np.asarray([resolve_entity(graph, inst.entity) for inst in dataset], dtype=np.int64)


def text_matrix(dataset, provider):
    return np.stack([provider.features(inst)[0] for inst in dataset]).astype(np.float64)


def entity_matrix(dataset, table, entity_ids):
    """Two-level vectors per instance; UNK rows are zero."""
    out = np.zeros((len(dataset), table.dim))
    for i, e in enumerate(entity_ids):
        if int(e) != UNK:
            out[i] = table.lookup(int(e))
    return out


def _one_hot(y):
    out = np.zeros((len(y), len(LABELS)))
    out[np.arange(len(y)), y] = 1.0
    return out


def batch_cross_entropy_var(w, b, features, onehot):
    logits = ad.add(ad.matmul(Var(features), w), b)
    picked = ad.vsum(ad.mul(ad.log_softmax(logits), Var(onehot)), axis=1)
    return -ad.vmean(picked)


@dataclass
class TrainConfig:
    lr: float = 3e-5
    batch_size: int = 32
    epochs: int = 7
    seed: int = 0


def train_static(dataset, provider, table=None, entity_ids=None, cfg=None):
    """Fit the head with all embeddings frozen.

    Returns (head, per-epoch loss trace). The best-training-loss epoch's
    parameters are kept as the final model.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    h = text_matrix(dataset, provider)
    if table is not None:
        if entity_ids is None:
            raise ValueError("entity ids are required when a table is given")
        features = np.concatenate([h, entity_matrix(dataset, table, entity_ids)], axis=1)
    else:
        features = h
    y = dataset.labels()
    head, trace, _ = _fit_head(features, y, cfg)
    return head, trace


def _fit_head(features, y, cfg):
    n, dim = features.shape
    onehot = _one_hot(y)
    w = Var(np.zeros((dim, 3)), requires_grad=True)
    b = Var(np.zeros(3), requires_grad=True)
    opt = Adam([w, b], lr=cfg.lr)
    best = None
    trace = []
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "cls-order", epoch).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            loss = batch_cross_entropy_var(w, b, features[idx], onehot[idx])
            check_finite(loss, "classification loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.value))
        mean_loss = float(np.mean(losses))
        trace.append(mean_loss)
        if best is None or mean_loss < best[0]:
            best = (mean_loss, w.value.copy(), b.value.copy())
    head = SentimentHead(dim)
    head.W, head.b = best[1], best[2]
    return head, trace, (w, b)


@dataclass
class JointConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    lr: float = 3e-5
    embedding_lr: float = None  # defaults to lr
    batch_cls: int = 32
    batch_graph: int = 512
    epochs: int = 7
    negatives: int = 5
    walk: WalkConfig = None
    seed: int = 0


@dataclass
class JointTrace:
    """Per-step component losses; the joint loss recomposes from them."""

    alpha1: float
    alpha2: float
    cls_losses: list = field(default_factory=list)
    graph_losses: list = field(default_factory=list)
    epoch_joint: list = field(default_factory=list)

    def joint_losses(self):
        return [
            self.alpha1 * c + self.alpha2 * g
            for c, g in zip(self.cls_losses, self.graph_losses)
        ]


class _GraphBatcher:
    """Cycles through per-epoch walk-pair pools of the subgraph."""

    def __init__(self, subgraph, walk, negatives, batch, seed):
        self.subgraph = subgraph
        self.walk = walk
        self.negatives = negatives
        self.batch = batch
        self.seed = seed
        self.dist = negative_distribution(subgraph)
        self._pairs = None
        self._negs = None
        self._pos = 0
        self._epoch = -1
        self._fills = 0

    def next_batch(self, epoch):
        if epoch != self._epoch or self._pos >= len(self._pairs):
            self._fills += 1
            rng = substream(self.seed, "joint-walks", epoch, self._fills)
            pairs = sample_walks(self.subgraph, self.walk, rng=rng)
            rng.shuffle(pairs, axis=0)
            self._pairs = pairs
            self._negs = sample_negatives(pairs, self.dist, self.negatives, rng)
            self._pos = 0
            self._epoch = epoch
        lo = self._pos
        self._pos += self.batch
        return self._pairs[lo : lo + self.batch], self._negs[lo : lo + self.batch]


def train_joint(
    dataset,
    provider,
    subgraph,
    node_map,
    z_clusters,
    z_subgraph,
    assignment,
    entity_ids,
    cfg=None,
):
    """End-to-end training: head plus subgraph embeddings, cluster half frozen.

    One co-occurrence batch runs per classification batch, each with its
    own batch size. Returns (head, updated subgraph table, JointTrace); the
    epoch with the best joint training loss provides the final parameters.
    """
    cfg = cfg or JointConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    walk = cfg.walk if cfg.walk is not None else WalkConfig(seed=cfg.seed)
    emb_lr = cfg.lr if cfg.embedding_lr is None else cfg.embedding_lr

    ns = subgraph.node_count
    kg2local = {int(k): i for i, k in enumerate(node_map)}
    z0 = np.stack([z_subgraph.lookup(int(k)) for k in node_map]).astype(np.float64)
    z_var = Var(z0, requires_grad=True)

    h = text_matrix(dataset, provider)
    zc = np.zeros((len(dataset), z_clusters.dim))
    local = np.zeros(len(dataset), dtype=np.int64)
    known = np.zeros(len(dataset))
    for i, e in enumerate(entity_ids):
        e = int(e)
        if e == UNK:
            local[i] = 0
            continue
        if e not in kg2local:
            raise GraphError("entity %d missing from the aspect subgraph" % e)
        local[i] = kg2local[e]
        known[i] = 1.0
        zc[i] = z_clusters.lookup(cluster_of(assignment, e))
    y = dataset.labels()
    onehot = _one_hot(y)
    const = np.concatenate([h, zc], axis=1)

    dim = const.shape[1] + z_var.value.shape[1]
    w = Var(np.zeros((dim, 3)), requires_grad=True)
    b = Var(np.zeros(3), requires_grad=True)
    opt_head = Adam([w, b], lr=cfg.lr)
    opt_emb = Adam([z_var], lr=emb_lr)
    batcher = _GraphBatcher(subgraph, walk, cfg.negatives, cfg.batch_graph, cfg.seed)

    trace = JointTrace(alpha1=cfg.alpha1, alpha2=cfg.alpha2)
    best = None
    n = len(dataset)
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "cls-order", epoch).permutation(n)
        cls_losses, gs_losses = [], []
        for lo in range(0, n, cfg.batch_cls):
            idx = order[lo : lo + cfg.batch_cls]
            rows = ad.take(z_var, local[idx])
            masked = ad.mul(rows, Var(known[idx][:, None]))
            x = ad.concat([Var(const[idx]), masked], axis=1)
            logits = ad.add(ad.matmul(x, w), b)
            picked = ad.vsum(ad.mul(ad.log_softmax(logits), Var(onehot[idx])), axis=1)
            loss_cls = ad.mul(-ad.vmean(picked), cfg.alpha1)
            check_finite(loss_cls, "joint classification loss")
            opt_head.zero_grad()
            opt_emb.zero_grad()
            backward(loss_cls)
            opt_head.step()
            opt_emb.step()

            pairs, negs = batcher.next_batch(epoch)
            loss_gs = ad.mul(pair_loss_var(z_var, pairs, negs), cfg.alpha2)
            check_finite(loss_gs, "joint co-occurrence loss")
            opt_head.zero_grad()
            opt_emb.zero_grad()
            backward(loss_gs)
            opt_emb.step()

            a1 = cfg.alpha1 if cfg.alpha1 else 1.0
            a2 = cfg.alpha2 if cfg.alpha2 else 1.0
            cls_losses.append(float(loss_cls.value) / a1)
            gs_losses.append(float(loss_gs.value) / a2)
        trace.cls_losses.extend(cls_losses)
        trace.graph_losses.extend(gs_losses)
        epoch_joint = cfg.alpha1 * float(np.mean(cls_losses)) + cfg.alpha2 * float(
            np.mean(gs_losses)
        )
        trace.epoch_joint.append(epoch_joint)
        if best is None or epoch_joint < best[0]:
            best = (epoch_joint, w.value.copy(), b.value.copy(), z_var.value.copy())

    head = SentimentHead(dim)
    head.W, head.b = best[1], best[2]
    z_final = EmbeddingTable(np.asarray(node_map, dtype=np.int64), best[3].astype(np.float32))
    return head, z_final, trace


@dataclass
class MetricsReport:
    n: int
    accuracy: float
    macro_f1: float
    per_class_f1: dict
    confusion: np.ndarray
    buckets: list
    categories: dict

    def to_text(self):
        lines = ["instances\t%d" % self.n]
        lines.append("accuracy\t%.4f" % self.accuracy)
        lines.append("macro_f1\t%.4f" % self.macro_f1)
        lines.append("confusion rows=true cols=pred order=%s" % (",".join(LABELS)))
        for i, row in enumerate(self.confusion):
            lines.append("%s\t%s" % (LABELS[i], "\t".join(str(int(x)) for x in row)))
        if self.buckets:
            lines.append("train-count buckets:")
            for bucket in self.buckets:
                lines.append(
                    "%s\tcount=%d\taccuracy=%s"
                    % (
                        bucket["label"],
                        bucket["count"],
                        "%.4f" % bucket["accuracy"] if bucket["count"] else "-",
                    )
                )
        if self.categories:
            lines.append("disambiguation categories (errors/total):")
            for cat in sorted(self.categories):
                err, tot = self.categories[cat]
                lines.append("%s\t%d / %d" % (cat, err, tot))
        return "\n".join(lines) + "\n"


def _f1_scores(confusion):
    scores = {}
    for i, label in enumerate(LABELS):
        tp = confusion[i, i]
        precision = tp / confusion[:, i].sum() if confusion[:, i].sum() else 0.0
        recall = tp / confusion[i, :].sum() if confusion[i, :].sum() else 0.0
        scores[label] = (
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return scores


def bucket_label(count, edges):
    prev = 0
    for e in edges:
        if count <= e:
            return "%d-%d" % (prev, e)
        prev = e + 1
    return "%d+" % prev


def evaluate(
    head,
    dataset,
    provider,
    table=None,
    entity_ids=None,
    train_counts=None,
    bucket_edges=(20, 50, 100),
):
    """Accuracy, macro-F1, confusion matrix, per-bucket accuracy and
    disambiguation-category error counts for a labeled dataset."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    h = text_matrix(dataset, provider)
    if table is not None:
        features = np.concatenate([h, entity_matrix(dataset, table, entity_ids)], axis=1)
    else:
        features = h
    y = dataset.labels()
    preds = head.predict(features)
    confusion = np.zeros((3, 3), dtype=np.int64)
    for t, p in zip(y, preds):
        confusion[t, p] += 1
    accuracy = float((preds == y).mean())
    f1 = _f1_scores(confusion)
    macro = float(np.mean(list(f1.values())))

    buckets = []
    if train_counts is not None:
        stats = {}
        for inst, correct in zip(dataset, preds == y):
            label = bucket_label(train_counts.get(inst.aspect, 0), bucket_edges)
            hit, tot = stats.get(label, (0, 0))
            stats[label] = (hit + int(correct), tot + 1)
        ordered = ["0-%d" % bucket_edges[0]]
        ordered += [
            "%d-%d" % (bucket_edges[i] + 1, bucket_edges[i + 1])
            for i in range(len(bucket_edges) - 1)
        ]
        ordered.append("%d+" % (bucket_edges[-1] + 1))
        for label in ordered:
            hit, tot = stats.get(label, (0, 0))
            buckets.append(
                {"label": label, "count": tot, "accuracy": hit / tot if tot else 0.0}
            )

    categories = {}
    for inst, correct in zip(dataset, preds == y):
        cat = inst.disambiguation or ("unk" if inst.entity == "UNK" else "cd")
        err, tot = categories.get(cat, (0, 0))
        categories[cat] = (err + int(not correct), tot + 1)

    return MetricsReport(
        n=len(dataset),
        accuracy=accuracy,
        macro_f1=macro,
        per_class_f1=f1,
        confusion=confusion,
        buckets=buckets,
        categories=categories,
    )


def paired_confusion(y, pred_base, pred_new):
    """2x2 matrix [[both correct, base only], [new only, both wrong]]."""
    base_ok = np.asarray(pred_base) == np.asarray(y)
    new_ok = np.asarray(pred_new) == np.asarray(y)
    return np.array(
        [
            [int(np.sum(base_ok & new_ok)), int(np.sum(base_ok & ~new_ok))],
            [int(np.sum(~base_ok & new_ok)), int(np.sum(~base_ok & ~new_ok))],
        ],
        dtype=np.int64,
    )


def recompose_joint(trace, tol=1e-9):
    """Check L_joint = a1*L_cls + a2*L_gs from the component traces."""
    joint = trace.joint_losses()
    for c, g, j in zip(trace.cls_losses, trace.graph_losses, joint):
        if abs(trace.alpha1 * c + trace.alpha2 * g - j) > tol:
            return False
    return True
