"""Post-hoc multi-modal explanations with mode significance.

Two unimodal explainers run against a frozen prediction model: a global
concept model over text features (scored tokens) and a parameterized edge
scorer over the aspect subgraph (scored edges, relaxed-Bernoulli masks).
Perturbing each mode's explanation and checking whether the predicted
label flips yields significance labels; small sigmoid predictors learn
those labels and then reweight the explainer losses in a joint objective.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Var, backward, check_finite
from .data import MASK_TOKEN
from .util import substream

MODES = ("Text", "Graph", "Both", "None")


def mode_of(s_text, s_graph, threshold=0.5):
    t = s_text >= threshold
    g = s_graph >= threshold
    if t and g:
        return "Both"
    if t:
        return "Text"
    if g:
        return "Graph"
    return "None"


# ---------------------------------------------------------------------------
# frozen model under explanation
# ---------------------------------------------------------------------------


class GraphContext:
    """Subgraph side of the model: weighted full-neighborhood encoder.

    ``node_features`` are the frozen per-node vectors fed to the edge
    scorer; ``zc_rows`` hold the (frozen) cluster half per local node.
    """

    def __init__(self, subgraph, params, zc_rows, node_features=None):
        self.subgraph = subgraph
        self.params = params
        self.zc_rows = np.asarray(zc_rows, dtype=np.float64)
        if node_features is None:
            node_features = np.zeros((subgraph.node_count, params.out_dim))
        self.node_features = np.asarray(node_features, dtype=np.float64)
        self._ego_cache = {}

    def ego_edges(self, center):
        """Edges feeding the 2-layer encoding of ``center`` (a < b pairs)."""
        if center in self._ego_cache:
            return self._ego_cache[center]
        g = self.subgraph
        inner = [center] + [int(v) for v in g.neighbors_of(center)]
        seen = set()
        edges = []
        for a in inner:
            for b in g.neighbors_of(a):
                key = (min(a, int(b)), max(a, int(b)))
                if key not in seen:
                    seen.add(key)
                    edges.append(key)
        edges = np.asarray(sorted(edges), dtype=np.int64).reshape(-1, 2)
        self._ego_cache[center] = edges
        return edges

    def encode_weighted_var(self, center, edges, weights):
        """Differentiable encoding of ``center`` with per-edge weights.

        ``weights`` is a Var aligned with ``edges``; absent edges count as
        weight zero, so removing a vertex = zeroing its incident edges.
        """
        g = self.subgraph
        index = {}
        for t, (a, b) in enumerate(edges):
            index[(int(a), int(b))] = t
            index[(int(b), int(a))] = t
        xv = self.params.X.value
        w1, b1 = self.params.W1, self.params.b1
        w2, b2 = self.params.W2, self.params.b2

        def hidden(v):
            nbrs = [int(u) for u in g.neighbors_of(v)]
            if nbrs:
                ws = ad.take(weights, [index[(v, u)] for u in nbrs])
                num = ad.matmul(ad.reshape(ws, (1, len(nbrs))), Var(xv[nbrs]))
                agg = ad.reshape(
                    ad.div(num, ad.add(ad.vsum(ws), 1e-12)), (xv.shape[1],)
                )
            else:
                agg = Var(np.zeros(xv.shape[1]))
            pre = ad.add(ad.matmul(ad.concat([Var(xv[v]), agg]), w1), b1)
            return ad.relu(pre)

        h_center = hidden(center)
        nbrs = [int(u) for u in g.neighbors_of(center)]
        if nbrs:
            hs = [hidden(u) for u in nbrs]
            stacked = ad.concat([ad.reshape(h, (1, len(h.value))) for h in hs], axis=0)
            ws = ad.take(weights, [index[(center, u)] for u in nbrs])
            num = ad.matmul(ad.reshape(ws, (1, len(nbrs))), stacked)
            agg = ad.reshape(
                ad.div(num, ad.add(ad.vsum(ws), 1e-12)), (h_center.value.shape[0],)
            )
        else:
            agg = Var(np.zeros(h_center.value.shape[0]))
        out = ad.add(ad.matmul(ad.concat([h_center, agg]), w2), b2)
        return ad.l2_normalize_rows(ad.reshape(out, (1, len(out.value))))

    def encode_weighted(self, center, edge_weights=None):
        edges = self.ego_edges(center)
        if edge_weights is None:
            edge_weights = np.ones(len(edges))
        z = self.encode_weighted_var(center, edges, Var(np.asarray(edge_weights, dtype=np.float64)))
        return z.value.reshape(-1)

    def z_full(self, center):
        return np.concatenate([self.zc_rows[center], self.encode_weighted(center)])


class ExplainedModel:
    """Frozen head + per-instance features, the target of all explainers."""

    def __init__(self, head, provider, dataset, h_rows, z_rows, locals_=None, ctx=None):
        self.head = head
        self.provider = provider
        self.dataset = dataset
        self.h_rows = np.asarray(h_rows, dtype=np.float64)
        self.z_rows = np.asarray(z_rows, dtype=np.float64)
        if self.z_rows.ndim == 1:
            self.z_rows = self.z_rows.reshape(len(dataset), -1)
        self.locals_ = (
            np.full(len(dataset), -1, dtype=np.int64) if locals_ is None else np.asarray(locals_)
        )
        self.ctx = ctx

    @classmethod
    def from_encoder(cls, head, provider, dataset, h_rows, locals_, ctx):
        """Reference model whose z part is recomputed by the weighted encoder."""
        dz = ctx.zc_rows.shape[1] + ctx.params.out_dim
        z_rows = np.zeros((len(dataset), dz))
        cache = {}
        for i, loc in enumerate(locals_):
            loc = int(loc)
            if loc < 0:
                continue
            if loc not in cache:
                cache[loc] = ctx.z_full(loc)
            z_rows[i] = cache[loc]
        return cls(head, provider, dataset, h_rows, z_rows, locals_, ctx)

    def features(self, i, h=None, z=None):
        h = self.h_rows[i] if h is None else h
        z = self.z_rows[i] if z is None else z
        return np.concatenate([h, z]) if len(z) else np.asarray(h)

    def proba(self, i, h=None, z=None):
        return self.head.predict_proba(self.features(i, h, z))

    def predicted_label(self, i, h=None, z=None):
        return int(np.argmax(self.head.logits(self.features(i, h, z))))


# ---------------------------------------------------------------------------
# concept-based text explainer
# ---------------------------------------------------------------------------


@dataclass
class ConceptModel:
    """k concept directions plus an affine decoder back to feature space."""

    concepts: np.ndarray  # (dim_h, k), unit columns
    dec_w: np.ndarray  # (k, dim_h)
    dec_b: np.ndarray  # (dim_h,)
    lam_div: float = 0.1

    @property
    def k(self):
        return self.concepts.shape[1]

    def scores(self, h):
        return np.asarray(h) @ self.concepts

    def reconstruct(self, h):
        return self.scores(h) @ self.dec_w + self.dec_b


def _diversity_var(con):
    """Sum of squared pairwise cosines between concept columns."""
    gram = ad.matmul(ad.transpose(con), con)
    sq = ad.vsum(ad.mul(con, con), axis=0)
    k = con.value.shape[1]
    outer = ad.mul(ad.reshape(sq, (k, 1)), ad.reshape(sq, (1, k)))
    cos2 = ad.div(ad.mul(gram, gram), outer)
    return ad.mul(ad.sub(ad.vsum(cos2), float(k)), 0.5)


def concept_loss_var(con, dec_w, dec_b, head, h_batch, z_batch, target_onehot, lam_div):
    """NLL of the frozen head's labels under reconstructed features."""
    scores = ad.matmul(Var(h_batch), con)
    recon = ad.add(ad.matmul(scores, dec_w), dec_b)
    x = ad.concat([recon, Var(z_batch)], axis=1) if z_batch.shape[1] else recon
    logits = ad.add(ad.matmul(x, Var(head.W)), Var(head.b))
    picked = ad.vsum(ad.mul(ad.log_softmax(logits), Var(target_onehot)), axis=1)
    nll = -ad.vmean(picked)
    return ad.add(nll, ad.mul(_diversity_var(con), lam_div))


def train_concepts(model, k=16, lam_div=0.1, lr=1e-2, batch_size=32, epochs=60, seed=0):
    """Fit concepts + decoder against the frozen model's own predictions."""
    h = model.h_rows
    z = model.z_rows
    dim_h = h.shape[1]
    targets = np.asarray([model.predicted_label(i) for i in range(len(model.dataset))])
    onehot = np.zeros((len(targets), 3))
    onehot[np.arange(len(targets)), targets] = 1.0
    rng = substream(seed, "concepts-init")
    con0 = rng.normal(0.0, 1.0, (dim_h, k))
    con0 /= np.linalg.norm(con0, axis=0, keepdims=True)
    con = Var(con0, requires_grad=True)
    dec_w = Var(rng.normal(0.0, 0.1, (k, dim_h)), requires_grad=True)
    dec_b = Var(np.zeros(dim_h), requires_grad=True)
    opt = Adam([con, dec_w, dec_b], lr=lr)
    trace = []
    n = len(targets)
    for epoch in range(epochs):
        order = substream(seed, "concepts-epoch", epoch).permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss = concept_loss_var(
                con, dec_w, dec_b, model.head, h[idx], z[idx], onehot[idx], lam_div
            )
            check_finite(loss, "concept loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            con.value /= np.maximum(np.linalg.norm(con.value, axis=0, keepdims=True), 1e-12)
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))
    return (
        ConceptModel(
            concepts=con.value.copy(), dec_w=dec_w.value.copy(), dec_b=dec_b.value.copy(),
            lam_div=lam_div,
        ),
        trace,
    )


def concept_token_scores(concept_model, token_matrix):
    return (np.asarray(token_matrix) @ concept_model.concepts).max(axis=1)


def extract_text_explanation(token_matrix, concept_model, top_m):
    """Token indices ranked by max-over-concepts score (index tie-break)."""
    scores = concept_token_scores(concept_model, token_matrix)
    order = np.argsort(-scores, kind="stable")
    return order[:top_m].tolist(), scores


# ---------------------------------------------------------------------------
# parameterized subgraph explainer
# ---------------------------------------------------------------------------


class EdgeScorer:
    """Two-layer MLP from endpoint feature pairs to edge-inclusion logits."""

    def __init__(self, feature_dim, hidden=32, seed=0):
        rng = substream(seed, "edge-scorer")
        lim = np.sqrt(6.0 / (2 * feature_dim + hidden))
        self.W1 = Var(rng.uniform(-lim, lim, (2 * feature_dim, hidden)), requires_grad=True)
        self.b1 = Var(np.zeros(hidden), requires_grad=True)
        lim2 = np.sqrt(6.0 / (hidden + 1))
        self.W2 = Var(rng.uniform(-lim2, lim2, (hidden, 1)), requires_grad=True)
        self.b2 = Var(np.zeros(1), requires_grad=True)

    def variables(self):
        return [self.W1, self.b1, self.W2, self.b2]

    def logits_var(self, edge_features):
        hidden = ad.relu(ad.add(ad.matmul(ad.as_var(edge_features), self.W1), self.b1))
        out = ad.add(ad.matmul(hidden, self.W2), self.b2)
        return ad.reshape(out, (out.value.shape[0],))

    def edge_probabilities(self, edge_features):
        logits = self.logits_var(Var(np.asarray(edge_features, dtype=np.float64)))
        return 1.0 / (1.0 + np.exp(-logits.value))


@dataclass
class GraphExplainer:
    scorer: EdgeScorer
    sparsity: float = 0.05
    mc_samples: int = 8
    t_start: float = 1.0
    t_end: float = 0.1


def _edge_features(ctx, edges):
    f = ctx.node_features
    return np.concatenate([f[edges[:, 0]], f[edges[:, 1]]], axis=1)


def _masked_ce_var(model, ctx, i, local, edges, mask, p_full):
    z_s = ctx.encode_weighted_var(local, edges, mask)
    zc = Var(ctx.zc_rows[local].reshape(1, -1))
    x = ad.concat([Var(model.h_rows[i].reshape(1, -1)), zc, z_s], axis=1)
    logits = ad.add(ad.matmul(x, Var(model.head.W)), Var(model.head.b))
    logq = ad.log_softmax(logits)
    return -ad.vsum(ad.mul(Var(p_full.reshape(1, -1)), logq))


def train_graph_explainer(
    model,
    instance_rows=None,
    hidden=32,
    sparsity=0.05,
    mc_samples=8,
    t_start=1.0,
    t_end=0.1,
    lr=1e-2,
    epochs=10,
    seed=0,
):
    """Learn the edge scorer so masked predictions track full predictions.

    The loss per instance is the cross-entropy between the full-graph
    prediction distribution and the masked-graph one, averaged over
    relaxed-Bernoulli mask samples, plus a sparsity penalty on expected
    mask size. Temperature anneals from t_start to t_end.
    """
    ctx = model.ctx
    if ctx is None:
        raise ValueError("model has no graph context to explain")
    if instance_rows is None:
        instance_rows = [i for i in range(len(model.dataset)) if model.locals_[i] >= 0]
    instance_rows = [i for i in instance_rows if len(ctx.ego_edges(int(model.locals_[i])))]
    scorer = EdgeScorer(ctx.node_features.shape[1], hidden=hidden, seed=seed)
    opt = Adam(scorer.variables(), lr=lr)
    p_full = {
        i: model.head.predict_proba(
            np.concatenate(
                [model.h_rows[i], ctx.zc_rows[int(model.locals_[i])],
                 ctx.encode_weighted(int(model.locals_[i]))]
            )
        )
        for i in instance_rows
    }
    trace = []
    for epoch in range(epochs):
        rng = substream(seed, "graph-expl", epoch)
        temp = t_start * (t_end / t_start) ** (epoch / max(epochs - 1, 1))
        losses = []
        for i in rng.permutation(np.asarray(instance_rows, dtype=np.int64)):
            i = int(i)
            local = int(model.locals_[i])
            edges = ctx.ego_edges(local)
            feats = _edge_features(ctx, edges)
            logits = scorer.logits_var(Var(feats))
            terms = []
            for _ in range(mc_samples):
                u = np.clip(rng.random(len(edges)), 1e-6, 1.0 - 1e-6)
                noise = np.log(u) - np.log(1.0 - u)
                mask = ad.sigmoid(ad.mul(ad.add(logits, noise), 1.0 / temp))
                terms.append(_masked_ce_var(model, ctx, i, local, edges, mask, p_full[i]))
            ce = ad.mul(ad.add_n(terms), 1.0 / len(terms))
            loss = ad.add(ce, ad.mul(ad.vmean(ad.sigmoid(logits)), sparsity))
            check_finite(loss, "graph explainer loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)) if losses else 0.0)
    return (
        GraphExplainer(
            scorer=scorer, sparsity=sparsity, mc_samples=mc_samples,
            t_start=t_start, t_end=t_end,
        ),
        trace,
    )


@dataclass
class ExplanationSubgraph:
    edges: np.ndarray  # (E, 2) local ids, ranked
    probabilities: np.ndarray
    nodes: list
    top_node: int  # local id of the node with most training examples, -1 if empty


def extract_subgraph(local, explainer, ctx, budget, training_counts=None):
    """Top-``budget`` edges by inclusion probability around one entity."""
    edges = ctx.ego_edges(int(local))
    if len(edges) == 0:
        return ExplanationSubgraph(
            edges=np.empty((0, 2), dtype=np.int64),
            probabilities=np.empty(0),
            nodes=[],
            top_node=-1,
        )
    probs = explainer.scorer.edge_probabilities(_edge_features(ctx, edges))
    order = np.lexsort((edges[:, 1], edges[:, 0], -probs))
    top = order[: int(budget)]
    chosen = edges[top]
    nodes = sorted({int(x) for x in chosen.reshape(-1)})
    counts = training_counts or {}
    top_node = -1
    best = -1
    for v in nodes:
        c = counts.get(v, 0)
        if c > best:
            best = c
            top_node = v
    return ExplanationSubgraph(
        edges=chosen, probabilities=probs[top], nodes=nodes, top_node=top_node
    )


# ---------------------------------------------------------------------------
# perturbation labels and significance predictors
# ---------------------------------------------------------------------------


def perturb_and_label(model, i, text_token_indices, graph_nodes):
    """(s_t, s_g): does removing each mode's explanation flip the label?

    Text removal replaces the explanation tokens with a neutral mask token
    (sequence length preserved) and re-encodes; graph removal zeroes all
    edges incident to the explanation nodes (the aspect's own node stays).
    """
    inst = model.dataset[i]
    base = model.predicted_label(i)

    tokens = list(inst.tokens)
    for t in text_token_indices:
        tokens[t] = MASK_TOKEN
    if not hasattr(model.provider, "encode_tokens"):
        raise ValueError("text perturbation requires a token-level feature provider")
    h_tilde, _ = model.provider.encode_tokens(tokens, inst.aspect_span)
    s_t = int(model.predicted_label(i, h=h_tilde) != base)

    s_g = 0
    local = int(model.locals_[i])
    if model.ctx is not None and local >= 0:
        remove = {int(v) for v in graph_nodes if int(v) != local}
        if remove:
            edges = model.ctx.ego_edges(local)
            weights = np.ones(len(edges))
            hit = np.isin(edges[:, 0], list(remove)) | np.isin(edges[:, 1], list(remove))
            weights[hit] = 0.0
            z_s = model.ctx.encode_weighted(local, weights)
            z_tilde = np.concatenate([model.ctx.zc_rows[local], z_s])
            z_ref = np.concatenate(
                [model.ctx.zc_rows[local], model.ctx.encode_weighted(local)]
            )
            before = int(np.argmax(model.head.logits(model.features(i, z=z_ref))))
            after = int(np.argmax(model.head.logits(model.features(i, z=z_tilde))))
            s_g = int(after != before)
    return s_t, s_g


def _bce_logit_var(logit, target):
    """Binary cross-entropy from a logit with clamped sigmoid."""
    p = ad.clip(ad.sigmoid(logit), 1e-12, 1.0 - 1e-12)
    return -ad.add(
        ad.mul(ad.log(p), float(target)), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - float(target))
    )


class SignificanceModel:
    """Two logistic predictors (text / graph) over [h(x); z(G)]."""

    def __init__(self, dim, seed=0):
        rng = substream(seed, "significance-init")
        self.wt = Var(rng.normal(0.0, 0.01, dim), requires_grad=True)
        self.bt = Var(np.zeros(()), requires_grad=True)
        self.wg = Var(rng.normal(0.0, 0.01, dim), requires_grad=True)
        self.bg = Var(np.zeros(()), requires_grad=True)

    def variables(self):
        return [self.wt, self.bt, self.wg, self.bg]

    def logits(self, features):
        features = np.asarray(features, dtype=np.float64)
        return features @ self.wt.value + self.bt.value, features @ self.wg.value + self.bg.value

    def predict(self, features):
        lt, lg = self.logits(features)
        return 1.0 / (1.0 + np.exp(-lt)), 1.0 / (1.0 + np.exp(-lg))


def significance_bce_var(sig, features, s_t, s_g):
    """Mean BCE of both predictors over a batch (Var)."""
    f = Var(np.asarray(features, dtype=np.float64))
    lt = ad.add(ad.matmul(f, sig.wt), sig.bt)
    lg = ad.add(ad.matmul(f, sig.wg), sig.bg)
    pt = ad.clip(ad.sigmoid(lt), 1e-12, 1.0 - 1e-12)
    pg = ad.clip(ad.sigmoid(lg), 1e-12, 1.0 - 1e-12)
    st = np.asarray(s_t, dtype=np.float64)
    sg = np.asarray(s_g, dtype=np.float64)
    bce_t = -ad.vmean(
        ad.add(ad.mul(ad.log(pt), st), ad.mul(ad.log(ad.sub(1.0, pt)), 1.0 - st))
    )
    bce_g = -ad.vmean(
        ad.add(ad.mul(ad.log(pg), sg), ad.mul(ad.log(ad.sub(1.0, pg)), 1.0 - sg))
    )
    return bce_t, bce_g


def train_significance(features, s_t, s_g, dim=None, lr=0.05, batch_size=32, epochs=100, seed=0):
    """Fit the two predictors by BCE against the perturbation labels."""
    features = np.asarray(features, dtype=np.float64)
    sig = SignificanceModel(features.shape[1] if dim is None else dim, seed=seed)
    opt = Adam(sig.variables(), lr=lr)
    n = len(features)
    s_t = np.asarray(s_t, dtype=np.float64)
    s_g = np.asarray(s_g, dtype=np.float64)
    trace = []
    for epoch in range(epochs):
        order = substream(seed, "sig-epoch", epoch).permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            bce_t, bce_g = significance_bce_var(sig, features[idx], s_t[idx], s_g[idx])
            loss = ad.add(bce_t, bce_g)
            check_finite(loss, "significance loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))
    return sig, trace


@dataclass
class JointExplainTrace:
    """Per-step components of the joint objective (for recomposition)."""

    lam: float
    weighted_text: list = field(default_factory=list)
    weighted_graph: list = field(default_factory=list)
    bce_text: list = field(default_factory=list)
    bce_graph: list = field(default_factory=list)
    total: list = field(default_factory=list)

    def recompose_error(self):
        worst = 0.0
        for wt, wg, bt, bg, tot in zip(
            self.weighted_text, self.weighted_graph, self.bce_text, self.bce_graph, self.total
        ):
            worst = max(worst, abs(wt + wg + self.lam * (bt + bg) - tot))
        return worst


def joint_refine(
    model,
    concept_model,
    graph_explainer,
    sig_model,
    s_t,
    s_g,
    lam=1.0,
    lr=1e-3,
    batch_size=16,
    epochs=3,
    mc_samples=2,
    temp=0.2,
    seed=0,
):
    """Second step: refine explainers under significance-weighted losses.

    The weighting significances are treated as constants inside the
    explainer terms (no gradient flows from the weights), while the BCE
    terms train the predictors against the fixed perturbation labels.
    Returns (concept model, explainer, significance model, trace).
    """
    n = len(model.dataset)
    features = np.stack([model.features(i) for i in range(n)])
    targets = np.asarray([model.predicted_label(i) for i in range(n)])
    onehot = np.zeros((n, 3))
    onehot[np.arange(n), targets] = 1.0
    s_t = np.asarray(s_t, dtype=np.float64)
    s_g = np.asarray(s_g, dtype=np.float64)

    con = Var(concept_model.concepts.copy(), requires_grad=True)
    dec_w = Var(concept_model.dec_w.copy(), requires_grad=True)
    dec_b = Var(concept_model.dec_b.copy(), requires_grad=True)
    params = [con, dec_w, dec_b] + sig_model.variables()
    scorer = graph_explainer.scorer if graph_explainer is not None else None
    if scorer is not None:
        params += scorer.variables()
    opt = Adam(params, lr=lr)
    trace = JointExplainTrace(lam=lam)
    ctx = model.ctx

    p_full = {}
    if ctx is not None:
        for i in range(n):
            local = int(model.locals_[i])
            if local >= 0 and len(ctx.ego_edges(local)):
                p_full[i] = model.head.predict_proba(
                    np.concatenate(
                        [model.h_rows[i], ctx.zc_rows[local], ctx.encode_weighted(local)]
                    )
                )

    for epoch in range(epochs):
        rng = substream(seed, "joint-explain", epoch)
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            st_now, sg_now = sig_model.predict(features[idx])

            text_loss = concept_loss_var(
                con, dec_w, dec_b, model.head,
                model.h_rows[idx], model.z_rows[idx], onehot[idx],
                concept_model.lam_div,
            )
            weighted_text = ad.mul(text_loss, float(np.mean(st_now)))

            graph_terms = []
            graph_weights = []
            if scorer is not None:
                for pos, i in enumerate(idx):
                    i = int(i)
                    if i not in p_full:
                        continue
                    local = int(model.locals_[i])
                    edges = ctx.ego_edges(local)
                    logits = scorer.logits_var(Var(_edge_features(ctx, edges)))
                    inner = []
                    for _ in range(mc_samples):
                        u = np.clip(rng.random(len(edges)), 1e-6, 1.0 - 1e-6)
                        noise = np.log(u) - np.log(1.0 - u)
                        mask = ad.sigmoid(ad.mul(ad.add(logits, noise), 1.0 / temp))
                        inner.append(_masked_ce_var(model, ctx, i, local, edges, mask, p_full[i]))
                    ce = ad.mul(ad.add_n(inner), 1.0 / len(inner))
                    graph_terms.append(ce)
                    graph_weights.append(float(sg_now[pos]))
            if graph_terms:
                weighted = [ad.mul(t, w) for t, w in zip(graph_terms, graph_weights)]
                weighted_graph = ad.mul(ad.add_n(weighted), 1.0 / len(graph_terms))
            else:
                weighted_graph = Var(np.zeros(()))

            bce_t, bce_g = significance_bce_var(sig_model, features[idx], s_t[idx], s_g[idx])
            loss = ad.add(
                ad.add(weighted_text, weighted_graph),
                ad.mul(ad.add(bce_t, bce_g), lam),
            )
            check_finite(loss, "joint explanation loss")
            opt.zero_grad()
            backward(loss)
            opt.step()
            con.value /= np.maximum(np.linalg.norm(con.value, axis=0, keepdims=True), 1e-12)

            trace.weighted_text.append(float(weighted_text.value))
            trace.weighted_graph.append(float(weighted_graph.value))
            trace.bce_text.append(float(bce_t.value))
            trace.bce_graph.append(float(bce_g.value))
            trace.total.append(float(loss.value))

    refined = ConceptModel(
        concepts=con.value.copy(), dec_w=dec_w.value.copy(), dec_b=dec_b.value.copy(),
        lam_div=concept_model.lam_div,
    )
    return refined, graph_explainer, sig_model, trace


# ---------------------------------------------------------------------------
# report output
# ---------------------------------------------------------------------------


def write_explanations_jsonl(path, records):
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def mode_distribution(modes):
    out = {m: 0 for m in MODES}
    for m in modes:
        out[m] += 1
    return out


def write_mode_distribution_tsv(path, dist, improved=None):
    with open(path, "w") as f:
        f.write("mode\tcount\timproved\n")
        for m in MODES:
            f.write("%s\t%d\t%d\n" % (m, dist.get(m, 0), (improved or {}).get(m, 0)))
        f.write("Total\t%d\t%d\n" % (sum(dist.values()), sum((improved or {}).values())))
