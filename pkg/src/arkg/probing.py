"""Detection of wrongly disambiguated aspects via a learned probing matrix.

A projection B distills entity-relation structure out of text feature
vectors: aspects that are close in graph-embedding space should stay close
under sigma((B h_i)^T (B h_j)). Aspects whose probed text similarity to
their graph-nearest peers fails to beat their similarity to distant peers
get their two-level embedding zeroed out.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from .autodiff import Adam, Var, backward, check_finite
from .embedding import save_arem
from .two_level import FLAG_OK, FLAG_UNK, FLAG_ZEROED
from .util import substream


@dataclass
class ProbingModel:
    """Projection matrix (probe_dim x feature_dim) plus its ridge weight."""

    B: np.ndarray
    lam: float = 0.01

    def save(self, path):
        save_arem(path, self.B.astype(np.float32))


def probe_similarity(B, h_i, h_j):
    """sigma((B h_i)^T (B h_j)) in (0, 1)."""
    x = float((B @ h_i) @ (B @ h_j))
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@dataclass
class TripletSet:
    triples: np.ndarray  # (T, 3) aspect entity ids (i, j, k)
    n: int


def _cosine_ranks(vectors, i):
    """Indices of all other rows sorted by descending cosine similarity to row i."""
    v = vectors[i]
    norms = np.linalg.norm(vectors, axis=1)
    sims = vectors @ v / (np.maximum(norms, 1e-12) * max(np.linalg.norm(v), 1e-12))
    sims[i] = -np.inf
    order = np.argsort(-sims, kind="stable")
    return order[:-1]  # drop i itself (ranked last by the -inf)


def build_triplets(table, n=10, per_aspect=1, seed=0):
    """Per aspect i: sample (j, k) with j among its n graph-nearest aspects
    and k among the rest, ``per_aspect`` times."""
    ids = np.asarray(table.ids)
    vectors = np.asarray(table.vectors, dtype=np.float64)
    if len(ids) < n + 2:
        raise ValueError("need at least n+2 aspects, have %d (n=%d)" % (len(ids), n))
    rng = substream(seed, "triplets")
    triples = []
    for row, i in enumerate(ids):
        ranked = _cosine_ranks(vectors, row)
        top, rest = ranked[:n], ranked[n:]
        for _ in range(per_aspect):
            j = top[rng.integers(len(top))]
            k = rest[rng.integers(len(rest))]
            triples.append((int(i), int(ids[j]), int(ids[k])))
    return TripletSet(triples=np.asarray(triples, dtype=np.int64), n=n)


def aspect_text_embeddings(dataset, provider, entity_ids):
    """Mean text feature vector per resolved aspect entity."""
    sums, counts = {}, {}
    for inst, e in zip(dataset, entity_ids):
        e = int(e)
        if e < 0:
            continue
        h, _ = provider.features(inst)
        sums[e] = sums.get(e, 0.0) + h
        counts[e] = counts.get(e, 0) + 1
    return {e: sums[e] / counts[e] for e in sums}


def probe_objective_var(b_var, h_i, h_j, h_k, lam):
    """Batch objective: mean[S(h_i,h_k) - S(h_i,h_j)] + lam * ||B||^2."""
    pi = ad.matmul(Var(h_i), b_var)
    pj = ad.matmul(Var(h_j), b_var)
    pk = ad.matmul(Var(h_k), b_var)
    s_ij = ad.sigmoid(ad.vsum(ad.mul(pi, pj), axis=1))
    s_ik = ad.sigmoid(ad.vsum(ad.mul(pi, pk), axis=1))
    margin = ad.vmean(ad.sub(s_ik, s_ij))
    ridge = ad.mul(ad.vsum(ad.mul(b_var, b_var)), lam)
    return ad.add(margin, ridge)


def train_probe(
    triplets, h_map, dim_b=100, lam=0.01, lr=1e-5, batch_size=128, epochs=100, seed=0
):
    """Learn B by pushing probed similarity toward graph-derived triplets.

    Returns (ProbingModel, per-epoch trace of (objective, mean margin)).
    """
    some = next(iter(h_map.values()))
    dim_h = len(some)
    rng = substream(seed, "probe-init")
    b_var = Var(rng.normal(0.0, 1.0 / np.sqrt(dim_b), (dim_h, dim_b)), requires_grad=True)
    opt = Adam([b_var], lr=lr)
    triples = triplets.triples
    h_i = np.stack([h_map[i] for i in triples[:, 0]]).astype(np.float64)
    h_j = np.stack([h_map[j] for j in triples[:, 1]]).astype(np.float64)
    h_k = np.stack([h_map[k] for k in triples[:, 2]]).astype(np.float64)
    trace = []
    for epoch in range(epochs):
        order = substream(seed, "probe-epoch", epoch).permutation(len(triples))
        losses = []
        for lo in range(0, len(triples), batch_size):
            idx = order[lo : lo + batch_size]
            loss = probe_objective_var(b_var, h_i[idx], h_j[idx], h_k[idx], lam)
            check_finite(loss, "probe objective")
            opt.zero_grad()
            backward(loss)
            opt.step()
            losses.append(float(loss.value))
        b = b_var.value.T
        margins = [
            probe_similarity(b, hi, hj) - probe_similarity(b, hi, hk)
            for hi, hj, hk in zip(h_i, h_j, h_k)
        ]
        trace.append((float(np.mean(losses)), float(np.mean(margins))))
    return ProbingModel(B=b_var.value.T.copy(), lam=lam), trace


def detect_and_correct(
    model,
    h_map,
    table,
    n=10,
    samples=20,
    seed=0,
    zero_on_agreement=False,
):
    """Flag aspects whose probed text similarity disagrees with graph ranks.

    For each aspect i (with fresh (j, k) draws, independent of the training
    triplets) the mean margin m(i) = mean[S(h_i,h_j) - S(h_i,h_k)] decides
    the flag: ZEROED when m(i) < 0, meaning text similarity to graph-near
    aspects loses to graph-far ones. ``zero_on_agreement`` flips the rule
    for sensitivity checks. Returns (flags, corrected table, margins).
    """
    ids = np.asarray(table.ids)
    vectors = np.asarray(table.vectors, dtype=np.float64)
    eligible = [
        row
        for row, e in enumerate(ids)
        if table.flag_of(int(e)) != FLAG_UNK and int(e) in h_map
    ]
    flags = {}
    margins = {}
    skipped = 0
    for row in eligible:
        e = int(ids[row])
        others = [r for r in eligible if r != row]
        if len(others) <= n:
            flags[e] = FLAG_OK
            skipped += 1
            continue
        ranked = _cosine_ranks(vectors, row)
        keep = np.isin(ranked, np.asarray(others))
        ranked = ranked[keep]
        top, rest = ranked[:n], ranked[n:]
        rng = substream(seed, "detect", e)
        total = 0.0
        h_i = h_map[e]
        for _ in range(samples):
            j = int(ids[top[rng.integers(len(top))]])
            k = int(ids[rest[rng.integers(len(rest))]])
            total += probe_similarity(model.B, h_i, h_map[j]) - probe_similarity(
                model.B, h_i, h_map[k]
            )
        m = total / samples
        margins[e] = m
        bad = (m >= 0) if zero_on_agreement else (m < 0)
        flags[e] = FLAG_ZEROED if bad else FLAG_OK
    if skipped:
        warnings.warn("%d aspects had too few peers to audit; left OK" % skipped)
    corrected = table.with_zeroed([e for e, f in flags.items() if f == FLAG_ZEROED])
    return flags, corrected, margins


def write_flags_tsv(path, flags, margins):
    with open(path, "w") as f:
        for e in sorted(flags):
            f.write("%d\t%s\t%r\n" % (e, flags[e], margins.get(e, 0.0)))


class DisambiguationAuditor(BaseEstimator):
    """Estimator facade: fit the probe on triplets, then audit a table."""

    def __init__(
        self,
        n=10,
        per_aspect=1,
        samples=20,
        dim_b=100,
        lam=0.01,
        lr=1e-5,
        batch_size=128,
        epochs=100,
        seed=0,
        zero_on_agreement=False,
    ):
        self.n = n
        self.per_aspect = per_aspect
        self.samples = samples
        self.dim_b = dim_b
        self.lam = lam
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.zero_on_agreement = zero_on_agreement

    def fit(self, table, h_map):
        self.triplets_ = build_triplets(
            table, n=self.n, per_aspect=self.per_aspect, seed=self.seed
        )
        self.probe_, self.trace_ = train_probe(
            self.triplets_,
            h_map,
            dim_b=self.dim_b,
            lam=self.lam,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )
        return self

    def audit(self, table, h_map):
        flags, corrected, margins = detect_and_correct(
            self.probe_,
            h_map,
            table,
            n=self.n,
            samples=self.samples,
            seed=self.seed,
            zero_on_agreement=self.zero_on_agreement,
        )
        self.flags_ = flags
        self.margins_ = margins
        return corrected
