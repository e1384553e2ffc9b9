"""Embedding-quality metrics, Leiden clustering, method aggregation and k-NN prediction."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from .graphs import GeneGraph, jaccard

log = logging.getLogger(__name__)

METRICS = ("ASW", "AUC", "iLISI", "GC", "CGR", "NO")


# ---------------------------------------------------------------------------
# embedding table


@dataclass
class EmbeddingTable:
    genes: list[str]
    datasets: list[str]
    tissues: list[str]
    modalities: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = self.values.shape[0]
        if not (len(self.genes) == len(self.datasets) == len(self.tissues) == len(self.modalities) == n):
            raise ValueError("row labels must align with values")
        keys = list(zip(self.genes, self.datasets))
        if len(set(keys)) != n:
            raise ValueError("duplicate (gene, dataset) rows")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding values must be finite")

    def __len__(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[GeneGraph], embeddings: Mapping[str, np.ndarray]) -> EmbeddingTable:
        genes, ds, tissue, mod, rows = [], [], [], [], []
        for g in graphs:
            e = np.asarray(embeddings[g.dataset_id])
            genes += list(g.genes)
            ds += [g.dataset_id] * g.n_nodes
            tissue += [g.metadata.get("tissue", "")] * g.n_nodes
            mod += [g.modality] * g.n_nodes
            rows.append(e)
        return cls(genes, ds, tissue, mod, np.vstack(rows))

    def subset(self, rows) -> EmbeddingTable:
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda xs: [xs[i] for i in rows]  # noqa: E731
        return EmbeddingTable(pick(self.genes), pick(self.datasets), pick(self.tissues),
                              pick(self.modalities), self.values[rows])

    def rows_of(self, dataset_id: str) -> np.ndarray:
        return np.array([i for i, d in enumerate(self.datasets) if d == dataset_id], dtype=np.int64)

    def common_rows(self) -> np.ndarray:
        """Rows whose gene name occurs in at least two datasets."""
        counts = Counter(self.genes)
        return np.array([i for i, g in enumerate(self.genes) if counts[g] >= 2], dtype=np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gene", "dataset", "tissue", "modality"] + [f"v{k}" for k in range(self.values.shape[1])])
        for i in range(len(self)):
            w.writerow([self.genes[i], self.datasets[i], self.tissues[i], self.modalities[i]]
                       + [repr(float(v)) for v in self.values[i]])
        return buf.getvalue()

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path: str | os.PathLike) -> EmbeddingTable:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:4] != ["gene", "dataset", "tissue", "modality"]:
                raise ValueError(f"{path}: unexpected header {header[:4]}")
            genes, ds, tissue, mod, rows = [], [], [], [], []
            for rec in reader:
                genes.append(rec[0])
                ds.append(rec[1])
                tissue.append(rec[2])
                mod.append(rec[3])
                rows.append([float(v) for v in rec[4:]])
        return cls(genes, ds, tissue, mod, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 4))

    @classmethod
    def concat(cls, tables: Sequence[EmbeddingTable]) -> EmbeddingTable:
        return cls(
            sum((t.genes for t in tables), []), sum((t.datasets for t in tables), []),
            sum((t.tissues for t in tables), []), sum((t.modalities for t in tables), []),
            np.vstack([t.values for t in tables]),
        )


# ---------------------------------------------------------------------------
# AUC


def auc_score(scores, labels) -> float:
    """Area under the ROC curve by the rank-sum identity; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative pairs")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def edge_auc(table: EmbeddingTable, graphs) -> float:
    """Mean over datasets of the AUC of ``sigmoid(z z^T)`` against the adjacency.

    ``graphs`` holds :class:`GeneGraph` objects or ``(dataset_id, genes,
    adjacency)`` triples; ``z`` are l2-normalized embedding rows. Graphs with
    no edges, or every pair linked, are skipped.
    """
    aucs = []
    for g in graphs:
        if isinstance(g, GeneGraph):
            ds, genes, adj = g.dataset_id, g.genes, g.dense_adjacency()
        else:
            ds, genes, adj = g
            adj = adj.toarray() if sp.issparse(adj) else np.asarray(adj)
        rows = table.rows_of(ds)
        where = {table.genes[r]: r for r in rows}
        z = table.values[[where[name] for name in genes]]
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        z = z / np.where(norm > 0, norm, 1.0)
        iu, ju = np.triu_indices(len(genes), k=1)
        labels = np.asarray(adj, dtype=bool)[iu, ju]
        if labels.all() or not labels.any():
            log.warning("%s: graph has no edges or all edges; AUC skipped", ds)
            continue
        aucs.append(auc_score(_sigmoid((z @ z.T)[iu, ju]), labels))
    if not aucs:
        return float("nan")
    return float(np.mean(aucs))


# ---------------------------------------------------------------------------
# mixing metrics


def silhouette_samples(x: np.ndarray, labels) -> np.ndarray:
    """Silhouette per row (Euclidean); NaN for rows whose label has one member."""
    labels = np.asarray(labels)
    d = cdist(x, x)
    uniq = np.unique(labels)
    member = labels[:, None] == uniq[None, :]
    sizes = member.sum(axis=0)
    sums = d @ member
    out = np.full(len(x), np.nan)
    own = np.searchsorted(uniq, labels)
    for i in range(len(x)):
        c = own[i]
        if sizes[c] < 2:
            continue
        a = sums[i, c] / (sizes[c] - 1)
        others = [sums[i, k] / sizes[k] for k in range(len(uniq)) if k != c]
        if not others:
            continue
        b = min(others)
        denom = max(a, b)
        out[i] = 0.0 if denom == 0 else (b - a) / denom
    return out


def asw_batch(table: EmbeddingTable) -> float:
    """Mean of ``1 - |s|`` over shared-gene rows, ``s`` the dataset-label silhouette."""
    rows = table.common_rows()
    if rows.size == 0:
        raise ValueError("no genes shared between datasets")
    labels = np.array(table.datasets)[rows]
    counts = Counter(labels)
    keep = np.array([counts[lab] >= 2 for lab in labels])
    rows, labels = rows[keep], labels[keep]
    if len(set(labels)) < 2:
        raise ValueError("need at least two datasets with shared genes")
    s = silhouette_samples(table.values[rows], labels)
    return float(np.mean(1.0 - np.abs(s[~np.isnan(s)])))


def _entropy_and_probs(d: np.ndarray, beta: float):
    p = np.exp(-d * beta)
    total = p.sum()
    if total == 0:
        return 0.0, np.full_like(d, 1.0 / d.size)
    h = np.log(total) + beta * (d * p).sum() / total
    return h, p / total


def neighborhood_probabilities(d: np.ndarray, perplexity: float, tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Gaussian-kernel weights over neighbour distances with the given perplexity."""
    target = np.log(perplexity)
    beta, lo, hi = 1.0, -np.inf, np.inf
    h, p = _entropy_and_probs(d, beta)
    for _ in range(max_iter):
        diff = h - target
        if abs(diff) < tol:
            break
        if diff > 0:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
        h, p = _entropy_and_probs(d, beta)
    return p


def ilisi(table: EmbeddingTable, perplexity: float = 30.0) -> float:
    """Normalized inverse Simpson index of dataset labels in each shared-gene neighbourhood.

    Neighbourhoods are the ``3 * perplexity`` nearest rows weighted by a
    Gaussian kernel calibrated to ``perplexity``. The index runs from 1 to the
    number of datasets ``B`` and is rescaled to ``(lisi - 1) / (B - 1)``.
    """
    rows = table.common_rows()
    labels = np.array(table.datasets)[rows]
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise ValueError("need at least two datasets")
    n = len(rows)
    if 3 * perplexity > n - 1:
        new = max((n - 1) / 3.0, 1.0)
        log.warning("iLISI: %d rows too few for perplexity %g; using %g", n, perplexity, new)
        perplexity = new
    k = min(int(3 * perplexity), n - 1)
    x = table.values[rows]
    d = cdist(x, x, "sqeuclidean")
    np.fill_diagonal(d, np.inf)
    code = np.searchsorted(uniq, labels)
    out = np.empty(n)
    for i in range(n):
        nb = np.argsort(d[i], kind="stable")[:k]
        p = neighborhood_probabilities(d[i, nb] - d[i, nb].min(), perplexity)
        mass = np.bincount(code[nb], weights=p, minlength=len(uniq))
        out[i] = 1.0 / np.sum(mass ** 2)
    return float(np.mean((out - 1.0) / (len(uniq) - 1)))


# ---------------------------------------------------------------------------
# k-NN graphs and Leiden


def knn_graph(x: np.ndarray, k: int = 15) -> sp.csr_matrix:
    """Symmetric unweighted k-nearest-neighbour graph (union of directions)."""
    n = len(x)
    k = min(k, n - 1)
    if k < 1:
        return sp.csr_matrix((n, n))
    d = cdist(x, x)
    np.fill_diagonal(d, np.inf)
    nb = np.argsort(d, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    a = sp.csr_matrix((np.ones(n * k), (rows, nb.ravel())), shape=(n, n))
    a = ((a + a.T) > 0).astype(np.float64)
    return sp.csr_matrix(a)


def modularity(adj: sp.spmatrix, membership, resolution: float = 1.0) -> float:
    adj = sp.csr_matrix(adj)
    membership = np.asarray(membership)
    k = np.asarray(adj.sum(axis=1)).ravel()
    two_m = k.sum()
    if two_m == 0:
        return 0.0
    coo = adj.tocoo()
    inside = coo.data[membership[coo.row] == membership[coo.col]].sum()
    comm_deg = np.bincount(membership, weights=k)
    return float((inside - resolution * (comm_deg ** 2).sum() / two_m) / two_m)


class _Graph:
    def __init__(self, adj: sp.csr_matrix):
        adj = sp.csr_matrix(adj)
        self.n = adj.shape[0]
        self.indptr, self.indices, self.data = adj.indptr, adj.indices, adj.data
        self.degree = np.asarray(adj.sum(axis=1)).ravel()
        self.two_m = self.degree.sum()
        self.adj = adj

    def links(self, i: int, membership: np.ndarray) -> dict[int, float]:
        """Edge weight from ``i`` to each community, self-loop excluded."""
        out: dict[int, float] = {}
        for p in range(self.indptr[i], self.indptr[i + 1]):
            j = self.indices[p]
            if j == i:
                continue
            c = membership[j]
            out[c] = out.get(c, 0.0) + self.data[p]
        return out


def _move_nodes(g: _Graph, membership: np.ndarray, resolution: float, rng) -> bool:
    """Queue-based local moving; returns whether any node changed community."""
    n = g.n
    comm_deg = np.bincount(membership, weights=g.degree, minlength=n)
    order = list(rng.permutation(n))
    queued = np.ones(n, dtype=bool)
    head = 0
    changed = False
    empty = sorted(set(range(n)) - set(membership.tolist()))
    while head < len(order):
        i = order[head]
        head += 1
        queued[i] = False
        ki = g.degree[i]
        old = membership[i]
        comm_deg[old] -= ki
        links = g.links(i, membership)
        best, best_gain = old, links.get(old, 0.0) - resolution * ki * comm_deg[old] / g.two_m
        for c in sorted(links):
            gain = links[c] - resolution * ki * comm_deg[c] / g.two_m
            if gain > best_gain + 1e-12:
                best, best_gain = c, gain
        if best_gain < -1e-12 and empty:
            # an empty community is always available at zero gain
            best = empty.pop(0)
        comm_deg[best] += ki
        if best != old:
            membership[i] = best
            changed = True
            if comm_deg[old] == 0:
                empty.append(old)
                empty.sort()
            for p in range(g.indptr[i], g.indptr[i + 1]):
                j = g.indices[p]
                if not queued[j] and membership[j] != best:
                    queued[j] = True
                    order.append(j)
    return changed


def _refine(g: _Graph, partition: np.ndarray, resolution: float, rng) -> np.ndarray:
    """Greedy merge of singletons inside each community, well-connected sets only."""
    refined = np.arange(g.n)
    ref_deg = g.degree.copy()
    comm_deg = np.bincount(partition, weights=g.degree)
    # links of each refined set to the rest of its parent community
    outside = np.zeros(g.n)
    for i in range(g.n):
        lk = g.links(i, partition)
        outside[i] = lk.get(partition[i], 0.0)
    singleton = np.ones(g.n, dtype=bool)
    for v in rng.permutation(g.n):
        if not singleton[v]:
            continue
        s = partition[v]
        kv = g.degree[v]
        if outside[v] < resolution * kv * (comm_deg[s] - kv) / g.two_m:
            continue
        links: dict[int, float] = {}
        for p in range(g.indptr[v], g.indptr[v + 1]):
            j = g.indices[p]
            if j == v or partition[j] != s:
                continue
            links[refined[j]] = links.get(refined[j], 0.0) + g.data[p]
        best, best_gain = refined[v], 0.0
        for c in sorted(links):
            if c == refined[v]:
                continue
            if outside[c] < resolution * ref_deg[c] * (comm_deg[s] - ref_deg[c]) / g.two_m:
                continue
            gain = links[c] - resolution * kv * ref_deg[c] / g.two_m
            if gain > best_gain + 1e-12:
                best, best_gain = c, gain
        if best == refined[v]:
            continue
        old = refined[v]
        refined[v] = best
        singleton[v] = False
        # the merged set loses the v-c links from its outside weight and gains v's other links
        outside[best] = outside[best] + outside[old] - 2.0 * links[best]
        ref_deg[best] += ref_deg[old]
        ref_deg[old] = 0.0
        outside[old] = 0.0
        singleton[np.flatnonzero(refined == best)] = False
    return refined


def _relabel(membership: np.ndarray) -> np.ndarray:
    _, first = np.unique(membership, return_index=True)
    order = np.argsort(first)
    mapping = np.empty(membership.max() + 1, dtype=np.int64)
    mapping[np.unique(membership)[order]] = np.arange(len(order))
    return mapping[membership]


def leiden(adj: sp.spmatrix, resolution: float = 1.0, seed: int = 0, max_levels: int = 50) -> np.ndarray:
    """Leiden community detection maximizing modularity at ``resolution``.

    Alternates local moving, refinement of each community into well-connected
    parts, and aggregation of the refined parts, with the unrefined partition
    as the starting point on the aggregate graph. Returns contiguous labels
    numbered by first occurrence.
    """
    rng = np.random.default_rng(seed)
    adj = sp.csr_matrix(adj, dtype=np.float64)
    n0 = adj.shape[0]
    if n0 == 0:
        return np.empty(0, dtype=np.int64)
    g = _Graph(adj)
    if g.two_m == 0:
        return np.arange(n0)
    node_of = np.arange(n0)          # original node -> aggregate node
    membership = np.arange(g.n)
    for _ in range(max_levels):
        _move_nodes(g, membership, resolution, rng)
        membership = _relabel(membership)
        if len(np.unique(membership)) == g.n:
            break
        refined = _relabel(_refine(g, membership, resolution, rng))
        n_agg = refined.max() + 1
        s = sp.csr_matrix((np.ones(g.n), (np.arange(g.n), refined)), shape=(g.n, n_agg))
        parent = np.zeros(n_agg, dtype=np.int64)
        parent[refined] = membership
        g = _Graph(sp.csr_matrix(s.T @ g.adj @ s))
        node_of = refined[node_of]
        membership = parent
    return _relabel(membership[node_of])


def cluster(table: EmbeddingTable, resolution: float = 1.0, seed: int = 0, k: int = 15) -> np.ndarray:
    if len(table) < 2:
        raise ValueError("need at least two rows to cluster")
    return leiden(knn_graph(table.values, k), resolution, seed)


# ---------------------------------------------------------------------------
# cluster-level metrics


def graph_connectivity(table: EmbeddingTable, clusters, label: str = "tissue", k: int = 15) -> float:
    """Mean over clusters of the size-weighted largest-component share per label group."""
    clusters = np.asarray(clusters)
    labels = np.array(getattr(table, {"tissue": "tissues", "dataset": "datasets", "modality": "modalities"}[label]))
    scores = []
    for c in np.unique(clusters):
        rows = np.flatnonzero(clusters == c)
        if rows.size < 2:
            continue
        adj = knn_graph(table.values[rows], k)
        num = 0.0
        for lab in np.unique(labels[rows]):
            grp = np.flatnonzero(labels[rows] == lab)
            _, comp = connected_components(adj[grp][:, grp], directed=False)
            num += np.bincount(comp).max()
        scores.append(num / rows.size)
    if not scores:
        return float("nan")
    return float(np.mean(scores))


def common_gene_ratio(clusters, genes: Sequence[str]) -> float:
    clusters = np.asarray(clusters)
    genes = np.asarray(genes, dtype=object)
    num, den = 0.0, 0
    for c in np.unique(clusters):
        members = genes[clusters == c]
        counts = Counter(members)
        unique = sum(1 for g in members if counts[g] == 1)
        num += len(members) - unique    # |c| * (1 - u_c / |c|)
        den += len(members)
    return num / den if den else 0.0


def neighbors_overlap(table: EmbeddingTable, clusters, graphs: Sequence[GeneGraph]) -> float:
    """Size-weighted mean over clusters of the cross-dataset Jaccard of neighbour names."""
    clusters = np.asarray(clusters)
    by_id = {g.dataset_id: g for g in graphs}
    num, den = 0.0, 0
    for c in np.unique(clusters):
        rows = np.flatnonzero(clusters == c)
        den += rows.size
        groups: dict[str, list[str]] = {}
        for r in rows:
            groups.setdefault(table.genes[r], []).append(table.datasets[r])
        vals = []
        for gene, dsets in groups.items():
            if len(dsets) < 2:
                continue
            sets = [by_id[d].neighbor_names(by_id[d].index_of(gene)) for d in dsets]
            vals.append(np.mean([jaccard(a, b) for a, b in combinations(sets, 2)]))
        if vals:
            num += rows.size * float(np.mean(vals))
    return num / den if den else 0.0


def evaluate(table: EmbeddingTable, graphs: Sequence[GeneGraph], resolution: float = 1.0,
             seed: int = 0, k: int = 15, perplexity: float = 30.0) -> dict[str, float]:
    clusters = cluster(table, resolution, seed, k)
    return {
        "ASW": asw_batch(table),
        "AUC": edge_auc(table, graphs),
        "iLISI": ilisi(table, perplexity),
        "GC": graph_connectivity(table, clusters, "tissue", k),
        "CGR": common_gene_ratio(clusters, table.genes),
        "NO": neighbors_overlap(table, clusters, graphs),
    }


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class MetricsReport:
    methods: list[str]
    metrics: tuple[str, ...]
    values: np.ndarray            # methods x metrics
    ranks: np.ndarray
    scaled: np.ndarray
    avg_rank: np.ndarray
    avg_score: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        body = {
            "metrics": list(self.metrics),
            "methods": {
                m: {
                    "values": dict(zip(self.metrics, map(float, self.values[i]))),
                    "avg_rank": float(self.avg_rank[i]),
                    "avg_score": float(self.avg_score[i]),
                }
                for i, m in enumerate(self.methods)
            },
            **self.meta,
        }
        return json.dumps(body, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        width = max(8, max(len(m) for m in self.methods))
        head = f"{'method':<{width}} " + " ".join(f"{m:>7}" for m in self.metrics) + "  avg_rank avg_score"
        lines = [head]
        for i, m in enumerate(self.methods):
            vals = " ".join(f"{v:7.4f}" for v in self.values[i])
            lines.append(f"{m:<{width}} {vals}  {self.avg_rank[i]:8.3f} {self.avg_score[i]:9.4f}")
        return "\n".join(lines) + "\n"

    def plot_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "metric", "value", "rank", "scaled"])
        for i, m in enumerate(self.methods):
            for k, name in enumerate(self.metrics):
                w.writerow([m, name, repr(float(self.values[i, k])), repr(float(self.ranks[i, k])),
                            repr(float(self.scaled[i, k]))])
        return buf.getvalue()


def aggregate(values, methods: Sequence[str], metrics: Sequence[str] = METRICS) -> MetricsReport:
    """Average rank (1 = best, ties averaged) and average min-max score per method.

    A metric that is constant across methods scales to 0.5 for everyone.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a methods x metrics matrix with at least two methods")
    if x.shape != (len(methods), len(metrics)):
        raise ValueError("labels do not match the value matrix")
    ranks = np.column_stack([rankdata(-x[:, k]) for k in range(x.shape[1])])
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = hi - lo
    scaled = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.5)
    return MetricsReport(list(methods), tuple(metrics), x, ranks, scaled, ranks.mean(axis=1), scaled.mean(axis=1))


# ---------------------------------------------------------------------------
# k-NN prediction


def knn_predict(train_x, train_y, test_x, k: int = 5) -> list:
    """Majority label among the ``k`` nearest training rows.

    Ties between labels go to the one whose tied neighbours are closest on
    average.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = list(train_y)
    if len(train_y) == 0:
        raise ValueError("empty training set")
    if k > len(train_y):
        raise ValueError("k exceeds the number of training rows")
    d = cdist(test_x, train_x)
    out = []
    for row in d:
        nb = np.argsort(row, kind="stable")[:k]
        votes: dict = {}
        for j in nb:
            votes.setdefault(train_y[j], []).append(row[j])
        top = max(len(v) for v in votes.values())
        tied = [(np.mean(v), lab) for lab, v in votes.items() if len(v) == top]
        out.append(min(tied, key=lambda t: t[0])[1])
    return out
