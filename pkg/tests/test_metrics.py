import math
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from genegraph.graphs import GeneGraph
from genegraph.metrics import (
    EmbeddingTable,
    aggregate,
    asw_batch,
    auc_score,
    cluster,
    common_gene_ratio,
    edge_auc,
    evaluate,
    graph_connectivity,
    ilisi,
    knn_graph,
    knn_predict,
    leiden,
    modularity,
    neighbors_overlap,
    silhouette_samples,
)


def table(genes, datasets, values, tissues=None):
    n = len(genes)
    return EmbeddingTable(list(genes), list(datasets), list(tissues or ["t"] * n), ["scRNA"] * n, values)


def two_dataset_table(x_a, x_b):
    n = len(x_a)
    genes = [f"g{k}" for k in range(n)] * 2
    return table(genes, ["A"] * n + ["B"] * n, np.vstack([x_a, x_b]))


# -- AUC ----------------------------------------------------------------------


def test_auc_perfect_and_constant():
    labels = np.array([1, 0, 1, 0, 0])
    assert auc_score([0.9, 0.1, 0.8, 0.2, 0.3], labels) == 1.0
    assert auc_score(np.full(5, 0.4), labels) == 0.5
    with pytest.raises(ValueError):
        auc_score([0.1, 0.2], [1, 1])


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def test_edge_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(0)
    n = 20
    upper = np.triu(rng.random((n, n)) < 0.3, 1)
    adj = (upper | upper.T).astype(float)
    genes = tuple(f"g{k}" for k in range(n))
    g = GeneGraph(genes, np.zeros((n, 1)), adj, {"dataset_id": "A"})
    z = rng.normal(size=(n, 4))
    # rows stored in a shuffled order
    perm = rng.permutation(n)
    t = table([genes[k] for k in perm], ["A"] * n, z[perm])
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    scores, labels = [], []
    for a in range(n):
        for b in range(a + 1, n):
            scores.append(1.0 / (1.0 + math.exp(-(zn[a] @ zn[b]))))
            labels.append(adj[a, b] > 0)
    assert edge_auc(t, [g]) == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_edge_auc_skips_edgeless_graph():
    g = GeneGraph(("a", "b", "c"), np.zeros((3, 1)), np.zeros((3, 3)), {"dataset_id": "A"})
    t = table(["a", "b", "c"], ["A"] * 3, np.eye(3))
    assert math.isnan(edge_auc(t, [g]))


# -- silhouette and ASW ---------------------------------------------------------


def loop_silhouette(x, labels):
    n = len(x)
    out = []
    for i in range(n):
        dist = {}
        for j in range(n):
            if j != i:
                dist.setdefault(labels[j], []).append(float(np.linalg.norm(x[i] - x[j])))
        a = np.mean(dist[labels[i]])
        b = min(np.mean(v) for lab, v in dist.items() if lab != labels[i])
        out.append((b - a) / max(a, b))
    return np.array(out)


def test_silhouette_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(12, 3))
    labels = np.array(list("AAAABBBBCCCC"))
    np.testing.assert_allclose(silhouette_samples(x, labels), loop_silhouette(x, labels), rtol=0, atol=1e-12)


def test_asw_matches_oracle():
    rng = np.random.default_rng(2)
    t = two_dataset_table(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
    s = loop_silhouette(t.values, t.datasets)
    assert asw_batch(t) == pytest.approx(np.mean(1 - np.abs(s)), abs=1e-12)


def test_asw_perfect_mixing_and_separation():
    # regular simplex: every within-dataset distance equals every across distance
    simplex = np.eye(10)
    assert asw_batch(two_dataset_table(simplex[:5], simplex[5:])) == 1.0
    # exact twins: the twin sits at distance 0 on the other side, so |s| = 1/n
    x = np.random.default_rng(3).normal(size=(10, 4))
    assert asw_batch(two_dataset_table(x, x)) == pytest.approx(1 - 1 / 10, abs=1e-12)
    far = asw_batch(two_dataset_table(x * 1e-3, x * 1e-3 + 100.0))
    assert far < 1e-3


def test_asw_ignores_dataset_specific_genes():
    rng = np.random.default_rng(4)
    base = two_dataset_table(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    extra = table(["only"], ["A"], [[1e6, 1e6]])
    assert asw_batch(EmbeddingTable.concat([base, extra])) == asw_batch(base)


# -- iLISI ----------------------------------------------------------------------


def ilisi_oracle(x, labels, perplexity):
    """Inverse Simpson index with the kernel width solved by root finding."""
    n = len(x)
    k = min(int(3 * perplexity), n - 1)
    uniq = sorted(set(labels))
    vals = []
    for i in range(n):
        d = np.array([float(np.sum((x[i] - x[j]) ** 2)) if j != i else np.inf for j in range(n)])
        nb = np.argsort(d, kind="stable")[:k]
        dn = d[nb] - d[nb].min()

        def entropy_gap(log_beta):
            p = np.exp(-dn * math.exp(log_beta))
            p /= p.sum()
            return -np.sum(p[p > 0] * np.log(p[p > 0])) - math.log(perplexity)

        beta = math.exp(brentq(entropy_gap, -30, 30, xtol=1e-14, rtol=1e-15))
        p = np.exp(-dn * beta)
        p /= p.sum()
        mass = [sum(p[m] for m in range(k) if labels[nb[m]] == lab) for lab in uniq]
        vals.append(1.0 / sum(v * v for v in mass))
    return float(np.mean([(v - 1) / (len(uniq) - 1) for v in vals]))


def test_ilisi_matches_simpson_oracle():
    rng = np.random.default_rng(5)
    t = two_dataset_table(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)))
    assert ilisi(t, perplexity=2.0) == pytest.approx(ilisi_oracle(t.values, t.datasets, 2.0), abs=1e-9)


def test_ilisi_single_dataset_neighbourhoods():
    x = np.random.default_rng(6).normal(size=(20, 3))
    t = two_dataset_table(x, x + 1000.0)
    assert ilisi(t, perplexity=5.0) == pytest.approx(0.0, abs=1e-15)


def test_ilisi_uniform_mixing_near_one():
    # every point has an exact twin from the other dataset
    x = np.random.default_rng(7).normal(size=(100, 3))
    assert ilisi(two_dataset_table(x, x), perplexity=30.0) == pytest.approx(1.0, abs=0.05)


def test_ilisi_small_table_reduces_perplexity(caplog):
    x = np.random.default_rng(8).normal(size=(4, 2))
    value = ilisi(two_dataset_table(x, x), perplexity=30.0)
    assert 0.0 <= value <= 1.0
    assert "too few" in caplog.text


# -- k-NN graph and Leiden ------------------------------------------------------


def test_two_separated_blobs_give_two_clusters():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(30, 2))
    b = rng.normal(size=(30, 2)) + 50.0
    x = np.vstack([a, b])
    # separation oracle: every cross-blob distance exceeds every within-blob one
    within = max(np.ptp(a, axis=0).max(), np.ptp(b, axis=0).max()) * math.sqrt(2)
    assert np.linalg.norm(a[:, None] - b[None], axis=2).min() > 5 * within
    t = table([f"g{k}" for k in range(60)], ["A"] * 60, x)
    labels = cluster(t, seed=0)
    assert len(set(labels)) == 2
    assert len(set(labels[:30])) == 1 and len(set(labels[30:])) == 1


def test_duplicated_points_form_one_cluster():
    x = np.tile([[0.3, -1.0, 2.0]], (25, 1))
    t = table([f"g{k}" for k in range(25)], ["A"] * 25, x)
    assert set(cluster(t, seed=1)) == {0}


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_leiden_beats_trivial_partition(seed):
    rng = np.random.default_rng(seed)
    adj = knn_graph(rng.normal(size=(80, 3)), 8)
    labels = leiden(adj, seed=seed)
    assert modularity(adj, labels) >= modularity(adj, np.zeros(80, dtype=int))
    assert sorted(set(labels)) == list(range(labels.max() + 1))


def test_leiden_deterministic_under_seed():
    adj = knn_graph(np.random.default_rng(10).normal(size=(120, 4)), 10)
    assert np.array_equal(leiden(adj, seed=3), leiden(adj, seed=3))


def test_leiden_recovers_planted_cliques():
    n, size = 40, 10
    adj = np.zeros((n, n))
    for c in range(4):
        adj[c * size:(c + 1) * size, c * size:(c + 1) * size] = 1
    np.fill_diagonal(adj, 0)
    for c in range(4):
        a, b = c * size, ((c + 1) % 4) * size
        adj[a, b] = adj[b, a] = 1
    labels = leiden(adj, seed=0)
    assert len(set(labels)) == 4
    assert all(len(set(labels[c * size:(c + 1) * size])) == 1 for c in range(4))


def test_modularity_closed_form():
    # two disjoint triangles split correctly: Q = 1 - 2 * (6/12)^2 = 0.5
    adj = np.zeros((6, 6))
    for tri in ((0, 1, 2), (3, 4, 5)):
        for a, b in combinations(tri, 2):
            adj[a, b] = adj[b, a] = 1
    assert modularity(adj, [0, 0, 0, 1, 1, 1]) == pytest.approx(0.5, abs=1e-15)
    assert modularity(adj, [0] * 6) == pytest.approx(0.0, abs=1e-15)


# -- graph connectivity -----------------------------------------------------------


def test_gc_tight_cluster_is_one():
    x = np.random.default_rng(11).normal(size=(8, 2))
    t = table([f"g{k}" for k in range(8)], ["A"] * 8, x)
    assert graph_connectivity(t, np.zeros(8, dtype=int), k=7) == 1.0


def test_gc_group_split_three_plus_one():
    x = np.array([[0, 0], [0, 0.1], [0.1, 0], [10, 10], [10, 10.1], [10.1, 10], [10.1, 10.1]])
    tissues = ["t1"] * 4 + ["t2"] * 3
    t = table([f"g{k}" for k in range(7)], ["A"] * 7, x, tissues)
    # t1 keeps 3 of its 4 rows connected, t2 all 3
    assert graph_connectivity(t, np.zeros(7, dtype=int), k=2) == pytest.approx(6 / 7, abs=1e-15)


def union_find_gc(x, clusters, labels, k):
    scores = []
    for c in sorted(set(clusters)):
        rows = [i for i in range(len(x)) if clusters[i] == c]
        if len(rows) < 2:
            continue
        kk = min(k, len(rows) - 1)
        nbrs = set()
        for a in rows:
            order = sorted((r for r in rows if r != a), key=lambda r: np.linalg.norm(x[a] - x[r]))
            nbrs |= {frozenset((a, b)) for b in order[:kk]}
        num = 0
        for lab in sorted(set(labels[r] for r in rows)):
            grp = [r for r in rows if labels[r] == lab]
            parent = {r: r for r in grp}

            def find(r):
                while parent[r] != r:
                    r = parent[r]
                return r
            for e in nbrs:
                a, b = tuple(e)
                if a in parent and b in parent:
                    parent[find(a)] = find(b)
            num += max(Counter(find(r) for r in grp).values())
        scores.append(num / len(rows))
    return float(np.mean(scores))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gc_matches_union_find_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 30
    x = rng.normal(size=(n, 2))
    clusters = rng.integers(0, 3, n)
    tissues = list(rng.choice(["t1", "t2", "t3"], n))
    t = table([f"g{k}" for k in range(n)], ["A"] * n, x, tissues)
    assert graph_connectivity(t, clusters, k=3) == pytest.approx(union_find_gc(x, clusters, tissues, 3), abs=1e-12)


# -- CGR and NO --------------------------------------------------------------------


def test_cgr_extremes():
    assert common_gene_ratio([0, 0, 1, 1], ["a", "a", "b", "b"]) == 1.0
    assert common_gene_ratio([0, 0, 1, 1], ["a", "b", "a", "b"]) == 0.0


def test_cgr_counting_example():
    clusters = [0, 0, 0, 1, 1, 2, 2, 2, 2]
    genes = ["a", "a", "b", "c", "d", "e", "e", "e", "f"]
    # cluster 0: b unique (2 of 3 shared); cluster 1: none shared; cluster 2: 3 of 4 shared
    assert common_gene_ratio(clusters, genes) == (2 + 0 + 3) / 9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.sampled_from("abcdef")), min_size=1, max_size=40))
def test_cgr_matches_counting_oracle(rows):
    clusters, genes = zip(*rows)
    shared = 0
    for c in set(clusters):
        members = [g for cc, g in rows if cc == c]
        shared += sum(1 for g in members if members.count(g) >= 2)
    assert common_gene_ratio(clusters, genes) == shared / len(rows)


def path_graph(genes, dataset_id, edges):
    n = len(genes)
    adj = np.zeros((n, n))
    for a, b in edges:
        adj[a, b] = adj[b, a] = 1
    return GeneGraph(tuple(genes), np.zeros((n, 1)), adj, {"dataset_id": dataset_id})


def test_no_identical_graphs_is_one():
    genes = ["a", "b", "c", "d"]
    edges = [(0, 1), (1, 2), (2, 3)]
    ga, gb = path_graph(genes, "A", edges), path_graph(genes, "B", edges)
    t = table(genes * 2, ["A"] * 4 + ["B"] * 4, np.zeros((8, 2)))
    assert neighbors_overlap(t, [0, 0, 1, 1, 0, 0, 1, 1], [ga, gb]) == 1.0


def test_no_disjoint_neighbours_is_zero():
    ga = path_graph(["a", "b", "c"], "A", [(0, 1)])
    gb = path_graph(["a", "b", "c"], "B", [(0, 2)])
    t = table(["a", "b", "c"] * 2, ["A"] * 3 + ["B"] * 3, np.zeros((6, 2)))
    # only "a" repeats within cluster 0: {b} vs {c}
    assert neighbors_overlap(t, [0, 1, 2, 0, 3, 4], [ga, gb]) == 0.0


def test_no_set_oracle():
    ga = path_graph(["a", "b", "c", "d"], "A", [(0, 1), (0, 2), (2, 3)])
    gb = path_graph(["a", "b", "c", "e"], "B", [(0, 1), (0, 3), (1, 2)])
    gc = path_graph(["a", "c", "d"], "C", [(0, 1), (1, 2)])
    graphs = [ga, gb, gc]
    genes = ["a", "b", "c", "d", "a", "b", "c", "e", "a", "c", "d"]
    dsets = ["A"] * 4 + ["B"] * 4 + ["C"] * 3
    clusters = [0, 0, 1, 1, 0, 1, 1, 1, 0, 0, 1]
    t = table(genes, dsets, np.zeros((11, 2)))
    # cluster 0 (5 rows): a in A,B,C -> {b,c},{b,e},{c}: J = 1/3, 1/2, 0
    #                     b only once in cluster 0 (A); c once (C)
    # cluster 1 (6 rows): c in A,B -> {a,d} vs {b}: 0; d in A,C -> {c} vs {c}: 1
    j_a = np.mean([1 / 3, 1 / 2, 0.0])
    expected = (5 * j_a + 6 * np.mean([0.0, 1.0])) / 11
    assert neighbors_overlap(t, clusters, graphs) == pytest.approx(expected, abs=1e-15)


# -- aggregation ---------------------------------------------------------------------


def test_aggregate_dominating_method():
    rep = aggregate([[0.9] * 6, [0.1] * 6], ["good", "bad"])
    assert rep.avg_rank.tolist() == [1.0, 2.0]
    assert rep.avg_score.tolist() == [1.0, 0.0]


def test_aggregate_constant_column_and_ties():
    values = np.array([[0.5, 0.2, 0.3, 0.3, 0.1, 0.0],
                       [0.5, 0.4, 0.3, 0.1, 0.1, 0.0],
                       [0.5, 0.6, 0.9, 0.2, 0.1, 0.0]])
    rep = aggregate(values, ["a", "b", "c"])
    assert np.all(rep.scaled[:, [0, 4, 5]] == 0.5)
    assert rep.ranks[:, 2].tolist() == [2.5, 2.5, 1.0]
    assert rep.ranks[:, 0].tolist() == [2.0, 2.0, 2.0]
    # each column of ranks sums to 1 + 2 + 3
    assert np.all(rep.ranks.sum(axis=0) == 6.0)


def test_aggregate_preconditions():
    with pytest.raises(ValueError, match="two methods"):
        aggregate([[0.1] * 6], ["only"])
    with pytest.raises(ValueError, match="labels"):
        aggregate([[0.1] * 6, [0.2] * 6], ["a"])


def test_report_outputs():
    rep = aggregate([[0.9] * 6, [0.1] * 6], ["good", "bad"])
    assert '"avg_score": 1.0' in rep.to_json()
    assert rep.to_text().splitlines()[0].startswith("method")
    assert len(rep.plot_csv().splitlines()) == 1 + 2 * 6


# -- k-NN prediction --------------------------------------------------------------------


def test_knn_exact_match_k1():
    x = np.random.default_rng(12).normal(size=(10, 3))
    y = [f"c{k}" for k in range(10)]
    assert knn_predict(x, y, x[[4, 7]], k=1) == ["c4", "c7"]


def test_knn_separable_clouds():
    rng = np.random.default_rng(13)
    train_x = np.vstack([rng.normal(size=(20, 2)) - 10, rng.normal(size=(20, 2)) + 10])
    train_y = ["neg"] * 20 + ["pos"] * 20
    test_x = np.vstack([rng.normal(size=(10, 2)) - 10, rng.normal(size=(10, 2)) + 10])
    assert knn_predict(train_x, train_y, test_x) == ["neg"] * 10 + ["pos"] * 10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_knn_matches_exhaustive_oracle(seed, k):
    rng = np.random.default_rng(seed)
    train_x, test_x = rng.normal(size=(50, 3)), rng.normal(size=(10, 3))
    train_y = list(rng.choice(list("xyz"), 50))
    expected = []
    for q in test_x:
        dist = sorted((float(np.linalg.norm(q - p)), lab) for p, lab in zip(train_x, train_y))[:k]
        votes = Counter(lab for _, lab in dist)
        top = max(votes.values())
        tied = {lab for lab, c in votes.items() if c == top}
        expected.append(min(tied, key=lambda lab: np.mean([d for d, l2 in dist if l2 == lab])))
    assert knn_predict(train_x, train_y, test_x, k) == expected


def test_knn_errors():
    with pytest.raises(ValueError, match="empty"):
        knn_predict(np.zeros((0, 2)), [], np.zeros((1, 2)))
    with pytest.raises(ValueError, match="exceeds"):
        knn_predict(np.zeros((2, 2)), ["a", "b"], np.zeros((1, 2)), k=3)


# -- tables and whole-report properties ------------------------------------------------


def test_embedding_table_csv_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    t = two_dataset_table(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)))
    t.write(tmp_path / "e.csv")
    back = EmbeddingTable.read(tmp_path / "e.csv")
    assert back.genes == t.genes and back.datasets == t.datasets
    assert back.values.tobytes() == t.values.tobytes()


def test_embedding_table_rejects_duplicates_and_nan():
    with pytest.raises(ValueError, match="duplicate"):
        table(["a", "a"], ["A", "A"], np.zeros((2, 2)))
    with pytest.raises(ValueError, match="finite"):
        table(["a"], ["A"], [[np.nan, 0.0]])


@pytest.fixture(scope="module")
def fixture_table(small_collection):
    _, _, graphs = small_collection
    rng = np.random.default_rng(15)
    emb = {g.dataset_id: rng.normal(size=(g.n_nodes, 8)) for g in graphs}
    return EmbeddingTable.from_graphs(graphs, emb), graphs


def test_metrics_in_unit_interval(fixture_table):
    t, graphs = fixture_table
    values = evaluate(t, graphs)
    assert set(values) == {"ASW", "AUC", "iLISI", "GC", "CGR", "NO"}
    for name, v in values.items():
        assert 0.0 <= v <= 1.0, name


def test_metrics_invariant_to_row_order(fixture_table):
    t, graphs = fixture_table
    perm = np.random.default_rng(16).permutation(len(t))
    tp = t.subset(perm)
    assert asw_batch(tp) == pytest.approx(asw_batch(t), abs=1e-12)
    assert edge_auc(tp, graphs) == pytest.approx(edge_auc(t, graphs), abs=1e-12)
    assert ilisi(tp) == pytest.approx(ilisi(t), abs=1e-12)
    # cluster-level metrics given the same clusters carried along with the rows
    clusters = cluster(t, seed=0)
    cp = clusters[perm]
    assert graph_connectivity(tp, cp) == pytest.approx(graph_connectivity(t, clusters), abs=1e-12)
    assert common_gene_ratio(cp, tp.genes) == common_gene_ratio(clusters, t.genes)
    assert neighbors_overlap(tp, cp, graphs) == pytest.approx(neighbors_overlap(t, clusters, graphs), abs=1e-12)
