import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from genegraph.coexpression import (
    build_edges,
    cscore_statistic,
    cscore_test,
    estimate_from_arrays,
    estimate_moments_irls,
    write_edges,
)
from genegraph.data import CountMatrix, DataError, SyntheticSpec, generate_synthetic


def counts(x):
    x = np.asarray(x)
    n, p = x.shape
    return CountMatrix(sp.csc_matrix(x), [f"c{i}" for i in range(n)], [f"g{j}" for j in range(p)])


def module_labels(truth, genes):
    lookup = truth.module_of()
    return np.array([lookup.get(g, -1) for g in genes])


def test_independent_genes_have_small_correlation():
    spec = SyntheticSpec(n_datasets=1, n_cells=2000, n_genes=60, n_modules=0, seed=1)
    (ds,), _ = generate_synthetic(spec)
    est = estimate_moments_irls(ds.counts)
    off = est.rho[~np.eye(est.rho.shape[0], dtype=bool)]
    assert np.abs(off).mean() < 0.05


def test_planted_block_correlation_recovered():
    spec = SyntheticSpec(n_datasets=1, n_cells=2000, n_genes=60, n_modules=2, module_size=10, seed=2)
    (ds,), truth = generate_synthetic(spec)
    est = estimate_moments_irls(ds.counts)
    labels = module_labels(truth, ds.counts.genes)
    same = (labels[:, None] == labels[None, :]) & (labels[:, None] >= 0)
    np.fill_diagonal(same, False)
    assert abs(est.rho[same].mean() - 0.8) < 0.1


def test_single_gene_estimate():
    rng = np.random.default_rng(0)
    x = rng.poisson(5, size=(50, 3))
    est = estimate_moments_irls(counts(x), [1])
    assert est.sigma.shape == (1, 1)
    np.testing.assert_array_equal(est.rho, [[1.0]])


def test_too_few_cells():
    with pytest.raises(DataError, match="at least 30"):
        estimate_moments_irls(counts(np.ones((10, 2), dtype=int)))


def test_estimate_symmetry_and_unit_diagonal(small_collection):
    datasets, _, _ = small_collection
    est = estimate_moments_irls(datasets[0].counts)
    assert np.array_equal(est.sigma, est.sigma.T)
    assert np.array_equal(np.diag(est.rho), np.ones(est.rho.shape[0]))
    assert np.all(np.abs(est.rho) <= 1.0)


def test_moment_estimates_match_ols_when_poisson():
    # pure Poisson data: latent variance 0, mean s * mu; OLS oracle of x on s
    rng = np.random.default_rng(4)
    s = rng.uniform(500, 1500, 3000)
    mu = np.array([0.002, 0.005, 0.01])
    x = rng.poisson(s[:, None] * mu[None, :])
    est = estimate_from_arrays(x, s, ["a", "b", "c"])
    np.testing.assert_allclose(est.mu, mu, rtol=0.03)
    assert np.all(np.diag(est.sigma) < 1e-6)


def test_duplicated_gene_is_significant():
    rng = np.random.default_rng(5)
    n = 500
    s = np.exp(rng.normal(np.log(1000), 0.3, n))
    z = rng.gamma(2.0, 0.5, size=(n, 1)) * 0.005
    col = rng.poisson(s[:, None] * z)
    other = rng.poisson(s[:, None] * rng.gamma(2.0, 0.5, size=(n, 1)) * 0.005)
    x = np.column_stack([col, col, other]).astype(float)
    est = estimate_from_arrays(x, s, ["a", "a2", "b"])
    t, p = cscore_test(est, x=x)
    assert abs(t[0, 1]) > 10
    assert p[0, 1] < 1e-10
    assert p[0, 0] == 0.0


def test_statistic_matches_loop_oracle():
    rng = np.random.default_rng(8)
    n, p = 40, 3
    s = rng.uniform(1, 3, n)
    x = rng.poisson(4, size=(n, p)).astype(float)
    expected = rng.uniform(2, 6, size=(n, p))
    variance = rng.uniform(1, 5, size=(n, p))
    t = cscore_statistic(x, s, expected, variance)
    for j in range(p):
        for k in range(p):
            num = den = 0.0
            for i in range(n):
                g = 1.0 / (variance[i, j] * variance[i, k])
                num += s[i] ** 2 * (x[i, j] - expected[i, j]) * (x[i, k] - expected[i, k]) * g
                den += s[i] ** 4 * variance[i, j] * variance[i, k] * g ** 2
            assert t[j, k] == pytest.approx(num / np.sqrt(den), rel=1e-12)


def test_batch_transform_leaves_statistic_unchanged():
    # x' = a x + b with means a*s*mu + b and variances scaled by a^2
    rng = np.random.default_rng(6)
    n, p = 300, 5
    s = rng.uniform(500, 2000, n)
    mu = rng.uniform(0.001, 0.01, p)
    x = rng.poisson(s[:, None] * mu[None, :]).astype(float)
    est = estimate_from_arrays(x, s, list("abcde"))
    expected = s[:, None] * est.mu[None, :]
    variance = expected + (s ** 2)[:, None] * np.diag(est.sigma)[None, :]
    t = cscore_statistic(x, s, expected, variance)
    a, b = 3.0, 7.0
    t2 = cscore_statistic(a * x + b, s, a * expected + b, a * a * variance)
    np.testing.assert_allclose(t2, t, rtol=1e-9)


def test_zero_variance_gene_gets_p_one():
    rng = np.random.default_rng(2)
    n = 60
    s = np.full(n, 100.0)
    x = np.column_stack([rng.poisson(5, n), np.zeros(n)]).astype(float)
    est = estimate_from_arrays(x, s, ["a", "z"])
    _, p = cscore_test(est, x=x)
    assert p[0, 1] == 1.0 and p[1, 0] == 1.0


def test_null_false_positive_rate_on_synthetic():
    spec = SyntheticSpec(n_datasets=1, n_cells=1000, n_genes=120, n_modules=0, seed=9)
    (ds,), _ = generate_synthetic(spec)
    est = estimate_moments_irls(ds.counts)
    _, p = cscore_test(est, ds.counts)
    iu = np.triu_indices(p.shape[0], 1)
    assert (p[iu] < 0.005).mean() <= 0.01


# -- edges --------------------------------------------------------------------


def test_edges_empty_when_all_p_one():
    assert len(build_edges(np.ones((4, 4)))) == 0


def test_edges_threshold_example():
    p = np.full((3, 3), 0.5)
    p[0, 1] = p[1, 0] = 0.004
    np.fill_diagonal(p, 0.0)
    assert build_edges(p, 0.005).edges == [(0, 1)]


def test_edges_alpha_validation():
    with pytest.raises(ValueError):
        build_edges(np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        build_edges(np.ones((2, 2)), 1.0)
    with pytest.raises(ValueError):
        build_edges(np.array([[0.0, 0.1], [0.2, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 15))
def test_edges_match_scan_oracle(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 0.02, size=(n, n))
    p = np.triu(p, 1) + np.triu(p, 1).T
    oracle = [(i, j) for i in range(n) for j in range(i + 1, n) if p[i, j] < 0.005]
    assert build_edges(p, 0.005).edges == oracle


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_edges_invariant_to_gene_order(seed):
    rng = np.random.default_rng(seed)
    n = 8
    p = rng.uniform(0, 0.02, size=(n, n))
    p = np.triu(p, 1) + np.triu(p, 1).T
    perm = rng.permutation(n)
    original = {frozenset(e) for e in build_edges(p).edges}
    permuted = {frozenset((perm[i], perm[j])) for i, j in build_edges(p[np.ix_(perm, perm)]).edges}
    assert permuted == original


def test_write_edges(tmp_path, small_collection):
    datasets, _, _ = small_collection
    est = estimate_moments_irls(datasets[0].counts)
    _, p = cscore_test(est, datasets[0].counts)
    edges = build_edges(p)
    write_edges(tmp_path / "e.tsv", est, edges)
    lines = (tmp_path / "e.tsv").read_text().splitlines()
    assert lines[0] == "gene_a\tgene_b\trho\tpval"
    assert len(lines) == len(edges) + 1
    a, b, rho, pv = lines[1].split("\t")
    assert float(pv) < 0.005 and -1 <= float(rho) <= 1
