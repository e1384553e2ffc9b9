"""Depth-adjusted co-expression: moment-based IRLS estimation of latent means
and covariances under the Poisson measurement model, the pairwise
independence test, and edge thresholding.

Model: latent expression ``z_i ~ F(mu, Sigma)`` and ``x_ij | z_ij ~ Poisson(s_i z_ij)``
with ``s_i`` the depth of cell ``i``. Then

    E[x_ij]                         = s_i mu_j
    Var[x_ij]                       = s_i mu_j + s_i^2 sigma_jj
    E[(x_ij - s_i mu_j)(x_ij' - s_i mu_j')] = s_i^2 sigma_jj'

and each moment equation is solved by weighted least squares over cells.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import CountMatrix, DataError

log = logging.getLogger(__name__)


@dataclass
class CoexpressionEstimate:
    genes: tuple[str, ...]
    mu: np.ndarray
    sigma: np.ndarray          # p x p latent covariance
    rho: np.ndarray            # p x p correlation, unit diagonal
    depths: np.ndarray
    weights: np.ndarray        # n x p, 1 / (s mu + s^2 sigma_jj) at the final iterate
    degenerate: np.ndarray     # genes whose variance estimate was floored at 0
    converged: bool
    n_iter: int
    stat: np.ndarray | None = field(default=None, repr=False)
    pvals: np.ndarray | None = field(default=None, repr=False)


@dataclass
class EdgeSet:
    edges: list[tuple[int, int]]
    alpha: float

    def __len__(self) -> int:
        return len(self.edges)

    def as_array(self) -> np.ndarray:
        return np.array(self.edges, dtype=np.int64).reshape(-1, 2)


def _variance_model(s: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    return s[:, None] * mu[None, :] + (s ** 2)[:, None] * var[None, :]


def estimate_moments_irls(
    m: CountMatrix,
    genes=None,
    max_iter: int = 50,
    tol: float = 1e-6,
    min_cells: int = 30,
) -> CoexpressionEstimate:
    """Moment-based IRLS estimates of latent mean, covariance and correlation.

    Means and variances are iterated jointly: each round reweights cells by the
    inverse of the current modelled variance (for the mean equation) and its
    square (for the variance equation). Covariances use the product weights
    ``g_ijj' = w_ij w_ij'`` of the final round. Negative variances are floored
    at zero; those genes get a zero correlation row.
    """
    genes = list(range(m.n_genes)) if genes is None else list(genes)
    if m.n_cells < min_cells:
        raise DataError(f"need at least {min_cells} cells, got {m.n_cells}")
    s = m.depths().astype(np.float64)
    x = m.dense(genes)
    return estimate_from_arrays(x, s, tuple(m.genes[j] for j in genes), max_iter=max_iter, tol=tol)


def estimate_from_arrays(x, s, names, max_iter=50, tol=1e-6) -> CoexpressionEstimate:
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    s2, s3, s4 = s ** 2, s ** 3, s ** 4

    # ordinary least squares start
    mu = (s @ x) / s2.sum()
    resid = x - s[:, None] * mu[None, :]
    var = (s2 @ (resid ** 2 - s[:, None] * mu[None, :])) / s4.sum()

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        v = _variance_model(s, mu, np.maximum(var, 0.0))
        v = np.where(v > 0, v, 1.0)
        w = 1.0 / v
        mu_new = (w * s[:, None] * x).sum(axis=0) / (w * s2[:, None]).sum(axis=0)
        resid = x - s[:, None] * mu_new[None, :]
        h = w ** 2
        var_new = (h * s2[:, None] * (resid ** 2 - s[:, None] * mu_new[None, :])).sum(axis=0) / (
            h * s4[:, None]
        ).sum(axis=0)
        old = np.concatenate([mu, var])
        new = np.concatenate([mu_new, var_new])
        change = np.linalg.norm(new - old) / max(np.linalg.norm(old), 1e-300)
        mu, var = mu_new, var_new
        if change < tol:
            converged = True
            break
    if not converged:
        log.warning("IRLS did not converge in %d iterations", max_iter)

    degenerate = var <= 0
    var = np.maximum(var, 0.0)
    v = _variance_model(s, mu, var)
    w = np.where(v > 0, 1.0 / np.where(v > 0, v, 1.0), 0.0)
    resid = x - s[:, None] * mu[None, :]

    a = s[:, None] * resid * w          # s_i (x_ij - s_i mu_j) w_ij
    b = s2[:, None] * w                 # s_i^2 w_ij
    num = a.T @ a
    den = b.T @ b
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = np.where(den > 0, num / den, 0.0)
    sigma = 0.5 * (sigma + sigma.T)
    np.fill_diagonal(sigma, var)

    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        rho = sigma / np.outer(sd, sd)
    rho = np.clip(np.nan_to_num(rho, nan=0.0, posinf=0.0, neginf=0.0), -1.0, 1.0)
    rho[degenerate, :] = 0.0
    rho[:, degenerate] = 0.0
    np.fill_diagonal(rho, 1.0)
    return CoexpressionEstimate(
        genes=tuple(names), mu=mu, sigma=sigma, rho=rho, depths=s, weights=w,
        degenerate=degenerate, converged=converged, n_iter=it,
    )


def cscore_statistic(x, s, expected, variance, weights=None) -> np.ndarray:
    """Pairwise test statistic from explicit first and second moment models.

    ``expected`` and ``variance`` are n x p matrices of E[x_ij] and Var[x_ij];
    ``weights`` (n x p) defines ``g_ijj' = w_ij w_ij'`` and defaults to
    ``1/variance``. Returns the p x p matrix

        T_jj' = sum_i s_i^2 r_ij r_ij' g_ijj'
                / sqrt(sum_i s_i^4 v_ij v_ij' g_ijj'^2)
    """
    x = np.asarray(x, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    if weights is None:
        with np.errstate(divide="ignore"):
            weights = np.where(variance > 0, 1.0 / variance, 0.0)
    r = x - expected
    a = s[:, None] * r * weights
    b = (s ** 2)[:, None] * variance * weights ** 2
    num = a.T @ a
    den = np.sqrt(b.T @ b)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(den > 0, num / den, 0.0)
    return 0.5 * (t + t.T)


def cscore_test(est: CoexpressionEstimate, m: CountMatrix | None = None, x=None):
    """Statistic and two-sided normal p-value matrices for every gene pair.

    Pairs involving a gene with zero modelled variance get ``p = 1``; the
    diagonal carries ``p = 0`` by convention and never becomes an edge.
    """
    if x is None:
        if m is None:
            raise ValueError("need the count matrix or its dense columns")
        index = {g: j for j, g in enumerate(m.genes)}
        x = m.dense([index[g] for g in est.genes])
    s = est.depths
    expected = s[:, None] * est.mu[None, :]
    variance = _variance_model(s, est.mu, np.diag(est.sigma))
    t = cscore_statistic(x, s, expected, variance, est.weights)
    p = 2.0 * stats.norm.sf(np.abs(t))
    bad = est.degenerate | (np.diag(est.sigma) <= 0) & (est.mu <= 0)
    zero_var = ~np.any(variance > 0, axis=0)
    bad = bad | zero_var
    p[bad, :] = 1.0
    p[:, bad] = 1.0
    np.fill_diagonal(p, 0.0)
    t[bad, :] = 0.0
    t[:, bad] = 0.0
    est.stat, est.pvals = t, p
    return t, p


def build_edges(pvals: np.ndarray, alpha: float = 0.005) -> EdgeSet:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    pvals = np.asarray(pvals)
    if pvals.shape[0] != pvals.shape[1] or not np.array_equal(pvals, pvals.T):
        raise ValueError("p-value matrix must be square and symmetric")
    iu, ju = np.triu_indices(pvals.shape[0], k=1)
    hit = pvals[iu, ju] < alpha
    return EdgeSet([(int(i), int(j)) for i, j in zip(iu[hit], ju[hit])], alpha)


def write_edges(path, est: CoexpressionEstimate, edges: EdgeSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("gene_a\tgene_b\trho\tpval\n")
        for i, j in edges.edges:
            fh.write(f"{est.genes[i]}\t{est.genes[j]}\t{float(est.rho[i, j])!r}\t{float(est.pvals[i, j])!r}\n")
