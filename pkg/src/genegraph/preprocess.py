"""Negative-binomial GLM normalization, Pearson residuals, HVG selection and
SPARK-X style spatial expression tests."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .data import CountMatrix, DataError

log = logging.getLogger(__name__)

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
LOG_THETA_BOUNDS = (np.log(1e-3), np.log(1e6))
KERNELS = ("identity", "gaussian", "cosine")


@dataclass
class NBFit:
    genes: tuple[str, ...]
    intercept: np.ndarray      # beta_g0
    theta: np.ndarray          # per-gene ML dispersion
    theta_reg: np.ndarray      # smoothed against log gene mean
    log_mean: np.ndarray       # log10 mean count, the smoothing covariate
    fallback: np.ndarray       # True where the moment estimate replaced the MLE

    def mu(self, depths: np.ndarray) -> np.ndarray:
        return np.exp(self.intercept[None, :] + np.log(depths)[:, None])


@dataclass
class ResidualMatrix:
    values: np.ndarray         # cells x genes
    genes: tuple[str, ...]
    barcodes: tuple[str, ...]

    @property
    def variance(self) -> np.ndarray:
        return self.values.var(axis=0)


def nb_loglik(x: np.ndarray, mu: np.ndarray, theta) -> np.ndarray:
    """Per-gene NB log-likelihood summed over cells (columns = genes)."""
    theta = np.broadcast_to(theta, mu.shape[1:])
    t = theta[None, :]
    ll = (
        gammaln(x + t) - gammaln(t) - gammaln(x + 1.0)
        + t * (np.log(t) - np.log(t + mu))
        + x * (np.log(mu) - np.log(t + mu))
    )
    return ll.sum(axis=0)


def _profile_intercept(x, log_s, theta, beta, max_iter=100, tol=1e-12):
    """Newton iterations on the intercept for fixed theta, vectorized over genes."""
    t = theta[None, :]
    converged = np.zeros(x.shape[1], dtype=bool)
    for _ in range(max_iter):
        mu = np.exp(beta[None, :] + log_s[:, None])
        w = t / (t + mu)
        score = ((x - mu) * w).sum(axis=0)
        info = (mu * w * (t + x) / (t + mu)).sum(axis=0)
        step = score / info
        beta = beta + np.where(converged, 0.0, step)
        converged |= np.abs(step) < tol
        if converged.all():
            break
    return beta, converged


def fit_nb_glm(m: CountMatrix, window: int = 51, max_iter: int = 100, tol: float = 1e-8) -> NBFit:
    """Per-gene NB regression ``ln mu_gc = beta_g0 + ln s_c`` with profiled theta.

    The intercept is solved by Newton's method for each candidate theta and
    theta by golden-section search on log theta in [1e-3, 1e6]. Genes whose
    fit does not converge fall back to a method-of-moments theta. The ML
    thetas are then smoothed with a rolling median of ``window`` genes ordered
    by log mean.
    """
    x = m.dense()
    if np.any(x.sum(axis=0) == 0):
        raise DataError("all-zero gene; run qc_filter first")
    s = m.depths().astype(np.float64)
    if np.any(s <= 0):
        raise DataError("cells with zero depth; run qc_filter first")
    log_s = np.log(s)
    p = x.shape[1]
    beta0 = np.log(x.sum(axis=0) / s.sum())

    def profile(log_theta, beta):
        theta = np.exp(log_theta)
        beta, ok = _profile_intercept(x, log_s, theta, beta, max_iter=max_iter)
        mu = np.exp(beta[None, :] + log_s[:, None])
        return nb_loglik(x, mu, theta), beta, ok

    lo = np.full(p, LOG_THETA_BOUNDS[0])
    hi = np.full(p, LOG_THETA_BOUNDS[1])
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, bc, okc = profile(c, beta0)
    fd, bd, okd = profile(d, beta0)
    ok = okc & okd
    prev_best = np.maximum(fc, fd)
    for _ in range(max_iter):
        left = fc > fd   # maximum lies in [lo, d]
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        new_c = np.where(left, hi - _GOLDEN * (hi - lo), d)
        new_d = np.where(left, c, lo + _GOLDEN * (hi - lo))
        probe = np.where(left, new_c, new_d)
        fp, bp, okp = profile(probe, np.where(left, bc, bd))
        ok &= okp
        fc, fd, bc, bd = (
            np.where(left, fp, fd),
            np.where(left, fc, fp),
            np.where(left, bp, bd),
            np.where(left, bc, bp),
        )
        c, d = new_c, new_d
        best = np.maximum(fc, fd)
        if np.all(np.abs(best - prev_best) < tol) and np.all(hi - lo < 1e-6):
            break
        prev_best = best
    use_c = fc >= fd
    log_theta = np.where(use_c, c, d)
    beta = np.where(use_c, bc, bd)
    theta = np.exp(log_theta)

    fallback = ~ok | ~np.isfinite(beta) | ~np.isfinite(theta)
    if fallback.any():
        warnings.warn(f"NB fit fell back to moments for {int(fallback.sum())} genes", RuntimeWarning)
        beta = np.where(fallback, beta0, beta)
        theta = np.where(fallback, _moment_theta(x, s), theta)

    log_mean = np.log10(x.mean(axis=0))
    theta_reg = np.exp(rolling_median(np.log(theta), log_mean, window))
    return NBFit(m.genes, beta, theta, theta_reg, log_mean, fallback)


def _moment_theta(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    mu = s[:, None] * (x.sum(axis=0) / s.sum())[None, :]
    excess = ((x - mu) ** 2 - mu).mean(axis=0)
    mean_sq = (mu ** 2).mean(axis=0)
    with np.errstate(divide="ignore"):
        theta = np.where(excess > 0, mean_sq / excess, np.exp(LOG_THETA_BOUNDS[1]))
    return np.clip(theta, np.exp(LOG_THETA_BOUNDS[0]), np.exp(LOG_THETA_BOUNDS[1]))


def rolling_median(values: np.ndarray, covariate: np.ndarray, window: int) -> np.ndarray:
    """Median of ``values`` over the ``window`` nearest genes in covariate order."""
    order = np.argsort(covariate, kind="stable")
    ranked = values[order]
    n = len(values)
    half = window // 2
    out = np.empty(n)
    for r in range(n):
        lo = max(0, min(r - half, n - window))
        out[r] = np.median(ranked[lo:lo + min(window, n)])
    result = np.empty(n)
    result[order] = out
    return result


def pearson_residuals(m: CountMatrix, fit: NBFit, clip: bool = True) -> ResidualMatrix:
    if fit.genes != m.genes:
        raise DataError("fit does not correspond to this count matrix")
    x = m.dense()
    mu = fit.mu(m.depths().astype(np.float64))
    sd = np.sqrt(mu + mu ** 2 / fit.theta_reg[None, :])
    z = (x - mu) / sd
    if clip:
        bound = np.sqrt(m.n_cells)
        z = np.clip(z, -bound, bound)
    return ResidualMatrix(z, m.genes, m.barcodes)


def select_hvgs(r: ResidualMatrix, k: int = 1000) -> list[int]:
    """Indices of the ``k`` genes with largest residual variance, descending."""
    p = len(r.genes)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > p:
        raise ValueError(f"k={k} exceeds gene count {p}")
    var = r.variance
    # rank genes by name so ties resolve lexicographically
    name_rank = np.empty(p, dtype=np.int64)
    name_rank[np.argsort(np.array(r.genes, dtype=object), kind="stable")] = np.arange(p)
    order = np.lexsort((name_rank, -var))
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# Spatial test


@dataclass
class SpatialTestResult:
    """Per-kernel statistics and p-values for every gene.

    ``statistic[k]`` is ``n * trace(E_C Sigma_C)``, the scale on which the
    null distribution is chi-square with ``df`` degrees of freedom.
    """

    genes: tuple[str, ...]
    kernels: tuple[str, ...]
    statistic: np.ndarray      # kernels x genes
    pvalue: np.ndarray         # kernels x genes
    combined: np.ndarray       # Bonferroni-adjusted minimum over kernels
    df: int
    n: int

    @property
    def max_statistic(self) -> np.ndarray:
        return self.statistic.max(axis=0)

    def to_tsv(self) -> str:
        cols = ["gene"]
        for k in self.kernels:
            cols += [f"statistic_{k}", f"p_{k}"]
        cols.append("p_combined")
        lines = ["\t".join(cols)]
        for j, g in enumerate(self.genes):
            row = [g]
            for k in range(len(self.kernels)):
                row += [repr(float(self.statistic[k, j])), repr(float(self.pvalue[k, j]))]
            row.append(repr(float(self.combined[j])))
            lines.append("\t".join(row))
        return "\n".join(lines) + "\n"


def kernel_coordinates(coords: np.ndarray, kernel: str) -> np.ndarray:
    """Centered coordinate features for one spatial kernel."""
    s = np.asarray(coords, dtype=np.float64)
    s = s - s.mean(axis=0)
    if kernel == "identity":
        out = s
    elif kernel == "gaussian":
        sigma = s.std(axis=0)
        if np.any(sigma == 0):
            raise DataError("degenerate coordinates")
        out = np.exp(-(s ** 2) / (2.0 * sigma ** 2))
    elif kernel == "cosine":
        period = s.max(axis=0) - s.min(axis=0)
        if np.any(period == 0):
            raise DataError("degenerate coordinates")
        out = np.cos(2.0 * np.pi * s / period)
    else:
        raise ValueError(f"unknown kernel {kernel!r}")
    return out - out.mean(axis=0)


def _orthonormal_basis(sc: np.ndarray) -> np.ndarray:
    u, sv, _ = np.linalg.svd(sc, full_matrices=False)
    if sv.size < 2 or sv[-1] <= 1e-10 * max(sv[0], 1e-300):
        raise DataError("degenerate coordinates")
    return u


def sparkx_test(m: CountMatrix, kernels=KERNELS) -> SpatialTestResult:
    """Test each gene's expression for dependence on barcode position.

    For expression ``y`` and kernel coordinates ``S`` (both centered) the
    projections ``E = y(y'y)^-1 y'`` and ``Sigma = S(S'S)^-1 S'`` give
    ``trace(E Sigma)``, the squared multiple correlation of ``y`` on ``S``.
    ``n * trace`` is asymptotically chi-square with ``rank(S) = 2`` degrees of
    freedom under independence.
    """
    if m.coords is None:
        raise DataError("spatial test needs coordinates")
    y = m.dense()
    n = y.shape[0]
    yc = y - y.mean(axis=0)
    ss = (yc ** 2).sum(axis=0)
    constant = ss <= 1e-12 * np.maximum(1.0, (y ** 2).sum(axis=0))
    safe_ss = np.where(constant, 1.0, ss)
    stat = np.zeros((len(kernels), y.shape[1]))
    pval = np.ones_like(stat)
    df = 2
    for k, kernel in enumerate(kernels):
        q = _orthonormal_basis(kernel_coordinates(m.coords, kernel))
        proj = q.T @ yc
        trace = (proj ** 2).sum(axis=0) / safe_ss
        stat[k] = np.where(constant, 0.0, n * trace)
        pval[k] = np.where(constant, 1.0, stats.chi2.sf(stat[k], df))
    combined = np.minimum(1.0, pval.min(axis=0) * len(kernels))
    return SpatialTestResult(m.genes, tuple(kernels), stat, pval, combined, df, n)


def select_se_genes(res: SpatialTestResult, k: int = 1000) -> list[int]:
    p = len(res.genes)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > p:
        raise ValueError(f"k={k} exceeds gene count {p}")
    name_rank = np.empty(p, dtype=np.int64)
    name_rank[np.argsort(np.array(res.genes, dtype=object), kind="stable")] = np.arange(p)
    order = np.lexsort((name_rank, -res.max_statistic, res.combined))
    return [int(i) for i in order[:k]]
