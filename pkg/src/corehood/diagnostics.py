"""Spatial autocorrelation tests, overdispersion tests, and chain
convergence statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import chi2


@dataclass
class TestResult:
    name: str
    statistic: float
    reference_distribution: str
    p_value: float | None
    verdict: str

    def row(self) -> dict:
        return {"test": self.name, "statistic": self.statistic,
                "p_value": self.p_value, "reference": self.reference_distribution,
                "verdict": self.verdict}


def _as_matrix(w) -> np.ndarray:
    return w.matrix if hasattr(w, "matrix") else np.asarray(w, dtype=float)


def morans_i(values: np.ndarray, w) -> float:
    """Classical global Moran's I on mean-centered values:
    (N / sum W) * (z' W z) / (z' z). Positive means similar values cluster."""
    z = np.asarray(values, dtype=float)
    wm = _as_matrix(w)
    n = z.shape[0]
    z = z - z.mean()
    denom = float(z @ z)
    if denom == 0:
        raise ValueError("zero variance: values are constant")
    s0 = wm.sum()
    if s0 <= 0:
        raise ValueError("spatial weights sum to zero")
    return float(n / s0 * (z @ wm @ z) / denom)


def morans_i_residuals(residuals: np.ndarray, w) -> float:
    """Log-linear residual variant: same quadratic form on the raw
    (uncentered) residuals, I_p = (n / sum W) * (r' W r) / (r' r)."""
    r = np.asarray(residuals, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite residuals")
    denom = float(r @ r)
    if denom == 0:
        raise ValueError("all residuals are zero")
    wm = _as_matrix(w)
    n = r.shape[0]
    s0 = wm.sum()
    if s0 <= 0:
        raise ValueError("spatial weights sum to zero")
    return float(n / s0 * (r @ wm @ r) / denom)


def morans_i_permutation_interval(values: np.ndarray, w, n_permutations: int = 999,
                                  seed: int = 0, alpha: float = 0.05
                                  ) -> tuple[float, float]:
    """Reference interval for Moran's I under random relabelling; an
    extension for gauging residual statistics that lack a closed-form null."""
    rng = np.random.default_rng(seed)
    v = np.asarray(values, dtype=float)
    sims = np.empty(n_permutations)
    for k in range(n_permutations):
        sims[k] = morans_i(rng.permutation(v), w)
    return (float(np.quantile(sims, alpha / 2)),
            float(np.quantile(sims, 1 - alpha / 2)))


def potthoff_whittinghill(y: np.ndarray) -> TestResult:
    """Index-of-dispersion test sum (y - ybar)^2 / ybar against chi-square
    with N - 1 degrees of freedom (upper tail)."""
    y = np.asarray(y, dtype=float)
    ybar = y.mean()
    if ybar <= 0:
        raise ValueError("mean count is zero; dispersion test undefined")
    stat = float(np.sum((y - ybar) ** 2) / ybar)
    df = len(y) - 1
    p = float(chi2.sf(stat, df))
    verdict = ("overdispersion detected (reject equidispersion)"
               if p < 0.05 else "no evidence of overdispersion")
    return TestResult("potthoff_whittinghill", stat, f"chi2({df})", p, verdict)


def lagrange_multiplier(y: np.ndarray, mu: np.ndarray) -> TestResult:
    """Score test of Poisson against the quadratic-variance negative
    binomial: (sum [(y - mu)^2 - y])^2 / (2 sum mu^2), chi-square with one
    degree of freedom under the Poisson null."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if y.shape != mu.shape:
        raise ValueError(f"length mismatch: y has {y.shape}, mu has {mu.shape}")
    if np.any(mu <= 0):
        raise ValueError("fitted means must be positive")
    denom = 2.0 * float(np.sum(mu ** 2))
    stat = float(np.sum((y - mu) ** 2 - y)) ** 2 / denom
    p = float(chi2.sf(stat, 1))
    verdict = ("overdispersion detected (reject equidispersion)"
               if p < 0.05 else "no evidence of overdispersion")
    return TestResult("lagrange_multiplier", stat, "chi2(1)", p, verdict)


def gelman_rubin(chains: Sequence[np.ndarray]) -> np.ndarray:
    """Split R-hat per parameter: each chain is halved and the classic
    between/within variance ratio is computed over the halves. Degenerate
    agreement (zero between-half variance) reports exactly 1."""
    if len(chains) < 2:
        raise ValueError("need at least 2 chains")
    arrs = [np.atleast_2d(np.asarray(c, dtype=float)) for c in chains]
    length = arrs[0].shape[0]
    dim = arrs[0].shape[1]
    for a in arrs:
        if a.shape != (length, dim):
            raise ValueError("chains must have identical shapes")
    if length < 10:
        raise ValueError(f"chains too short for split R-hat: {length} draws")

    half = length // 2
    halves = []
    for a in arrs:
        halves.append(a[:half])
        halves.append(a[length - half:])
    draws = np.stack(halves)          # m x n x dim
    m, n, _ = draws.shape

    chain_means = draws.mean(axis=1)                  # m x dim
    within = draws.var(axis=1, ddof=1).mean(axis=0)   # dim
    between = n * chain_means.var(axis=0, ddof=1)     # dim

    rhat = np.empty(dim)
    for j in range(dim):
        if between[j] == 0.0:
            rhat[j] = 1.0
        elif within[j] == 0.0:
            rhat[j] = np.inf
        else:
            var_plus = (n - 1) / n * within[j] + between[j] / n
            rhat[j] = np.sqrt(var_plus / within[j])
    return rhat


def diagnostics_table(results: Sequence[TestResult]) -> "object":
    import pandas as pd

    return pd.DataFrame([r.row() for r in results])
