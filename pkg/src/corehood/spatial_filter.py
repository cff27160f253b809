"""Moran eigenvector basis for spatial filtering.

The basis consists of eigenvectors of M C M, where C is a spatial
connectivity matrix and M projects orthogonally to the fixed-effect design
(intercept included). Only strongly positive-autocorrelation eigenvectors
are retained: eigenvalue at least ``threshold`` times the largest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_EIGEN_THRESHOLD = 0.25
# above this size, a truncated symmetric solver on the top quarter of the
# spectrum is enough: retained eigenvalues must be >= 0.25 * lambda_max
DENSE_EIG_LIMIT = 5000


@dataclass
class EigenBasis:
    """Selected Moran eigenvectors (columns of ``vectors``) with their
    eigenvalues in descending order."""

    vectors: np.ndarray
    values: np.ndarray
    lambda_max: float
    threshold: float

    @property
    def size(self) -> int:
        return self.vectors.shape[1]


def residual_projector(design: np.ndarray) -> np.ndarray:
    """Orthogonal projector onto the complement of the design's column space,
    M = I - X (X'X)^-1 X', computed via QR for stability.

    ``design`` must include the intercept column and have full column rank;
    rank deficiency raises with the dependent column indices named.
    """
    x = np.asarray(design, dtype=float)
    n, p = x.shape
    if n <= p:
        raise ValueError(f"need more rows than columns, got {n} x {p}")
    q, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(n, p) * np.finfo(float).eps
    rank = int(np.sum(diag > tol))
    if rank < p:
        dependent = sorted(int(c) for c in piv[rank:])
        raise ValueError(f"design is rank deficient; dependent column(s): {dependent}")
    m = np.eye(n) - q @ q.T
    return (m + m.T) / 2.0


def moran_eigenbasis(projector: np.ndarray, connectivity: np.ndarray,
                     threshold: float = DEFAULT_EIGEN_THRESHOLD) -> EigenBasis:
    """Eigendecompose M C M and retain eigenvectors with eigenvalue > 0 and
    eigenvalue / lambda_max >= threshold, descending, with a fixed sign
    convention (first non-negligible entry positive) for reproducibility."""
    m = np.asarray(projector, dtype=float)
    c = np.asarray(connectivity, dtype=float)
    if hasattr(connectivity, "matrix"):  # accept ConnectivityMatrix too
        c = connectivity.matrix
    s = m @ c @ m
    asym = np.abs(s - s.T).max()
    if asym > 1e-8:
        raise ValueError(f"M C M unexpectedly asymmetric (max dev {asym:.2e})")
    s = (s + s.T) / 2.0

    n = s.shape[0]
    if n > DENSE_EIG_LIMIT:
        from scipy.sparse.linalg import eigsh

        k = int(np.ceil(n / 4))
        vals, vecs = eigsh(s, k=k, which="LA")
    else:
        vals, vecs = np.linalg.eigh(s)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]

    lam_max = float(vals[0])
    if lam_max <= 0:
        raise ValueError("no positive spatial autocorrelation basis")
    keep = (vals > 0) & (vals / lam_max >= threshold)
    vals = vals[keep]
    vecs = vecs[:, keep]
    for j in range(vecs.shape[1]):
        col = vecs[:, j]
        nz = np.nonzero(np.abs(col) > 1e-10)[0]
        if nz.size and col[nz[0]] < 0:
            vecs[:, j] = -col
    return EigenBasis(vectors=vecs, values=vals, lambda_max=lam_max,
                      threshold=threshold)
