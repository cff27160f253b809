"""Spatial relation matrices between corehoods and their graph Laplacian.

Three flavours: binary corehood overlap (contiguity), inverse-squared
centroid distance thresholded by the longest minimum-spanning-tree edge, and
symmetrized average daily trip counts (mobility).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import squareform, pdist

from .geo import Corehood, SpatialUnit, Trip, point_unit_index

CONNECTIVITY_KINDS = ("contiguity", "distance", "mobility")


@dataclass
class ConnectivityMatrix:
    """Symmetric nonnegative N x N relation with zero diagonal, aligned to
    ``core_ids``."""

    kind: str
    core_ids: list[str]
    matrix: np.ndarray
    mst_threshold_m: float | None = None

    def __post_init__(self):
        c = self.matrix
        if c.shape[0] != c.shape[1] or c.shape[0] != len(self.core_ids):
            raise ValueError("connectivity matrix shape does not match core ids")
        if not np.array_equal(c, c.T):
            raise ValueError("connectivity matrix must be exactly symmetric")
        if np.any(np.diag(c) != 0):
            raise ValueError("connectivity matrix must have a zero diagonal")
        if np.any(c < 0):
            raise ValueError("connectivity entries must be nonnegative")

    def to_csv(self, path) -> None:
        n = len(self.core_ids)
        if n <= 2000:
            with open(path, "w") as f:
                f.write("," + ",".join(self.core_ids) + "\n")
                for i, cid in enumerate(self.core_ids):
                    f.write(cid + "," + ",".join(repr(v) for v in self.matrix[i]) + "\n")
        else:  # coordinate list for big cities
            with open(path, "w") as f:
                f.write("i,j,value\n")
                ii, jj = np.nonzero(self.matrix)
                for i, j in zip(ii, jj):
                    f.write(f"{self.core_ids[i]},{self.core_ids[j]},"
                            f"{self.matrix[i, j]!r}\n")


@dataclass
class Laplacian:
    """Q = D - C with D the diagonal of row sums; positive semidefinite."""

    matrix: np.ndarray
    source_kind: str


def contiguity_matrix(corehoods: Mapping[str, Corehood],
                      core_ids: Sequence[str] | None = None) -> ConnectivityMatrix:
    """c_ij = 1 when corehoods i and j share at least one member unit."""
    ids = list(core_ids) if core_ids is not None else sorted(corehoods)
    n = len(ids)
    members = [corehoods[c].member_ids for c in ids]
    c = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if members[i] & members[j]:
                c[i, j] = c[j, i] = 1.0
    return ConnectivityMatrix(kind="contiguity", core_ids=ids, matrix=c)


def distance_matrix(centroids: np.ndarray,
                    core_ids: Sequence[str]) -> ConnectivityMatrix:
    """c_ij = 1 - (d_ij / 4t)^2 for d_ij <= t, else 0, with t the longest
    edge of the Euclidean minimum spanning tree of the centroids. The
    threshold keeps the implied graph connected by construction."""
    pts = np.asarray(centroids, dtype=float)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("need at least 2 centroids")
    d = squareform(pdist(pts))
    if np.any(d[np.triu_indices(n, k=1)] == 0):
        warnings.warn("duplicate centroids: treating distance 0 as maximal weight",
                      stacklevel=2)
    mst = minimum_spanning_tree(d).toarray()
    t = float(mst.max())
    if t <= 0:
        raise ValueError("all centroids coincide; distance matrix undefined")
    c = 1.0 - (d / (4.0 * t)) ** 2
    c[d > t] = 0.0
    np.fill_diagonal(c, 0.0)
    c = np.where(c < 0, 0.0, c)
    c = (c + c.T) / 2.0  # d is symmetric already; keep exact symmetry
    return ConnectivityMatrix(kind="distance", core_ids=list(core_ids),
                              matrix=c, mst_threshold_m=t)


def mobility_matrix(trips: Sequence[Trip], corehoods: Mapping[str, Corehood],
                    units: Sequence[SpatialUnit], n_days: int = 1,
                    core_ids: Sequence[str] | None = None) -> ConnectivityMatrix:
    """Average daily trips between core units, symmetrized, zero diagonal.
    Trip endpoints are mapped to the unit containing them."""
    ids = list(core_ids) if core_ids is not None else sorted(corehoods)
    index = {cid: i for i, cid in enumerate(ids)}
    locate = point_unit_index(units)
    n = len(ids)
    t = np.zeros((n, n))
    for trip in trips:
        o = locate(trip.origin)
        d = locate(trip.destination)
        if o in index and d in index:
            t[index[o], index[d]] += 1.0
    t = (t + t.T) / 2.0 / max(n_days, 1)
    np.fill_diagonal(t, 0.0)
    return ConnectivityMatrix(kind="mobility", core_ids=ids, matrix=t)


def laplacian(c: ConnectivityMatrix) -> Laplacian:
    q = np.diag(c.matrix.sum(axis=1)) - c.matrix
    return Laplacian(matrix=q, source_kind=c.kind)


def build_connectivity(kind: str, corehoods, units, trips=None,
                       core_ids: Sequence[str] | None = None) -> ConnectivityMatrix:
    """Dispatch on the connectivity kind using dataset pieces."""
    ids = list(core_ids) if core_ids is not None else sorted(corehoods)
    if kind == "contiguity":
        return contiguity_matrix(corehoods, ids)
    if kind == "distance":
        units_by_id = {u.id: u for u in units}
        pts = np.array([[units_by_id[c].centroid.x, units_by_id[c].centroid.y]
                        for c in ids])
        return distance_matrix(pts, ids)
    if kind == "mobility":
        return mobility_matrix(trips or [], corehoods, units, core_ids=ids)
    raise ValueError(f"unknown connectivity kind {kind!r}; "
                     f"expected one of {CONNECTIVITY_KINDS}")
