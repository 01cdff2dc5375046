"""Padded per-cluster design arrays shared by the estimator and inference.

Clusters are stacked into arrays of shape ``(n, M, ...)`` with ``M`` the
largest cluster size.  Padding rows are zero everywhere and the padded
inverse covariances are zero outside each cluster's block, so padded
entries never contribute to any sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splinegee.covariance import WorkingCovarianceSpec, batch_inverse
from splinegee.data import Dataset
from splinegee.spline_basis import AdditiveSplineBasis


@dataclass(frozen=True, eq=False)
class PaddedDesign:
    y: np.ndarray  # (n, M)
    mask: np.ndarray  # (n, M) bool
    X: np.ndarray  # (n, M, K)
    Z: np.ndarray  # (n, M, Q) centered spline design
    obs_index: np.ndarray  # (n, M)
    C: np.ndarray  # (Q, Q - D)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[2]

    @property
    def Zr(self) -> np.ndarray:
        """Spline design in identified coordinates, ``Z @ C``."""
        return self.Z @ self.C

    @property
    def U(self) -> np.ndarray:
        return np.concatenate([self.X, self.Zr], axis=2)

    @property
    def p(self) -> int:
        return self.K + self.C.shape[1]

    @property
    def max_m(self) -> int:
        return int(self.mask.sum(axis=1).max())

    def vinv(self, spec: WorkingCovarianceSpec) -> np.ndarray:
        spec.check(self.max_m)
        return batch_inverse(spec, self.obs_index, self.mask)

    def unpad(self, arr: np.ndarray) -> np.ndarray:
        """Stack a padded ``(n, M)`` array back into observation order."""
        return arr[self.mask]


def build_design(dataset: Dataset, basis: AdditiveSplineBasis) -> PaddedDesign:
    if dataset.D != basis.D:
        raise ValueError(f"dataset has D={dataset.D} nonparametric covariates but basis has {basis.D}")
    n, K, Q = dataset.n, dataset.K, basis.total_dim
    sizes = dataset.sizes
    M = int(sizes.max())
    y = np.zeros((n, M))
    mask = np.zeros((n, M), dtype=bool)
    X = np.zeros((n, M, K))
    Z = np.zeros((n, M, Q))
    idx = np.zeros((n, M), dtype=int)
    Zall = basis.design(dataset.pooled_T())
    start = 0
    for i, c in enumerate(dataset.clusters):
        m = c.m
        y[i, :m] = c.y
        mask[i, :m] = True
        X[i, :m] = c.X
        Z[i, :m] = Zall[start : start + m]
        idx[i, :m] = c.obs_index
        start += m
    return PaddedDesign(y, mask, X, Z, idx, basis.constraint_matrix())
