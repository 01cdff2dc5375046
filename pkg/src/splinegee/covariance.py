"""Working covariance structures and their moment estimators.

Every cluster shares one correlation parameter ``rho`` and one dispersion
``sigma2``.  AR-1 correlation decays in the observation-index lag, so a
cluster with retained indices (0, 1, 3) has correlation ``rho**3`` between
its first and last observations.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import linalg

from splinegee.errors import CannotEstimateError, ParameterError, SingularDesignError

CLIP_MARGIN = 1e-6


class Structure(str, enum.Enum):
    WI = "wi"
    EX = "ex"
    AR1 = "ar1"

    @classmethod
    def parse(cls, value) -> "Structure":
        if isinstance(value, cls):
            return value
        aliases = {"independence": "wi", "exchangeable": "ex", "ar": "ar1", "ar-1": "ar1"}
        v = str(value).lower()
        return cls(aliases.get(v, v))


def rho_bounds(structure: Structure, max_m: int) -> tuple[float, float]:
    """Open interval of ``rho`` giving positive-definite correlation matrices."""
    structure = Structure.parse(structure)
    if structure is Structure.EX:
        return (-1.0 / (max_m - 1) if max_m > 1 else -np.inf, 1.0)
    if structure is Structure.AR1:
        return (-1.0, 1.0)
    return (-np.inf, np.inf)


@dataclass(frozen=True)
class WorkingCovarianceSpec:
    structure: Structure = Structure.WI
    rho: float = 0.0
    sigma2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "structure", Structure.parse(self.structure))
        if self.structure is Structure.WI:
            object.__setattr__(self, "rho", 0.0)
        if not self.sigma2 > 0:
            raise ParameterError(f"sigma2 must be positive, got {self.sigma2}")

    def check(self, max_m: int) -> "WorkingCovarianceSpec":
        """Raise unless V is positive definite for clusters up to ``max_m``."""
        lo, hi = rho_bounds(self.structure, max_m)
        if not lo < self.rho < hi:
            raise ParameterError(
                f"rho={self.rho} outside the positive-definite range ({lo:.6g}, {hi:.6g}) "
                f"for {self.structure.value} with cluster size {max_m}"
            )
        if max_m > 1 and self.structure is not Structure.WI:
            eig = np.linalg.eigvalsh(build_V(self, np.arange(max_m)))
            if eig.min() <= 0:
                raise ParameterError(f"working covariance not positive definite (min eigenvalue {eig.min():.3g})")
        return self

    def with_params(self, rho: float | None = None, sigma2: float | None = None) -> "WorkingCovarianceSpec":
        kw = {}
        if rho is not None:
            kw["rho"] = float(rho)
        if sigma2 is not None:
            kw["sigma2"] = float(sigma2)
        return replace(self, **kw)


def correlation_matrix(structure: Structure, rho: float, obs_index) -> np.ndarray:
    idx = np.asarray(obs_index, dtype=int).reshape(-1)
    m = idx.size
    structure = Structure.parse(structure)
    if structure is Structure.WI:
        return np.eye(m)
    if structure is Structure.EX:
        return (1.0 - rho) * np.eye(m) + rho * np.ones((m, m))
    lag = np.abs(idx[:, None] - idx[None, :])
    return np.power(float(rho), lag)


def build_V(spec: WorkingCovarianceSpec, obs_index) -> np.ndarray:
    """Working covariance for one cluster.

    ``obs_index`` may be an integer ``m`` (indices ``0..m-1``) or the
    cluster's observation indices.
    """
    idx = np.arange(obs_index) if np.ndim(obs_index) == 0 else np.asarray(obs_index, dtype=int)
    m = idx.size
    if m < 1:
        raise ValueError("cluster size must be >= 1")
    lo, hi = rho_bounds(spec.structure, m)
    if m > 1 and not lo < spec.rho < hi:
        raise ParameterError(f"rho={spec.rho} outside ({lo:.6g}, {hi:.6g}) for m={m}")
    return spec.sigma2 * correlation_matrix(spec.structure, spec.rho, idx)


def invert_V(V, spec: WorkingCovarianceSpec | None = None) -> np.ndarray:
    """Inverse of a working covariance matrix.

    With ``spec`` given, WI and EX use their closed forms; otherwise a
    Cholesky factorization is used.
    """
    V = np.asarray(V, dtype=float)
    m = V.shape[0]
    if spec is not None and spec.structure is Structure.WI:
        return np.eye(m) / spec.sigma2
    if spec is not None and spec.structure is Structure.EX:
        r = spec.rho
        c = r / (1.0 + (m - 1) * r)
        return (np.eye(m) - c * np.ones((m, m))) / (spec.sigma2 * (1.0 - r))
    try:
        cf = linalg.cho_factor(V, lower=True, check_finite=True)
    except linalg.LinAlgError:
        pivot = float(np.linalg.eigvalsh(0.5 * (V + V.T)).min())
        raise SingularDesignError(f"working covariance is not positive definite (smallest eigenvalue {pivot:.3g})")
    diag = np.abs(np.diag(cf[0]))
    if diag.min() ** 2 < 1e-14 * diag.max() ** 2:
        raise SingularDesignError(f"working covariance is near singular (smallest pivot {diag.min() ** 2:.3g})")
    Vinv = linalg.cho_solve(cf, np.eye(m))
    return 0.5 * (Vinv + Vinv.T)


def batch_inverse(spec: WorkingCovarianceSpec, obs_index: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Inverse working covariances for padded clusters.

    ``obs_index`` and ``mask`` have shape ``(n, M)``; entries outside each
    cluster's valid block are zero in the result.
    """
    n, M = mask.shape
    w = mask.astype(float)
    outer = w[:, :, None] * w[:, None, :]
    eye = np.eye(M)[None] * w[:, :, None]
    if spec.structure is Structure.WI:
        return eye / spec.sigma2
    sizes = mask.sum(axis=1)
    if spec.structure is Structure.EX:
        r = spec.rho
        c = r / (1.0 + (sizes - 1) * r)
        return (eye - c[:, None, None] * outer) / (spec.sigma2 * (1.0 - r))
    lag = np.abs(obs_index[:, :, None] - obs_index[:, None, :])
    R = np.where(outer > 0, np.power(float(spec.rho), lag), 0.0) + np.eye(M)[None] * (1.0 - w)[:, :, None]
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError:
        raise SingularDesignError("AR-1 working correlation is not positive definite") from None
    return np.linalg.inv(R) * outer / spec.sigma2


def estimate_moments(
    residuals: Sequence[np.ndarray],
    structure: Structure | str,
    obs_indices: Sequence[np.ndarray] | None = None,
    n_params: int = 0,
) -> tuple[float, float]:
    """Moment estimates of ``(rho, sigma2)`` from per-cluster raw residuals.

    ``sigma2 = sum(e**2) / (N - n_params)``; ``rho`` averages products of
    Pearson residuals ``e / sqrt(sigma2)`` over all within-cluster pairs (EX)
    or over pairs one index apart (AR-1), then is clipped just inside the
    positive-definite range.  Sums are taken with ``math.fsum`` so the result
    does not depend on cluster order.
    """
    structure = Structure.parse(structure)
    res = [np.asarray(e, dtype=float).reshape(-1) for e in residuals]
    if obs_indices is None:
        obs_indices = [np.arange(e.size) for e in res]
    N = sum(e.size for e in res)
    if N - n_params <= 0:
        raise CannotEstimateError(f"no residual degrees of freedom (N={N}, p={n_params})")
    sigma2 = math.fsum(math.fsum(e * e) for e in res) / (N - n_params)
    if structure is Structure.WI:
        return 0.0, sigma2
    if sigma2 <= 0:
        raise CannotEstimateError("residuals are identically zero; correlation is not identified")
    scale = math.sqrt(sigma2)
    cross, count = [], 0
    max_m = max(e.size for e in res)
    for e, idx in zip(res, obs_indices):
        r = e / scale
        if structure is Structure.EX:
            if r.size < 2:
                continue
            iu = np.triu_indices(r.size, 1)
            cross.append(math.fsum(r[iu[0]] * r[iu[1]]))
            count += iu[0].size
        else:
            idx = np.asarray(idx, dtype=int)
            jj, kk = np.nonzero(idx[:, None] - idx[None, :] == 1)
            if jj.size == 0:
                continue
            cross.append(math.fsum(r[jj] * r[kk]))
            count += jj.size
    if count == 0:
        raise CannotEstimateError(
            f"no within-cluster pairs available to estimate {structure.value} correlation; use wi instead"
        )
    rho = math.fsum(cross) / count
    lo, hi = rho_bounds(structure, max_m)
    rho = float(np.clip(rho, lo + CLIP_MARGIN, hi - CLIP_MARGIN))
    return rho, sigma2
