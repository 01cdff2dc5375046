"""B-spline bases for the additive components.

Each nonparametric covariate gets its own clamped B-spline basis.  The
additive design row for an observation is the concatenation of the
per-dimension basis rows, each shifted by a centering offset so that the
fitted components have empirical mean zero over the fitting sample and
the level is carried by the intercept.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from splinegee.errors import DegenerateSupportError

MAX_SPAN_RATIO = 10.0


def _span_ratio(knots: np.ndarray, boundary: tuple[float, float]) -> float:
    breaks = np.concatenate([[boundary[0]], knots, [boundary[1]]])
    spans = np.diff(breaks)
    if np.any(spans <= 0):
        return np.inf
    if spans.size < 2:
        return 1.0
    return float(np.max(np.maximum(spans[1:] / spans[:-1], spans[:-1] / spans[1:])))


@dataclass(frozen=True, eq=False)
class BsplineBasis1d:
    """Clamped B-spline basis of a given degree on ``[a, b]``.

    ``n_basis`` is ``len(interior_knots) + degree + 1``.
    """

    degree: int
    interior_knots: np.ndarray
    boundary: tuple[float, float]

    def __post_init__(self):
        knots = np.asarray(self.interior_knots, dtype=float).reshape(-1)
        object.__setattr__(self, "interior_knots", knots)
        a, b = float(self.boundary[0]), float(self.boundary[1])
        object.__setattr__(self, "boundary", (a, b))
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        if not a < b:
            raise DegenerateSupportError(f"empty boundary interval [{a}, {b}]")
        if knots.size and (knots.min() <= a or knots.max() >= b or np.any(np.diff(knots) < 0)):
            raise ValueError("interior knots must be nondecreasing and strictly inside the boundary")
        ratio = _span_ratio(knots, (a, b))
        if ratio > MAX_SPAN_RATIO:
            raise ValueError(f"knot sequence is not quasi-uniform (adjacent span ratio {ratio:.3g} > {MAX_SPAN_RATIO})")

    @property
    def n_basis(self) -> int:
        return self.interior_knots.size + self.degree + 1

    @property
    def knot_vector(self) -> np.ndarray:
        a, b = self.boundary
        k = self.degree + 1
        return np.concatenate([np.full(k, a), self.interior_knots, np.full(k, b)])

    def __call__(self, t) -> np.ndarray:
        """Evaluate all basis functions at ``t`` (clamped to the boundary).

        Returns an array of shape ``(len(t), n_basis)``, or ``(n_basis,)``
        for scalar input.
        """
        scalar = np.ndim(t) == 0
        x = np.clip(np.atleast_1d(np.asarray(t, dtype=float)), *self.boundary)
        tk = self.knot_vector
        n_int = tk.size - 1
        # degree 0: half-open intervals, with the right boundary folded into
        # the last nonempty interval
        last = np.flatnonzero(tk[1:] > tk[:-1])[-1]
        idx = np.searchsorted(tk, x, side="right") - 1
        idx = np.minimum(idx, last)
        B = np.zeros((x.size, n_int))
        B[np.arange(x.size), idx] = 1.0
        for k in range(1, self.degree + 1):
            nb = n_int - k
            left_den = tk[k : k + nb] - tk[:nb]
            right_den = tk[k + 1 : k + 1 + nb] - tk[1 : 1 + nb]
            with np.errstate(divide="ignore", invalid="ignore"):
                wl = np.where(left_den > 0, (x[:, None] - tk[:nb]) / left_den, 0.0)
                wr = np.where(right_den > 0, (tk[k + 1 : k + 1 + nb] - x[:, None]) / right_den, 0.0)
            B = wl * B[:, :nb] + wr * B[:, 1 : nb + 1]
        return B[0] if scalar else B


def build_basis_1d(samples, degree: int = 3, n_interior: int = 0, rule: str = "quantile") -> BsplineBasis1d:
    """Place knots for one covariate and return its basis.

    The boundary is the sample range.  ``rule="quantile"`` puts the interior
    knots at equally spaced empirical quantiles; if ties or a skewed sample
    break the span-ratio bound the knots are blended toward the uniform
    placement until the bound holds.
    """
    x = np.asarray(samples, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("samples must be nonempty")
    if n_interior < 0:
        raise ValueError("n_interior must be >= 0")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    n_distinct = np.unique(x).size
    if n_distinct < n_interior + 2:
        raise DegenerateSupportError(
            f"{n_distinct} distinct sample values cannot support {n_interior} interior knots"
        )
    a, b = float(x.min()), float(x.max())
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    uniform = a + (b - a) * probs
    if rule == "uniform":
        knots = uniform
    elif rule == "quantile":
        q = np.quantile(x, probs)
        for w in np.linspace(0.0, 1.0, 21):
            knots = (1.0 - w) * q + w * uniform
            if (knots.size == 0 or (knots.min() > a and knots.max() < b)) and _span_ratio(knots, (a, b)) <= MAX_SPAN_RATIO:
                break
    else:
        raise ValueError(f"unknown knot rule {rule!r}")
    return BsplineBasis1d(degree=degree, interior_knots=knots, boundary=(a, b))


@dataclass(frozen=True, eq=False)
class AdditiveSplineBasis:
    """Stacked per-dimension bases with centering offsets.

    ``offsets[d]`` is subtracted from the raw basis row of dimension ``d``.
    The coefficient layout is ``gamma = (gamma_1, ..., gamma_D)``.
    """

    bases: tuple[BsplineBasis1d, ...]
    offsets: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "bases", tuple(self.bases))
        if not self.offsets:
            offsets = tuple(np.zeros(b.n_basis) for b in self.bases)
        else:
            offsets = tuple(np.asarray(o, dtype=float).reshape(-1) for o in self.offsets)
        if len(offsets) != len(self.bases) or any(o.size != b.n_basis for o, b in zip(offsets, self.bases)):
            raise ValueError("offsets must match the basis dimensions")
        object.__setattr__(self, "offsets", offsets)

    @property
    def D(self) -> int:
        return len(self.bases)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(b.n_basis for b in self.bases)

    @property
    def total_dim(self) -> int:
        return sum(self.dims)

    @property
    def slices(self) -> tuple[slice, ...]:
        edges = np.concatenate([[0], np.cumsum(self.dims, dtype=int)])
        return tuple(slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:]))

    def _check_T(self, T) -> np.ndarray:
        T = np.asarray(T, dtype=float)
        if T.ndim == 1:
            T = T.reshape(-1, 1) if self.D == 1 else T.reshape(1, -1)
        if T.ndim != 2 or T.shape[1] != self.D:
            raise ValueError(f"expected T with {self.D} columns, got shape {T.shape}")
        return T

    def raw_design(self, T) -> np.ndarray:
        T = self._check_T(T)
        if self.D == 0:
            return np.zeros((T.shape[0], 0))
        return np.hstack([b(T[:, d]) for d, b in enumerate(self.bases)])

    def design(self, T) -> np.ndarray:
        T = self._check_T(T)
        if self.D == 0:
            return np.zeros((T.shape[0], 0))
        return np.hstack([b(T[:, d]) - o for d, (b, o) in enumerate(zip(self.bases, self.offsets))])

    def with_centering(self, pooled_T) -> "AdditiveSplineBasis":
        T = self._check_T(pooled_T)
        if T.shape[0] == 0:
            raise ValueError("cannot center on an empty sample")
        offsets = tuple(b(T[:, d]).mean(axis=0) for d, b in enumerate(self.bases))
        return AdditiveSplineBasis(self.bases, offsets)

    def component(self, gamma, d: int, grid) -> np.ndarray:
        gamma = np.asarray(gamma, dtype=float).reshape(-1)
        if gamma.size != self.total_dim:
            raise ValueError(f"gamma has length {gamma.size}, expected {self.total_dim}")
        if not 0 <= d < self.D:
            raise IndexError(f"dimension {d} out of range for D={self.D}")
        values = self.bases[d](np.atleast_1d(np.asarray(grid, dtype=float))) - self.offsets[d]
        return values @ gamma[self.slices[d]]

    def constraint_matrix(self) -> np.ndarray:
        """Orthonormal map from identified coordinates to ``gamma``.

        Centered columns of one dimension sum to zero identically (partition
        of unity), so ``gamma_d`` is only determined up to a multiple of the
        ones vector.  Columns of the returned ``(total_dim, total_dim - D)``
        matrix span the sum-to-zero subspace of every block.
        """
        blocks = []
        for q in self.dims:
            # Helmert contrasts, normalised
            H = np.zeros((q, q - 1))
            for k in range(1, q):
                H[:k, k - 1] = 1.0
                H[k, k - 1] = -k
                H[:, k - 1] /= np.sqrt(k * (k + 1))
            blocks.append(H)
        C = np.zeros((self.total_dim, self.total_dim - self.D))
        r = c = 0
        for H in blocks:
            C[r : r + H.shape[0], c : c + H.shape[1]] = H
            r += H.shape[0]
            c += H.shape[1]
        return C


def assemble_design(basis: AdditiveSplineBasis, T_i) -> np.ndarray:
    return basis.design(T_i)


def set_centering(basis: AdditiveSplineBasis, pooled_T) -> AdditiveSplineBasis:
    return basis.with_centering(pooled_T)


def eval_fitted_component(basis: AdditiveSplineBasis, gamma, d: int, grid) -> np.ndarray:
    return basis.component(gamma, d, grid)


def build_additive_basis(
    pooled_T,
    n_interior: int | Sequence[int],
    degree: int = 3,
    rule: str = "quantile",
) -> AdditiveSplineBasis:
    """Build one basis per column of ``pooled_T`` and center on it."""
    T = np.asarray(pooled_T, dtype=float)
    if T.ndim == 1:
        T = T.reshape(-1, 1)
    D = T.shape[1]
    counts = [int(n_interior)] * D if np.ndim(n_interior) == 0 else [int(k) for k in n_interior]
    if len(counts) != D:
        raise ValueError(f"got {len(counts)} knot counts for {D} dimensions")
    bases = tuple(build_basis_1d(T[:, d], degree, counts[d], rule) for d in range(D))
    return AdditiveSplineBasis(bases).with_centering(T)
