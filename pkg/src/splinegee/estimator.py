"""Extended GEE estimation of (beta, gamma).

The identity link has a one-shot generalized least squares solution.  Other
links are solved by Fisher scoring on the weighted least squares criterion

    sum_i {y_i - mu(X_i b + Z_i g)}' V_i^{-1} {y_i - mu(X_i b + Z_i g)}

with step halving.  The working correlation can be re-estimated from the
residuals between scoring runs.

Internally the spline coefficients live in identified coordinates
``alpha`` with ``gamma = C @ alpha`` (see
:meth:`AdditiveSplineBasis.constraint_matrix`); results are reported in
``gamma``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from splinegee import inference
from splinegee.covariance import Structure, WorkingCovarianceSpec, estimate_moments
from splinegee.data import Dataset
from splinegee.design import PaddedDesign, build_design
from splinegee.errors import InitializationError, NonConvergenceError, SingularDesignError
from splinegee.spline_basis import AdditiveSplineBasis

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LinkFunction:
    kind: str = "identity"
    eta_clamp: float = 30.0

    def __post_init__(self):
        if self.kind not in ("identity", "log"):
            raise ValueError(f"unsupported link {self.kind!r}")

    def mu(self, eta):
        if self.kind == "identity":
            return np.asarray(eta, dtype=float)
        return np.exp(np.clip(eta, -self.eta_clamp, self.eta_clamp))

    def dmu(self, eta):
        if self.kind == "identity":
            return np.ones_like(np.asarray(eta, dtype=float))
        return np.exp(np.clip(eta, -self.eta_clamp, self.eta_clamp))

    def inverse(self, mu):
        if self.kind == "identity":
            return np.asarray(mu, dtype=float)
        return np.log(mu)


IDENTITY = LinkFunction("identity")
LOG = LinkFunction("log")


def get_link(link: str | LinkFunction, eta_clamp: float = 30.0) -> LinkFunction:
    if isinstance(link, LinkFunction):
        return link
    return LinkFunction(str(link).lower(), eta_clamp)


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 100
    tol: float = 1e-8
    corr_update_rounds: int = 2
    step_halving_max: int = 20
    eta_clamp: float = 30.0
    fix_rho: bool = False
    """Keep the working covariance's ``rho`` during update rounds (only ``sigma2`` is re-estimated)."""

    def __post_init__(self):
        if self.max_iter < 1 or self.tol <= 0 or self.corr_update_rounds < 0 or self.step_halving_max < 0:
            raise ValueError(f"invalid fit configuration {self}")


@dataclass(eq=False)
class FitResult:
    beta: np.ndarray
    gamma: np.ndarray
    spec: WorkingCovarianceSpec
    link: LinkFunction
    basis: AdditiveSplineBasis
    H: inference.HBlocks
    sandwich: np.ndarray
    info_inv: np.ndarray
    eta: np.ndarray
    residuals: np.ndarray
    converged: bool
    iterations: int
    objective: float
    ee_norm: float
    x_names: tuple[str, ...] = ()
    diagnostics: list[str] = field(default_factory=list)
    run_iterations: list[int] = field(default_factory=list)
    history: list[list[float]] = field(default_factory=list)
    """Objective after each accepted scoring step, one list per scoring run."""

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich), 0.0, None))

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.beta, self.gamma])

    def component(self, d: int, grid) -> np.ndarray:
        return self.basis.component(self.gamma, d, grid)

    def predict(self, dataset: Dataset) -> list[np.ndarray]:
        """Mean responses for each cluster of ``dataset`` (T clamped to the basis range)."""
        out = []
        for c in dataset.clusters:
            eta = c.X @ self.beta + self.basis.design(c.T) @ self.gamma
            out.append(self.link.mu(eta))
        return out


# ---------------------------------------------------------------------------
# core numerics on padded arrays


def _state(design: PaddedDesign, U: np.ndarray, link: LinkFunction, theta: np.ndarray):
    eta = U @ theta
    mu = np.where(design.mask, link.mu(eta), 0.0)
    d = np.where(design.mask, link.dmu(eta), 0.0)
    return eta, design.y - mu, d


def _objective(Vinv: np.ndarray, r: np.ndarray) -> float:
    return float(np.einsum("nj,nj->", r, (Vinv @ r[:, :, None])[:, :, 0]))


def _scoring_system(U, Vinv, r, d):
    DU = d[:, :, None] * U
    VDU = Vinv @ DU
    p = U.shape[2]
    A = DU.reshape(-1, p).T @ VDU.reshape(-1, p)
    g = VDU.reshape(-1, p).T @ r.reshape(-1)
    return 0.5 * (A + A.T), g


def _null_dim(A: np.ndarray) -> int:
    scale = np.sqrt(np.clip(np.diag(A), 1e-300, None))
    eig = np.linalg.eigvalsh(A / np.outer(scale, scale))
    return int(np.sum(eig < 1e-12 * max(eig.max(), 1e-300)))


def _solve(A: np.ndarray, b: np.ndarray, allow_ridge: bool) -> tuple[np.ndarray, bool]:
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True), b), False
    except linalg.LinAlgError:
        if not allow_ridge:
            raise SingularDesignError(f"normal matrix is singular (null-space dimension {_null_dim(A)})",
                                      _null_dim(A)) from None
    ridge = 1e-10 * np.trace(A) / A.shape[0]
    try:
        return linalg.cho_solve(linalg.cho_factor(A + ridge * np.eye(A.shape[0]), lower=True), b), True
    except linalg.LinAlgError:
        nd = _null_dim(A)
        raise SingularDesignError(f"scoring matrix is singular (null-space dimension {nd})", nd) from None


def _ee_norm(design: PaddedDesign, Vinv, r, d) -> float:
    full = np.concatenate([design.X, design.Z], axis=2)
    VD = Vinv @ (d[:, :, None] * full)
    return float(np.linalg.norm(VD.reshape(-1, full.shape[2]).T @ r.reshape(-1)))


def _scoring(design, U, link, Vinv, theta, config: FitConfig, diagnostics: list[str], history: list[float]):
    """Fisher scoring at fixed working covariance.  Returns ``(theta, iterations)``."""
    eta, r, d = _state(design, U, link, theta)
    obj = _objective(Vinv, r)
    history.append(obj)
    for it in range(1, config.max_iter + 1):
        A, g = _scoring_system(U, Vinv, r, d)
        step, ridged = _solve(A, g, allow_ridge=True)
        if ridged and "ridge" not in diagnostics:
            diagnostics.append("ridge")
        t = 1.0
        for _ in range(config.step_halving_max + 1):
            cand = theta + t * step
            eta_c, r_c, d_c = _state(design, U, link, cand)
            obj_c = _objective(Vinv, r_c)
            if np.isfinite(obj_c) and obj_c <= obj * (1.0 + 1e-12) + 1e-300:
                break
            t *= 0.5
        else:
            # no decrease along the scoring direction: already at the minimum
            # to working precision, or stuck
            if np.max(np.abs(step)) <= np.sqrt(config.tol) * (1.0 + np.max(np.abs(theta))):
                return theta, it
            raise NonConvergenceError("step halving failed to decrease the objective", theta,
                                      _ee_norm(design, Vinv, r, d), it)
        delta = cand - theta
        theta, r, d, obj = cand, r_c, d_c, obj_c
        history.append(obj)
        if link.kind == "log" and np.any(np.abs(eta_c[design.mask]) > link.eta_clamp) and "eta_clamped" not in diagnostics:
            diagnostics.append("eta_clamped")
            log.warning("linear predictor exceeded the clamp |eta| <= %g", link.eta_clamp)
        if np.max(np.abs(delta)) <= config.tol * (1.0 + np.max(np.abs(theta))):
            return theta, it
    raise NonConvergenceError(f"Fisher scoring did not converge in {config.max_iter} iterations", theta,
                              _ee_norm(design, Vinv, r, d), config.max_iter)


def _result(dataset, basis, design, U, link, spec, Vinv, theta, converged, iterations, diagnostics,
            run_iterations=(), history=()) -> FitResult:
    K = design.K
    eta, r, d = _state(design, U, link, theta)
    H, R, Hinv11, ridge = inference.compute(design, d, Vinv, np.where(design.mask, r, 0.0))
    if ridge:
        diagnostics.append("inference_ridge")
    return FitResult(
        beta=theta[:K].copy(),
        gamma=design.C @ theta[K:],
        spec=spec,
        link=link,
        basis=basis,
        H=H,
        sandwich=R,
        info_inv=Hinv11,
        eta=design.unpad(eta),
        residuals=design.unpad(r),
        converged=converged,
        iterations=iterations,
        objective=_objective(Vinv, r),
        ee_norm=_ee_norm(design, Vinv, r, d),
        x_names=dataset.x_names,
        diagnostics=diagnostics,
        run_iterations=list(run_iterations) or [iterations],
        history=[list(h) for h in history],
    )


def _check_size(dataset: Dataset, design: PaddedDesign):
    if dataset.N < design.p:
        raise SingularDesignError(
            f"{dataset.N} observations cannot identify {design.p} parameters", design.p - dataset.N
        )


# ---------------------------------------------------------------------------
# public API


def fit_identity(dataset: Dataset, basis: AdditiveSplineBasis, spec: WorkingCovarianceSpec) -> FitResult:
    """Closed-form GLS solution for the identity link at fixed ``spec``."""
    design = build_design(dataset, basis)
    _check_size(dataset, design)
    U = design.U
    Vinv = design.vinv(spec)
    VU = Vinv @ U
    p = design.p
    A = U.reshape(-1, p).T @ VU.reshape(-1, p)
    A = 0.5 * (A + A.T)
    b = VU.reshape(-1, p).T @ design.y.reshape(-1)
    nd = _null_dim(A)
    if nd:
        raise SingularDesignError(f"normal matrix is rank deficient (null-space dimension {nd})", nd)
    theta, _ = _solve(A, b, allow_ridge=False)
    return _result(dataset, basis, design, U, IDENTITY, spec, Vinv, theta, True, 1, [])


def initialize(dataset: Dataset, basis: AdditiveSplineBasis, link: LinkFunction | str,
               spec: WorkingCovarianceSpec | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Starting values ``(beta0, gamma0)``.

    Identity link: zeros.  Log link: the identity-link fit to
    ``log(max(y, floor))`` with ``floor`` half the smallest positive response.
    """
    link = get_link(link)
    if link.kind == "identity":
        return np.zeros(dataset.K), np.zeros(basis.total_dim)
    y = dataset.stacked("y")
    pos = y[y > 0]
    if pos.size == 0:
        raise InitializationError("log link needs at least one positive response")
    floor = 0.5 * pos.min()
    clusters = tuple(
        type(c)(c.cluster_id, np.log(np.maximum(c.y, floor)), c.X, c.T, c.obs_index) for c in dataset.clusters
    )
    pseudo = Dataset(clusters, dataset.x_names, dataset.t_names)
    res = fit_identity(pseudo, basis, spec or WorkingCovarianceSpec(Structure.WI))
    return res.beta, res.gamma


def fit_gee(
    dataset: Dataset,
    basis: AdditiveSplineBasis,
    link: LinkFunction | str,
    spec: WorkingCovarianceSpec,
    config: FitConfig | None = None,
    start: tuple[np.ndarray, np.ndarray] | None = None,
) -> FitResult:
    """Fisher-scoring solution of the extended estimating equations.

    The first scoring run uses ``spec`` as given.  Each of
    ``config.corr_update_rounds`` further rounds re-estimates ``(rho, sigma2)``
    by moments from the current residuals and rescoring from the current
    iterate.  With zero rounds ``spec`` is held fixed.
    """
    config = config or FitConfig()
    link = get_link(link, config.eta_clamp)
    design = build_design(dataset, basis)
    _check_size(dataset, design)
    U = design.U
    K = design.K
    beta0, gamma0 = start if start is not None else initialize(dataset, basis, link)
    theta = np.concatenate([np.asarray(beta0, dtype=float), design.C.T @ np.asarray(gamma0, dtype=float)])
    diagnostics: list[str] = []
    Vinv = design.vinv(spec)
    history: list[list[float]] = [[]]
    theta, iterations = _scoring(design, U, link, Vinv, theta, config, diagnostics, history[-1])
    runs = [iterations]
    obs_idx = [c.obs_index for c in dataset.clusters]
    for _ in range(config.corr_update_rounds):
        _, r, _ = _state(design, U, link, theta)
        resid = [r[i, : c.m] for i, c in enumerate(dataset.clusters)]
        if not np.any(r):
            # exact interpolation: nothing left to weight
            diagnostics.append("exact_fit")
            break
        structure = Structure.WI if config.fix_rho else spec.structure
        rho, sigma2 = estimate_moments(resid, structure, obs_idx, n_params=design.p)
        if spec.structure is Structure.WI or config.fix_rho:
            # sigma2 rescales V only; the estimating equations are unchanged
            spec = spec.with_params(sigma2=sigma2)
            Vinv = design.vinv(spec)
            continue
        spec = spec.with_params(rho=rho, sigma2=sigma2)
        Vinv = design.vinv(spec)
        history.append([])
        theta, it = _scoring(design, U, link, Vinv, theta, config, diagnostics, history[-1])
        iterations += it
        runs.append(it)
    return _result(dataset, basis, design, U, link, spec, Vinv, theta, True, iterations, diagnostics, runs, history)


def ee_residual(dataset: Dataset, basis: AdditiveSplineBasis, link: LinkFunction | str,
                spec: WorkingCovarianceSpec, beta, gamma) -> float:
    """Euclidean norm of the stacked estimating equations at ``(beta, gamma)``."""
    link = get_link(link)
    design = build_design(dataset, basis)
    full = np.concatenate([design.X, design.Z], axis=2)
    theta = np.concatenate([np.asarray(beta, dtype=float), np.asarray(gamma, dtype=float)])
    eta = full @ theta
    mu = np.where(design.mask, link.mu(eta), 0.0)
    d = np.where(design.mask, link.dmu(eta), 0.0)
    return _ee_norm(design, design.vinv(spec), design.y - mu, d)


def fit(
    dataset: Dataset,
    basis: AdditiveSplineBasis,
    link: LinkFunction | str = "identity",
    structure: Structure | str = Structure.WI,
    config: FitConfig | None = None,
    rho: float | None = None,
) -> FitResult:
    """Full pipeline: pilot fit, moment estimation of the working correlation, refit.

    A fixed ``rho`` bypasses correlation estimation.
    """
    config = config or FitConfig()
    if rho is not None:
        config = FitConfig(**{**config.__dict__, "fix_rho": True})
    spec = WorkingCovarianceSpec(structure, 0.0 if rho is None else rho, 1.0)
    return fit_gee(dataset, basis, link, spec, config)
