"""Sandwich covariance and spline-based information matrix for beta.

The spline coefficients are profiled out through the block inverse of the
scoring matrix

    H = sum_i U_i' D_i V_i^{-1} D_i U_i,   U_i = (X_i, Z_i),

whose beta-block of ``H^{-1}`` is ``H^{11} = (H11 - H12 H22^{-1} H21)^{-1}``.
All blocks are evaluated at the fitted linear predictor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy import linalg

from splinegee.design import PaddedDesign, build_design
from splinegee.errors import InferenceError

if TYPE_CHECKING:
    from splinegee.estimator import FitResult, LinkFunction


@dataclass(frozen=True, eq=False)
class HBlocks:
    """Blocks of ``H`` with the spline part in identified coordinates
    ``gamma = C @ alpha`` (``H22`` is singular in raw ``gamma``)."""

    H11: np.ndarray
    H12: np.ndarray
    H21: np.ndarray
    H22: np.ndarray
    C: np.ndarray


@dataclass(frozen=True, eq=False)
class SandwichReport:
    R_delta: np.ndarray
    se: np.ndarray
    info_inv_over_n: np.ndarray | None = None
    z_scores: np.ndarray | None = None
    ridge_used: bool = False


def _spd_solve(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve ``A x = B`` for symmetric PD ``A``; ridge 1e-10 trace/p on failure."""
    if A.shape[0] == 0:
        return np.zeros((0,) + B.shape[1:]), False
    try:
        return linalg.cho_solve(linalg.cho_factor(A, lower=True), B), False
    except linalg.LinAlgError:
        pass
    ridge = 1e-10 * np.trace(A) / A.shape[0]
    try:
        return linalg.cho_solve(linalg.cho_factor(A + ridge * np.eye(A.shape[0]), lower=True), B), True
    except linalg.LinAlgError:
        raise InferenceError("spline block of the information matrix is singular; try fewer knots") from None


def _flat(a: np.ndarray) -> np.ndarray:
    # explicit row count: reshape(-1, 0) is ambiguous when there are no spline columns
    return a.reshape(a.shape[0] * a.shape[1], a.shape[2])


def compute(
    design: PaddedDesign,
    d: np.ndarray,
    Vinv: np.ndarray,
    resid: np.ndarray,
    plug_in: str = "residual",
) -> tuple[HBlocks, np.ndarray, np.ndarray, bool]:
    """Return ``(H blocks, R_delta, H^{11}, ridge_used)``.

    ``d`` holds the link derivative at the fitted linear predictor and
    ``resid`` the response-scale residuals, both padded ``(n, M)``.
    ``plug_in="working"`` substitutes ``V_i`` for the residual outer
    product in the meat.
    """
    K = design.K
    DX = d[:, :, None] * design.X
    DZ = d[:, :, None] * design.Zr
    VDX = Vinv @ DX
    VDZ = Vinv @ DZ
    fx, fz, vx, vz = (_flat(a) for a in (DX, DZ, VDX, VDZ))
    H11 = fx.T @ vx
    H12 = fx.T @ vz
    H22 = fz.T @ vz
    H11, H22 = 0.5 * (H11 + H11.T), 0.5 * (H22 + H22.T)
    G, ridge = _spd_solve(H22, H12.T)
    schur = H11 - H12 @ G
    schur = 0.5 * (schur + schur.T)
    try:
        Hinv11 = linalg.cho_solve(linalg.cho_factor(schur, lower=True), np.eye(K))
    except linalg.LinAlgError:
        raise InferenceError("Schur complement of the information matrix is not positive definite") from None
    Hinv11 = 0.5 * (Hinv11 + Hinv11.T)
    # V_i^{-1} D_i X~_i with X~_i = X_i - Z_i H22^{-1} H21
    VDXt = VDX - VDZ @ G
    if plug_in == "residual":
        s = np.einsum("nja,nj->na", VDXt, resid)
        meat = s.T @ s
    elif plug_in == "working":
        DXt = DX - DZ @ G
        meat = _flat(DXt).T @ _flat(VDXt)
    else:
        raise ValueError(f"unknown plug_in {plug_in!r}")
    R = Hinv11 @ meat @ Hinv11
    R = 0.5 * (R + R.T)
    return HBlocks(H11, H12, H12.T.copy(), H22, design.C), R, Hinv11, ridge


def _fitted(dataset, basis, link, fit):
    design = build_design(dataset, basis)
    theta = np.concatenate([fit.beta, design.C.T @ fit.gamma])
    eta = design.U @ theta
    d = np.where(design.mask, link.dmu(eta), 0.0)
    resid = np.where(design.mask, design.y - link.mu(eta), 0.0)
    return design, d, resid


def sandwich(dataset, basis, link: "LinkFunction", spec, fit: "FitResult", plug_in: str = "residual") -> SandwichReport:
    """Model-robust covariance ``R_delta`` of the fitted beta."""
    design, d, resid = _fitted(dataset, basis, link, fit)
    _, R, Hinv11, ridge = compute(design, d, design.vinv(spec), resid, plug_in)
    se = np.sqrt(np.clip(np.diag(R), 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, fit.beta / se, np.nan)
    return SandwichReport(R, se, Hinv11, z, ridge)


def info_matrix(dataset, basis, link: "LinkFunction", spec, fit: "FitResult") -> np.ndarray:
    """Spline-based information estimate ``(H11 - H12 H22^{-1} H21) / n``,
    treating the working covariance as the true one."""
    design, d, resid = _fitted(dataset, basis, link, fit)
    H, _, _, _ = compute(design, d, design.vinv(spec), resid)
    G, _ = _spd_solve(H.H22, H.H21)
    return (H.H11 - H.H12 @ G) / design.n


def wald_report(fit: "FitResult", report: SandwichReport | None = None) -> list[dict]:
    """Per-coefficient estimate, sandwich SE and z statistic."""
    R = fit.sandwich if report is None else report.R_delta
    se = np.sqrt(np.clip(np.diag(R), 0.0, None))
    rows = []
    for name, b, s in zip(fit.x_names, fit.beta, se):
        z = b / s if s > 0 else float("nan")
        rows.append({"parameter": name, "estimate": float(b), "se": float(s), "z": float(z)})
    return rows
