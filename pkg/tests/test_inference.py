import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splinegee import (
    ClusterData,
    Dataset,
    WorkingCovarianceSpec,
    build_additive_basis,
    fit,
    fit_identity,
    get_link,
    info_matrix,
    sandwich,
    wald_report,
)

from conftest import random_dataset


def white_hc0(A, y):
    """Textbook heteroskedasticity-robust OLS covariance (no small-sample factor)."""
    coef = np.linalg.solve(A.T @ A, A.T @ y)
    e = y - A @ coef
    bread = np.linalg.inv(A.T @ A)
    meat = (A * e[:, None] ** 2).T @ A
    return coef, bread @ meat @ bread


def test_white_estimator_without_splines(rng):
    ds = random_dataset(rng, n=80, max_m=1, K=3, D=0)
    y = ds.stacked("y") * (1 + ds.stacked("X")[:, 1] ** 2)
    ds = Dataset.from_arrays(np.arange(ds.N), y, ds.stacked("X"), ds.pooled_T())
    basis = build_additive_basis(ds.pooled_T(), [])
    res = fit_identity(ds, basis, WorkingCovarianceSpec("wi"))
    coef, W = white_hc0(ds.stacked("X"), y)
    np.testing.assert_allclose(res.beta, coef, atol=1e-12)
    np.testing.assert_allclose(res.sandwich, W, rtol=0, atol=1e-10 * np.abs(W).max())


def test_white_estimator_with_splines(rng):
    ds = random_dataset(rng, n=120, max_m=1, K=2, D=2)
    basis = build_additive_basis(ds.pooled_T(), [2, 3])
    res = fit_identity(ds, basis, WorkingCovarianceSpec("wi", sigma2=2.0))
    # reduced full-rank parameterization: drop the first centered column of each block
    Z = basis.design(ds.pooled_T())
    keep = np.ones(Z.shape[1], dtype=bool)
    for sl in basis.slices:
        keep[sl.start] = False
    A = np.column_stack([ds.stacked("X"), Z[:, keep]])
    coef, W = white_hc0(A, ds.stacked("y"))
    np.testing.assert_allclose(res.beta, coef[:2], atol=1e-10)
    np.testing.assert_allclose(res.sandwich, W[:2, :2], rtol=0, atol=1e-10 * np.abs(W[:2, :2]).max())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ex", "ar1", "wi"]), st.sampled_from(["identity", "log"]))
def test_working_plug_in_equals_h11(seed, structure, link):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=30, K=2, D=2, link=link, noise=0.3)
    if link == "log":
        ds = Dataset(tuple(ClusterData(c.cluster_id, np.abs(c.y), c.X, c.T, c.obs_index) for c in ds.clusters))
    basis = build_additive_basis(ds.pooled_T(), 2)
    res = fit(ds, basis, link, structure)
    rep = sandwich(ds, basis, get_link(link), res.spec, res, plug_in="working")
    scale = np.abs(rep.info_inv_over_n).max()
    np.testing.assert_allclose(rep.R_delta, rep.info_inv_over_n, rtol=0, atol=1e-10 * scale)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["ex", "ar1", "wi"]))
def test_sandwich_symmetric_psd(seed, structure):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=25, K=3, D=2)
    basis = build_additive_basis(ds.pooled_T(), 1)
    res = fit(ds, basis, "identity", structure)
    R = res.sandwich
    np.testing.assert_allclose(R, R.T, rtol=0, atol=1e-10 * np.abs(R).max())
    assert np.linalg.eigvalsh(R).min() >= -1e-10 * np.trace(R)
    rep = sandwich(ds, basis, res.link, res.spec, res)
    np.testing.assert_allclose(rep.R_delta, res.sandwich, rtol=1e-12, atol=0)
    np.testing.assert_allclose(rep.se, res.se)


def test_info_matrix_without_splines(rng):
    ds = random_dataset(rng, n=40, K=3, D=0, min_m=2)
    basis = build_additive_basis(ds.pooled_T(), [])
    spec = WorkingCovarianceSpec("ex", 0.4, 1.3)
    res = fit_identity(ds, basis, spec)
    got = info_matrix(ds, basis, res.link, spec, res)
    want = sum(c.X.T @ np.linalg.inv(spec.sigma2 * ((1 - 0.4) * np.eye(c.m) + 0.4)) @ c.X for c in ds.clusters) / ds.n
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_info_matrix_residualized_gram(rng):
    ds = random_dataset(rng, n=90, max_m=1, K=3, D=2)
    basis = build_additive_basis(ds.pooled_T(), [1, 2])
    spec = WorkingCovarianceSpec("wi")
    res = fit_identity(ds, basis, spec)
    X = ds.stacked("X")
    Z = basis.design(ds.pooled_T())
    P = Z @ np.linalg.pinv(Z)
    Xr = X - P @ X
    np.testing.assert_allclose(info_matrix(ds, basis, res.link, spec, res), Xr.T @ Xr / ds.n, rtol=1e-9, atol=1e-12)


def test_wald_report_zero_covariance(rng):
    ds = random_dataset(rng, n=20)
    res = fit(ds, build_additive_basis(ds.pooled_T(), 1), "identity", "wi")
    res.sandwich = np.zeros_like(res.sandwich)
    rows = wald_report(res)
    assert [r["se"] for r in rows] == [0.0, 0.0]
    assert all(np.isnan(r["z"]) for r in rows)


def test_wald_report_unit_covariance(rng):
    ds = random_dataset(rng, n=20, K=3)
    res = fit(ds, build_additive_basis(ds.pooled_T(), 1), "identity", "wi")
    res.sandwich = np.eye(3)
    rows = wald_report(res)
    assert [r["se"] for r in rows] == [1.0, 1.0, 1.0]
    assert [r["z"] for r in rows] == pytest.approx(list(res.beta))
    assert [r["parameter"] for r in rows] == list(res.x_names)


def test_exchangeable_se_smaller_than_independence():
    """Under strong exchangeable correlation the EX fit reports smaller
    sandwich SEs for the slope than the WI fit of the same data."""
    from splinegee.simulation import SimulationConfig, simulate_dataset

    rng = np.random.default_rng(8)
    ratios = []
    for rep in range(10):
        base = simulate_dataset(SimulationConfig(setup="s3", n=200, rho=0.8, replications=1), rng)
        res_wi = fit(base, build_additive_basis(base.pooled_T(), 3), "identity", "wi")
        res_ex = fit(base, build_additive_basis(base.pooled_T(), 3), "identity", "ex")
        ratios.append(res_ex.se[1] / res_wi.se[1])
    assert np.median(ratios) < 1.0
