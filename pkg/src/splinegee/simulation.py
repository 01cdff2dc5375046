"""Data generators for the five simulation setups and the Monte Carlo harness.

Mean model: ``g{b0 + X b1 + f1(T1) + f2(T2)}`` with ``b0 = 0, b1 = 0.5``,
``f1(t) = sin(2 pi (t - 0.5))`` and ``f2(t) = t - 0.5 + f1(t)``; everything
is halved in the Poisson setup.

========  ========  ==========  ==========================  ============
setup     link      truth       schedule                    marginal
========  ========  ==========  ==========================  ============
s1        identity  AR-1        6 per cluster               Gaussian
s2        log       AR-1        6 per cluster               Gaussian
s3        identity  EX          10 per cluster, 40% removed Gaussian
s4        log       EX          10 per cluster, 40% removed Gaussian
s5        log       EX          10 per cluster, 40% removed Poisson
========  ========  ==========  ==========================  ============

Gaussian errors are added on the response scale with covariance
``error_sd**2 * R(rho)``; Poisson responses are tied together through a
Gaussian copula with exchangeable correlation.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np
from scipy import special, stats

from splinegee.covariance import Structure, correlation_matrix, rho_bounds
from splinegee.data import ClusterData, Dataset
from splinegee.errors import GeeError, ParameterError, StudyError
from splinegee.estimator import FitConfig, fit
from splinegee.selection import CvPlan, cross_validate
from splinegee.spline_basis import build_additive_basis

GRID = np.linspace(0.0, 1.0, 100)
FAILURE_LIMIT = 0.05


class Setup(str, enum.Enum):
    S1 = "s1"
    S2 = "s2"
    S3 = "s3"
    S4 = "s4"
    S5 = "s5"

    @classmethod
    def parse(cls, value) -> "Setup":
        if isinstance(value, cls):
            return value
        v = str(value).lower()
        long_names = {
            "s1_gauss_ar_identity": "s1",
            "s2_gauss_ar_log": "s2",
            "s3_gauss_ex_identity_irregular": "s3",
            "s4_gauss_ex_log_irregular": "s4",
            "s5_poisson_ex_log": "s5",
        }
        return cls(long_names.get(v, v))

    @property
    def link(self) -> str:
        return "identity" if self in (Setup.S1, Setup.S3) else "log"

    @property
    def truth(self) -> Structure:
        return Structure.AR1 if self in (Setup.S1, Setup.S2) else Structure.EX

    @property
    def irregular(self) -> bool:
        return self not in (Setup.S1, Setup.S2)

    @property
    def poisson(self) -> bool:
        return self is Setup.S5

    @property
    def default_structures(self) -> tuple[Structure, ...]:
        if self.truth is Structure.AR1:
            return (Structure.WI, Structure.EX, Structure.AR1)
        return (Structure.WI, Structure.EX)


@dataclass(frozen=True)
class TrueModel:
    scale: float = 1.0

    @property
    def beta(self) -> np.ndarray:
        return self.scale * np.array([0.0, 0.5])

    def f(self, d: int, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        s = np.sin(2.0 * np.pi * (t - 0.5))
        return self.scale * (s if d == 0 else t - 0.5 + s)

    @classmethod
    def for_setup(cls, setup: Setup) -> "TrueModel":
        return cls(0.5 if Setup.parse(setup).poisson else 1.0)


@dataclass(frozen=True)
class SimulationConfig:
    setup: Setup = Setup.S1
    n: int = 200
    rho: float = 0.5
    replications: int = 400
    seed: int = 0
    fit_structures: tuple[Structure, ...] = ()
    error_sd: float = 1.0
    fixed_knots: int | None = None
    knot_grid: tuple[int, ...] = tuple(range(1, 8))
    folds: int = 5
    degree: int = 3
    knot_rule: str = "quantile"
    max_iter: int = 100
    tol: float = 1e-8
    corr_update_rounds: int = 2
    jobs: int = 1

    def __post_init__(self):
        setup = Setup.parse(self.setup)
        object.__setattr__(self, "setup", setup)
        structures = tuple(Structure.parse(s) for s in self.fit_structures) or setup.default_structures
        object.__setattr__(self, "fit_structures", structures)
        object.__setattr__(self, "knot_grid", tuple(int(k) for k in self.knot_grid))
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not self.error_sd > 0:
            raise ValueError("error_sd must be positive")
        max_m = 10 if setup.irregular else 6
        lo, hi = rho_bounds(setup.truth, max_m)
        if not lo < self.rho < hi:
            raise ParameterError(f"rho={self.rho} invalid for the {setup.truth.value} truth of setup {setup.value}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["setup"] = self.setup.value
        d["fit_structures"] = [s.value for s in self.fit_structures]
        d["knot_grid"] = list(self.knot_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown simulation config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("fit_structures", "knot_grid"):
            if key in d and d[key] is not None:
                d[key] = tuple(d[key])
        return cls(**d)

    def fit_config(self) -> FitConfig:
        return FitConfig(max_iter=self.max_iter, tol=self.tol, corr_update_rounds=self.corr_update_rounds)


# ---------------------------------------------------------------------------
# generators


def truncated_normal(rng: np.random.Generator, size: int, mean: float = 0.5, var: float = 0.25,
                     lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    """Rejection sampler for Normal(mean, var) restricted to ``[lo, hi]``."""
    sd = math.sqrt(var)
    out = np.empty(size)
    filled = 0
    while filled < size:
        draw = rng.normal(mean, sd, size=2 * (size - filled) + 16)
        keep = draw[(draw >= lo) & (draw <= hi)][: size - filled]
        out[filled : filled + keep.size] = keep
        filled += keep.size
    return out


def obs_schedule(setup: Setup | str, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Retained observation indices per cluster.

    Setups 1-2 keep all six indices.  Setups 3-5 start from ten per cluster
    and drop 40% of the ``10 n`` observations uniformly at random across the
    dataset, redrawing if any cluster loses everything.
    """
    setup = Setup.parse(setup)
    if not setup.irregular:
        return [np.arange(6) for _ in range(n)]
    total = 10 * n
    n_drop = int(round(0.4 * total))
    while True:
        keep = np.ones(total, dtype=bool)
        keep[rng.choice(total, size=n_drop, replace=False)] = False
        keep = keep.reshape(n, 10)
        if keep.any(axis=1).all():
            return [np.flatnonzero(row) for row in keep]


def obs_times(setup: Setup | str, index: np.ndarray) -> np.ndarray:
    """Observation times on the evenly spaced grid over ``[0, 1]``."""
    m_full = 10 if Setup.parse(setup).irregular else 6
    return np.asarray(index, dtype=float) / (m_full - 1)


def gen_covariates(sizes: Sequence[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-cluster ``(X, T)`` with ``X = [1, 3(1-2T1)(1-2T2) + u]``."""
    sizes = [int(m) for m in sizes]
    N = sum(sizes)
    T = truncated_normal(rng, 2 * N).reshape(N, 2)
    u = rng.normal(0.0, 0.5, size=N)
    x = 3.0 * (1.0 - 2.0 * T[:, 0]) * (1.0 - 2.0 * T[:, 1]) + u
    X = np.column_stack([np.ones(N), x])
    out, start = [], 0
    for m in sizes:
        out.append((X[start : start + m], T[start : start + m]))
        start += m
    return out


def linear_predictor(model: TrueModel, X: np.ndarray, T: np.ndarray) -> np.ndarray:
    return X @ model.beta + model.f(0, T[:, 0]) + model.f(1, T[:, 1])


def gen_responses(setup: Setup | str, config: SimulationConfig, covariates, schedule,
                  rng: np.random.Generator) -> list[np.ndarray]:
    setup = Setup.parse(setup)
    model = TrueModel.for_setup(setup)
    chol_cache: dict[tuple, np.ndarray] = {}
    ys = []
    for (X, T), idx in zip(covariates, schedule):
        key = tuple(int(i) for i in idx)
        L = chol_cache.get(key)
        if L is None:
            R = correlation_matrix(setup.truth, config.rho, idx)
            try:
                L = np.linalg.cholesky(R)
            except np.linalg.LinAlgError:
                raise ParameterError(f"true correlation with rho={config.rho} is not positive definite") from None
            chol_cache[key] = L
        eta = linear_predictor(model, X, T)
        z = L @ rng.standard_normal(len(idx))
        if setup.poisson:
            u = np.clip(special.ndtr(z), 1e-16, 1.0 - 1e-16)
            ys.append(stats.poisson.ppf(u, np.exp(eta)).astype(float))
        else:
            mu = eta if setup.link == "identity" else np.exp(eta)
            ys.append(mu + config.error_sd * z)
    return ys


def simulate_dataset(config: SimulationConfig, rng: np.random.Generator) -> Dataset:
    schedule = obs_schedule(config.setup, config.n, rng)
    covariates = gen_covariates([len(s) for s in schedule], rng)
    ys = gen_responses(config.setup, config, covariates, schedule, rng)
    clusters = tuple(
        ClusterData(i, y, X, T, idx) for i, ((X, T), idx, y) in enumerate(zip(covariates, schedule, ys))
    )
    return Dataset(clusters, ("(Intercept)", "x"), ("t1", "t2"))


# ---------------------------------------------------------------------------
# Monte Carlo harness

REP_COLUMNS = ("rep", "structure", "knots", "beta0", "beta1", "se_beta0", "se_beta1", "ise_f1", "ise_f2",
               "rho_hat", "sigma2_hat", "iterations", "ok", "error")
AGG_COLUMNS = ("setup", "n", "rho", "structure", "parameter", "truth", "bias", "sd", "variance", "mse", "mise",
               "mean_se", "se_sd_ratio", "coverage95", "n_ok", "n_failed")


def replication_seeds(seed: int, replications: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(replications)


def run_replication(config: SimulationConfig, rep: int, seed_seq: np.random.SeedSequence) -> list[dict]:
    rng = np.random.default_rng(seed_seq)
    data = simulate_dataset(config, rng)
    fold_seed = int(rng.integers(2**31 - 1))
    model = TrueModel.for_setup(config.setup)
    truth_c = [model.f(d, GRID) - model.f(d, GRID).mean() for d in range(2)]
    fc = config.fit_config()
    rows = []
    for structure in config.fit_structures:
        row = {"rep": rep, "structure": structure.value}
        try:
            if config.fixed_knots is not None:
                knots = (config.fixed_knots, config.fixed_knots)
            else:
                plan = CvPlan(folds=config.folds, knot_grid=config.knot_grid, seed=fold_seed, rule=config.knot_rule)
                knots = cross_validate(data, config.setup.link, structure, plan, config.degree, fc).chosen
            basis = build_additive_basis(data.pooled_T(), knots, config.degree, config.knot_rule)
            res = fit(data, basis, config.setup.link, structure, fc)
            se = res.se
            ise = []
            for d in range(2):
                fhat = res.component(d, GRID)
                ise.append(float(np.mean((fhat - fhat.mean() - truth_c[d]) ** 2)))
            row.update(knots="/".join(map(str, knots)), beta0=float(res.beta[0]), beta1=float(res.beta[1]),
                       se_beta0=float(se[0]), se_beta1=float(se[1]), ise_f1=ise[0], ise_f2=ise[1],
                       rho_hat=float(res.spec.rho), sigma2_hat=float(res.spec.sigma2),
                       iterations=res.iterations, ok=1, error="")
        except GeeError as exc:
            row.update(ok=0, error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    return rows


def _run_one(args):
    return run_replication(*args)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class StudyReport:
    config: SimulationConfig
    replications: list[dict]
    aggregate: list[dict] = field(default_factory=list)

    def summary(self, structure, parameter: str) -> dict:
        s = Structure.parse(structure).value
        for row in self.aggregate:
            if row["structure"] == s and row["parameter"] == parameter:
                return row
        raise KeyError((s, parameter))

    def estimates(self, structure, column: str) -> np.ndarray:
        s = Structure.parse(structure).value
        return np.array([r[column] for r in self.replications if r["structure"] == s and r["ok"]], dtype=float)

    @property
    def failure_fraction(self) -> float:
        return max(
            (sum(1 for r in self.replications if r["structure"] == s.value and not r["ok"]) / self.config.replications)
            for s in self.config.fit_structures
        )

    def replications_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REP_COLUMNS)
        for r in self.replications:
            w.writerow([_fmt(r.get(c)) for c in REP_COLUMNS])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(AGG_COLUMNS)
        for r in self.aggregate:
            w.writerow([_fmt(r.get(c)) for c in AGG_COLUMNS])
        return buf.getvalue()

    def scaled_csv(self) -> str:
        """Scaled table layout: one row per working structure, entries x 1e5.

        The ``*_var`` columns hold Monte Carlo variances (the scaled tables
        report variances under their SD heading).
        """
        cols = ["setup", "n", "rho", "method", "beta0_bias", "beta0_var", "beta0_mse",
                "beta1_bias", "beta1_var", "beta1_mse", "mise_f1", "mise_f2"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for s in self.config.fit_structures:
            b0, b1 = self.summary(s, "beta0"), self.summary(s, "beta1")
            f1, f2 = self.summary(s, "f1"), self.summary(s, "f2")
            vals = [b0["bias"], b0["variance"], b0["mse"], b1["bias"], b1["variance"], b1["mse"],
                    f1["mise"], f2["mise"]]
            w.writerow([self.config.setup.value, self.config.n, repr(float(self.config.rho)), s.value.upper()]
                       + ["" if math.isnan(v) else f"{v * 1e5:.1f}" for v in vals])
        return buf.getvalue()

    def write(self, outdir: str | os.PathLike) -> dict[str, str]:
        os.makedirs(outdir, exist_ok=True)
        paths = {}
        for name, text in (("replications", self.replications_csv()), ("aggregate", self.aggregate_csv()),
                           ("aggregate_x1e5", self.scaled_csv())):
            path = os.path.join(outdir, f"{name}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                fh.write(text)
            paths[name] = path
        return paths


def aggregate(config: SimulationConfig, rows: list[dict]) -> list[dict]:
    model = TrueModel.for_setup(config.setup)
    z = stats.norm.ppf(0.975)
    out = []
    for s in config.fit_structures:
        ok = [r for r in rows if r["structure"] == s.value and r["ok"]]
        n_ok, n_failed = len(ok), config.replications - len(ok)
        base = {"setup": config.setup.value, "n": config.n, "rho": float(config.rho), "structure": s.value,
                "n_ok": n_ok, "n_failed": n_failed}
        for k, name in enumerate(("beta0", "beta1")):
            est = np.array([r[name] for r in ok], dtype=float)
            se = np.array([r[f"se_{name}"] for r in ok], dtype=float)
            truth = float(model.beta[k])
            if n_ok:
                sd = float(np.std(est, ddof=1)) if n_ok > 1 else float("nan")
                stats_ = {"bias": float(np.mean(est) - truth), "sd": sd, "variance": sd * sd,
                          "mse": float(np.mean((est - truth) ** 2)), "mean_se": float(np.mean(se)),
                          "se_sd_ratio": float(np.mean(se) / sd) if sd and sd > 0 else float("nan"),
                          "coverage95": float(np.mean(np.abs(est - truth) <= z * se))}
            else:
                stats_ = dict.fromkeys(("bias", "sd", "variance", "mse", "mean_se", "se_sd_ratio", "coverage95"),
                                       float("nan"))
            out.append({**base, "parameter": name, "truth": truth, "mise": float("nan"), **stats_})
        for d, name in enumerate(("f1", "f2")):
            ise = np.array([r[f"ise_{name}"] for r in ok], dtype=float)
            out.append({**base, "parameter": name, "truth": float("nan"),
                        "mise": float(np.mean(ise)) if n_ok else float("nan")})
    return out


def run_study(config: SimulationConfig, jobs: int | None = None, raise_on_failures: bool = True) -> StudyReport:
    """Run every replication and aggregate per working structure.

    Replication ``r`` draws from the ``r``-th child of
    ``SeedSequence(config.seed)``, so results do not depend on ``jobs``.
    """
    jobs = config.jobs if jobs is None else jobs
    seeds = replication_seeds(config.seed, config.replications)
    args = [(config, r, s) for r, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            per_rep = list(ex.map(_run_one, args, chunksize=max(1, len(args) // (4 * jobs))))
    else:
        per_rep = [_run_one(a) for a in args]
    rows = [row for rep_rows in per_rep for row in rep_rows]
    report = StudyReport(config, rows, aggregate(config, rows))
    if raise_on_failures and report.failure_fraction > FAILURE_LIMIT:
        exc = StudyError(f"{report.failure_fraction:.1%} of replications failed (limit {FAILURE_LIMIT:.0%})")
        exc.report = report
        raise exc
    return report
